"""Acquisition functions over Gaussian posteriors.

Every function accepts scalars or equally shaped arrays of means and
standard deviations, so a whole archive can be scored in one call.

The normal CDF is :func:`scipy.special.ndtr` (Cephes), which is accurate to
double precision over the whole real line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Posterior:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= 0:
            raise ValueError(f"std must be non-negative, got {self.std}")


def norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


def norm_cdf(z):
    return ndtr(z)


def _as_arrays(mean, std):
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValueError("std must be non-negative")
    return np.broadcast_arrays(mean, std)


def _unwrap(value, like):
    return float(value) if np.ndim(like) == 0 else value


def upper_partial_moment(mean, std, level):
    """``E[max(0, Y - level)]`` for ``Y ~ N(mean, std**2)``."""
    mean, std = _as_arrays(mean, std)
    diff = np.atleast_1d(mean - level)
    std = np.atleast_1d(std)
    out = np.maximum(diff, 0.0)
    pos = std > 0
    if np.any(pos):
        s = std[pos]
        z = diff[pos] / s
        out[pos] = np.maximum(s * (z * ndtr(z) + norm_pdf(z)), 0.0)
    return out.reshape(np.shape(mean))


def expected_improvement(p, incumbent=None, *, std=None):
    """Expected improvement over ``incumbent``.

    ``p`` is a :class:`Posterior` or an array of means (with ``std`` given).
    An incumbent of ``None`` means nothing has been observed yet; EI is then
    the constant 1 so that feasibility alone drives the selection.
    """
    mean, s = (p.mean, p.std) if isinstance(p, Posterior) else (p, std)
    if incumbent is None:
        return _unwrap(np.ones(np.broadcast(np.asarray(mean), np.asarray(s)).shape), mean)
    if not math.isfinite(incumbent):
        raise ValueError("incumbent must be finite")
    return _unwrap(upper_partial_moment(mean, s, incumbent), mean)


def feasibility_probability(p, *, std=None):
    """``P(c >= 0)`` for a Gaussian posterior on the constraint value ``c``."""
    mean, s = (p.mean, p.std) if isinstance(p, Posterior) else (p, std)
    mean_a, s_a = (np.atleast_1d(a) for a in _as_arrays(mean, s))
    out = (mean_a >= 0).astype(float)
    pos = s_a > 0
    out[pos] = ndtr(mean_a[pos] / s_a[pos])
    return _unwrap(out.reshape(np.shape(np.broadcast(np.asarray(mean), np.asarray(s)))), mean)


def _ei_pair(pair, incumbent):
    mean, std = pair
    return expected_improvement(mean, incumbent, std=std)


def expected_constrained_improvement(obj, constraints, incumbent=None):
    """EI times the probability that every constraint is non-negative.

    ``obj`` and each entry of ``constraints`` are :class:`Posterior` objects
    or ``(mean, std)`` array pairs of the same shape.
    """
    ei = expected_improvement(obj, incumbent) if isinstance(obj, Posterior) else _ei_pair(obj, incumbent)
    prob = 1.0
    for c in constraints:
        prob = prob * (feasibility_probability(c) if isinstance(c, Posterior)
                       else feasibility_probability(c[0], std=c[1]))
    return ei * prob


@dataclass(frozen=True)
class ParetoFront2:
    """Mutually non-dominated points of a two-objective maximization problem.

    Points are kept sorted by decreasing first objective (hence increasing
    second objective) and must all strictly dominate ``reference_point``.
    """

    points: tuple[tuple[float, float], ...] = ()
    reference_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        ref = (float(self.reference_point[0]), float(self.reference_point[1]))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "reference_point", ref)
        for a, b in pts:
            if not (a > ref[0] and b > ref[1]):
                raise ValueError(f"point {(a, b)} does not strictly dominate the reference point")
        for (a0, b0), (a1, b1) in zip(pts, pts[1:]):
            if not (a0 > a1 and b0 < b1):
                raise ValueError("points must be non-dominated and sorted by decreasing first objective")

    def __len__(self):
        return len(self.points)


def pareto_insert(front: ParetoFront2, point) -> ParetoFront2:
    """Add ``point`` if no front member weakly dominates it; drop what it dominates."""
    a, b = float(point[0]), float(point[1])
    r1, r2 = front.reference_point
    if not (a > r1 and b > r2):
        return front
    for p1, p2 in front.points:
        if p1 >= a and p2 >= b:
            return front
    kept = [(p1, p2) for p1, p2 in front.points if not (a >= p1 and b >= p2)]
    kept.append((a, b))
    kept.sort(key=lambda q: -q[0])
    return ParetoFront2(tuple(kept), front.reference_point)


def hypervolume_2d(front: ParetoFront2) -> float:
    """Area dominated by the front and bounded below by the reference point."""
    r1, r2 = front.reference_point
    area = 0.0
    prev_b = r2
    for a, b in front.points:  # decreasing a, increasing b
        area += (a - r1) * (b - prev_b)
        prev_b = b
    return area


def ehvi_2d(obj1, obj2, front: ParetoFront2, *, std1=None, std2=None):
    """Exact expected hypervolume improvement for independent Gaussians.

    The region not dominated by the front splits into vertical strips
    between consecutive first-objective values; within strip ``i`` the
    improvement is the strip width covered by ``y1`` times the height
    ``max(0, y2 - floor_i)``. Independence lets each strip's expectation
    factor into two one-dimensional partial moments.
    """
    if isinstance(obj1, Posterior):
        m1, s1, m2, s2 = obj1.mean, obj1.std, obj2.mean, obj2.std
    else:
        m1, s1, m2, s2 = obj1, std1, obj2, std2
    m1a, s1a = _as_arrays(m1, s1)
    m2a, s2a = _as_arrays(m2, s2)
    r1, r2 = front.reference_point
    uppers = [math.inf] + [a for a, _ in front.points]
    lowers = [a for a, _ in front.points] + [r1]
    floors = [r2] + [b for _, b in front.points]
    total = np.zeros(np.broadcast(m1a, m2a).shape)
    for hi, lo, floor in zip(uppers, lowers, floors):
        width = upper_partial_moment(m1a, s1a, lo)
        if math.isfinite(hi):
            width = width - upper_partial_moment(m1a, s1a, hi)
        height = upper_partial_moment(m2a, s2a, floor)
        total = total + np.maximum(width, 0.0) * height
    return _unwrap(total, m1)
