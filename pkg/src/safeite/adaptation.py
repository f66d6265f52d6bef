"""Online damage recovery by map-based Bayesian optimization.

Three strategies share the same machinery: every candidate is an archive
cell, GP prior means are the archived measurements, and each trial runs one
archived controller on the damaged robot.

``SITE``
    Maximizes expected improvement times the probability that every safety
    constraint holds.
``ITE``
    Maximizes expected improvement of the speed only.
``MO_ITE``
    Maximizes the expected hypervolume improvement of (speed, -force).
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .acquisition import (
    ParetoFront2,
    ehvi_2d,
    expected_improvement,
    feasibility_probability,
    pareto_insert,
)
from .archive import Archive, Elite
from .crawler import NO_DAMAGE, Crawler, DamageSpec, SimConfig
from .gp import KernelParams, MapPriorGP, gp_update


class Strategy(str, enum.Enum):
    ITE = "ite"
    MO_ITE = "mo-ite"
    SITE = "site"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    """Upper bound on a raw safety measurement; ``c = threshold - value``."""

    name: str
    threshold: float
    orientation: str = "upper-bound"
    index: int = 0

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.orientation != "upper-bound":
            raise ValueError(f"unsupported orientation {self.orientation!r}")

    def margin(self, measurement):
        return self.threshold - measurement


@dataclass(frozen=True)
class Trial:
    index: int
    cell: tuple[int, ...]
    descriptor: np.ndarray
    measured_performance: float
    measured_constraints: tuple[float, ...]
    feasible: bool
    acquisition_value: float


@dataclass
class TrialLog:
    trials: list[Trial] = field(default_factory=list)
    best_safe_performance: float = -math.inf
    unsafe_count: int = 0

    def append(self, trial: Trial) -> None:
        self.trials.append(trial)
        if trial.feasible:
            self.best_safe_performance = max(self.best_safe_performance, trial.measured_performance)
        else:
            self.unsafe_count += 1

    def __len__(self):
        return len(self.trials)


@dataclass(frozen=True)
class AdaptationConfig:
    """Settings for one adaptation run.

    ``stop_ratio`` of ``None`` disables the early stop, so the run always
    uses ``max_trials``. ``observation_noise`` is the standard deviation of
    Gaussian noise added to measured (speed, force) values; the
    noise stream is seeded by ``seed``.

    With ``output_scaling="archive-std"`` one kernel output unit is the
    archive's standard deviation of the modelled quantity (with ``"none"``
    it is one physical unit). Force-derived GPs (constraint margins and the
    MO_ITE force objective) scale that unit by ``safety_scale``.
    """

    max_trials: int = 30
    stop_ratio: float | None = 0.9
    kernel: KernelParams = field(default_factory=KernelParams)
    constraints: tuple[ConstraintSpec, ...] = ()
    strategy: Strategy = Strategy.SITE
    seed: int = 0
    observation_noise: tuple[float, float] = (0.0, 0.0)
    output_scaling: str = "archive-std"
    safety_scale: float = 0.6

    def __post_init__(self):
        if not self.safety_scale > 0:
            raise ValueError("safety_scale must be positive")
        if self.output_scaling not in ("archive-std", "none"):
            raise ValueError("output_scaling must be 'archive-std' or 'none'")
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")
        if self.stop_ratio is not None and not 0 < self.stop_ratio <= 1:
            raise ValueError("stop_ratio must lie in (0, 1]")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "constraints", tuple(self.constraints))


class DamagedRobot:
    """The robot the adaptation runs on: a crawler with a damage applied."""

    def __init__(self, config: SimConfig | None = None, damage: DamageSpec = NO_DAMAGE):
        self.crawler = Crawler(config, damage)

    @property
    def damage(self) -> DamageSpec:
        return self.crawler.damage


# Feeding -inf to a GP is meaningless; failed runs are recorded with -inf but
# the GP sees a margin this many thresholds below zero instead.
FAILED_MARGIN_SCALE = 1.0


def execute_behavior(robot: DamagedRobot, elite: Elite, constraints=(), rng=None,
                     noise=(0.0, 0.0)):
    """Run an elite on the robot; return ``(speed, force, constraint margins)``.

    A failed simulation yields speed 0, force ``inf`` and margins ``-inf``.
    """
    res = robot.crawler.run(elite.genotype)
    if res.failed:
        return 0.0, math.inf, tuple(-math.inf for _ in constraints)
    speed = res.speed
    force = robot.crawler.safety_value(res)
    if rng is not None and (noise[0] > 0 or noise[1] > 0):
        speed = speed + noise[0] * rng.standard_normal()
        force = max(force + noise[1] * rng.standard_normal(), 0.0)
    return speed, force, tuple(c.margin(force) for c in constraints)


class ArchivePrior:
    """Prior mean that looks up a per-cell value; undefined off the archive."""

    def __init__(self, resolution, cells, values):
        self.resolution = tuple(resolution)
        self.table = np.full(math.prod(self.resolution), np.nan)
        for cell, v in zip(cells, values):
            self.table[np.ravel_multi_index(cell, self.resolution)] = v

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        res = np.asarray(self.resolution)
        idx = np.minimum(np.floor(X * res).astype(int), res - 1)
        idx = np.maximum(idx, 0)
        out = self.table[np.ravel_multi_index(tuple(idx.T), self.resolution)]
        if np.any(np.isnan(out)):
            raise ValueError("prior mean requested outside the archive's filled cells")
        return out


@dataclass
class _Candidates:
    cells: list
    elites: list
    X: np.ndarray
    performance: np.ndarray
    safety: np.ndarray


def _candidates(archive: Archive) -> _Candidates:
    if len(archive) == 0:
        raise ConfigurationError("archive is empty")
    cells, elites = zip(*archive)
    return _Candidates(
        list(cells), list(elites),
        np.stack([e.descriptor for e in elites]),
        np.array([e.performance for e in elites]),
        np.stack([e.safety_values for e in elites]),
    )


def _gp(kernel: KernelParams, prior, scale: float = 1.0) -> MapPriorGP:
    s2 = scale * scale
    return MapPriorGP(kernel.length_scale, kernel.signal_variance * s2, kernel.noise_variance * s2, prior)


def output_scale(values, scaling: str) -> float:
    """Physical size of one kernel output unit for a quantity."""
    if scaling == "none":
        return 1.0
    sd = float(np.std(values))
    return sd if sd > 0 else 1.0


def argmax_with_ties(score: np.ndarray, secondary: np.ndarray, allowed: np.ndarray) -> int:
    """Index of the best allowed score.

    Exact ties go to the larger ``secondary`` value, then the lowest index.
    """
    idx = np.flatnonzero(allowed)
    if idx.size == 0:
        raise ConfigurationError("no untested candidates left")
    s = score[idx]
    best = idx[s == s.max()]
    if best.size > 1:
        sec = secondary[best]
        best = best[sec == sec.max()]
    return int(best[0])


def site_scores(mean_f, std_f, constraint_posteriors, incumbent):
    """Expected constrained improvement for arrays of posteriors."""
    prob = 1.0
    for mean_c, std_c in constraint_posteriors:
        prob = prob * feasibility_probability(mean_c, std=std_c)
    return expected_improvement(mean_f, incumbent, std=std_f) * prob


def select_next_site(candidates: _Candidates, gp_f, gp_cs, incumbent, tested=None):
    """Cell index (into ``candidates``) maximizing ECI over untested cells."""
    mean_f, std_f = gp_f.predict(candidates.X, return_std=True)
    posts = [gp.predict(candidates.X, return_std=True) for gp in gp_cs]
    score = site_scores(mean_f, std_f, posts, incumbent)
    allowed = np.ones(len(candidates.cells), bool) if tested is None else ~tested
    i = argmax_with_ties(score, mean_f, allowed)
    return i, float(score[i])


def reference_point(candidates: _Candidates, margin: float = 0.1) -> tuple[float, float]:
    """Archive's worst (speed, -force) pair pushed out by ``margin`` of the range."""
    speed = candidates.performance
    neg_force = -candidates.safety[:, 0]
    out = []
    for v in (speed, neg_force):
        span = float(v.max() - v.min()) or max(abs(float(v.min())), 1.0)
        out.append(float(v.min()) - margin * span)
    return out[0], out[1]


def adapt(archive: Archive, robot: DamagedRobot, config: AdaptationConfig) -> TrialLog:
    """Run select / execute / update until the trial budget or the stop rule."""
    cand = _candidates(archive)
    strategy = config.strategy
    constraints = config.constraints
    rng = np.random.default_rng(config.seed)
    kernel = config.kernel

    res = archive.resolution
    scaling = config.output_scaling
    gp_f = _gp(kernel, ArchivePrior(res, cand.cells, cand.performance),
               output_scale(cand.performance, scaling))
    gp_cs = [_gp(kernel, ArchivePrior(res, cand.cells, c.margin(cand.safety[:, c.index])),
                 config.safety_scale * output_scale(cand.safety[:, c.index], scaling))
             for c in constraints]
    gp_force = None
    front = None
    if strategy is Strategy.MO_ITE:
        gp_force = _gp(kernel, ArchivePrior(res, cand.cells, -cand.safety[:, 0]),
                       config.safety_scale * output_scale(cand.safety[:, 0], scaling))
        front = ParetoFront2((), reference_point(cand))

    stop_level = None
    if config.stop_ratio is not None:
        stop_level = config.stop_ratio * float(cand.performance.max())

    log = TrialLog()
    tested = np.zeros(len(cand.cells), bool)
    incumbent = None
    for t in range(1, config.max_trials + 1):
        if tested.all():
            break
        mean_f, std_f = gp_f.predict(cand.X, return_std=True)
        if strategy is Strategy.SITE:
            posts = [gp.predict(cand.X, return_std=True) for gp in gp_cs]
            score = site_scores(mean_f, std_f, posts, incumbent)
        elif strategy is Strategy.ITE:
            score = expected_improvement(mean_f, incumbent, std=std_f)
        else:
            mean_g, std_g = gp_force.predict(cand.X, return_std=True)
            score = ehvi_2d(mean_f, mean_g, front, std1=std_f, std2=std_g)
        i = argmax_with_ties(score, mean_f, ~tested)
        tested[i] = True

        elite = cand.elites[i]
        speed, force, margins = execute_behavior(robot, elite, constraints, rng, config.observation_noise)
        feasible = all(m >= 0 for m in margins)
        log.append(Trial(t, cand.cells[i], elite.descriptor, speed, margins, feasible, float(score[i])))

        x = elite.descriptor
        gp_f = gp_update(gp_f, x, speed)
        gp_cs = [gp_update(gp, x, m if math.isfinite(m) else -FAILED_MARGIN_SCALE * abs(c.threshold))
                 for gp, c, m in zip(gp_cs, constraints, margins)]
        if gp_force is not None:
            observed = -force if math.isfinite(force) else float(-cand.safety[:, 0].max() * 2)
            gp_force = gp_update(gp_force, x, observed)
            if math.isfinite(force):
                front = pareto_insert(front, (speed, -force))

        # ITE is safety-blind: any observation can become its incumbent
        if strategy is Strategy.ITE or (strategy is Strategy.SITE and feasible):
            incumbent = speed if incumbent is None else max(incumbent, speed)

        if stop_level is not None and log.best_safe_performance >= stop_level:
            break
    return log


TRIAL_HEADER_BASE = ["trial", "cell", "strategy", "performance", "feasible"]


def write_trial_log(log: TrialLog, path, strategy, archive: Archive | None = None,
                    n_constraints: int | None = None) -> None:
    """CSV with one row per trial; ``cell`` is the row-major flat cell index."""
    strategy = Strategy(strategy).value
    if n_constraints is None:
        n_constraints = len(log.trials[0].measured_constraints) if log.trials else 0
    header = TRIAL_HEADER_BASE + [f"constraint_{k + 1}" for k in range(n_constraints)] + ["acquisition"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for tr in log.trials:
            cell = (archive.flat_index(tr.cell) if archive is not None
                    else "-".join(str(c) for c in tr.cell))
            writer.writerow([tr.index, cell, strategy, repr(tr.measured_performance), int(tr.feasible),
                             *[repr(float(m)) for m in tr.measured_constraints], repr(tr.acquisition_value)])


def read_trial_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:5] != TRIAL_HEADER_BASE:
            raise ValueError(f"{path}: not a trial log (header {reader.fieldnames})")
        return list(reader)
