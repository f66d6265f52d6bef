"""Grid MAP-Elites archive over a safety-augmented behavior descriptor.

Each cell of a regular grid over ``[0, 1]^d`` keeps the highest-performing
controller whose descriptor falls in it, together with the raw safety
measurements recorded while evaluating it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_unit_interval

logger = logging.getLogger(__name__)

FORMAT_TAG = "sitemap-archive v1"
DEFAULT_RESOLUTION = (5, 5, 5, 5, 5)


class ArchiveFormatError(ValueError):
    """Raised when an archive file cannot be parsed or fails validation."""


@dataclass(frozen=True, eq=False)
class Elite:
    genotype: np.ndarray
    descriptor: np.ndarray
    performance: float
    safety_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "genotype", check_unit_interval(self.genotype, "genotype").reshape(-1))
        object.__setattr__(self, "descriptor", check_unit_interval(self.descriptor, "descriptor").reshape(-1))
        safety = np.asarray(self.safety_values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(safety)) or np.any(safety < 0):
            raise ValueError("safety values must be finite and non-negative")
        object.__setattr__(self, "safety_values", safety)
        if not math.isfinite(self.performance):
            raise ValueError("performance must be finite")
        object.__setattr__(self, "performance", float(self.performance))

    def __eq__(self, other):
        if not isinstance(other, Elite):
            return NotImplemented
        return (self.performance == other.performance
                and np.array_equal(self.genotype, other.genotype)
                and np.array_equal(self.descriptor, other.descriptor)
                and np.array_equal(self.safety_values, other.safety_values))

    __hash__ = None


def discretize(descriptor, resolution) -> tuple[int, ...]:
    """Grid cell of a descriptor; the upper edge 1.0 falls in the last bin."""
    d = np.asarray(descriptor, dtype=float).reshape(-1)
    res = np.asarray(resolution, dtype=int)
    if d.shape != res.shape:
        raise ValueError(f"descriptor has {d.shape[0]} dims, resolution has {res.shape[0]}")
    idx = np.minimum(np.floor(d * res).astype(int), res - 1)
    return tuple(int(i) for i in np.maximum(idx, 0))


class Archive:
    """Sparse grid of elites, at most one per cell.

    ``metadata`` carries run provenance such as ``force_norm_max``, ``seed``,
    ``budget`` and ``safety_threshold``.
    """

    def __init__(self, resolution=DEFAULT_RESOLUTION, metadata: dict | None = None):
        self.resolution = tuple(int(r) for r in resolution)
        if not self.resolution or min(self.resolution) < 1:
            raise ValueError("resolution needs at least one dimension with >= 1 bin")
        self.cells: dict[tuple[int, ...], Elite] = {}
        self.metadata = dict(metadata or {})

    @property
    def dims(self) -> int:
        return len(self.resolution)

    @property
    def n_cells(self) -> int:
        return math.prod(self.resolution)

    def __len__(self):
        return len(self.cells)

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], Elite]]:
        for cell in sorted(self.cells):
            yield cell, self.cells[cell]

    def __getitem__(self, cell) -> Elite:
        return self.cells[tuple(cell)]

    def __contains__(self, cell):
        return tuple(cell) in self.cells

    def __eq__(self, other):
        if not isinstance(other, Archive):
            return NotImplemented
        return (self.resolution == other.resolution and self.metadata == other.metadata
                and self.cells.keys() == other.cells.keys()
                and all(self.cells[c] == other.cells[c] for c in self.cells))

    __hash__ = None

    def cell_of(self, descriptor) -> tuple[int, ...]:
        return discretize(descriptor, self.resolution)

    def flat_index(self, cell) -> int:
        return int(np.ravel_multi_index(tuple(cell), self.resolution))

    def add(self, candidate: Elite) -> bool:
        """Store ``candidate`` if its cell is empty or it strictly beats the occupant."""
        cell = self.cell_of(candidate.descriptor)
        current = self.cells.get(cell)
        if current is not None and not candidate.performance > current.performance:
            return False
        self.cells[cell] = candidate
        return True

    def best(self) -> Elite:
        if not self.cells:
            raise ValueError("archive is empty")
        return max((e for _, e in self), key=lambda e: e.performance)

    def copy(self) -> Archive:
        out = Archive(self.resolution, self.metadata)
        out.cells = dict(self.cells)
        return out

    def check(self) -> None:
        """Raise if any elite does not discretize to the cell it is stored in."""
        for cell, elite in self.cells.items():
            if self.cell_of(elite.descriptor) != cell:
                raise ArchiveFormatError(f"elite stored in {cell} belongs to {self.cell_of(elite.descriptor)}")


def insert_if_better(archive: Archive, candidate: Elite) -> tuple[Archive, bool]:
    return archive, archive.add(candidate)


Outcome = tuple  # (performance, descriptor, safety_values)


class MapElites(BaseEstimator):
    """Grid MAP-Elites with isotropic Gaussian mutation.

    Parameters
    ----------
    resolution : tuple of int
        Bins per descriptor dimension.
    init_count : int
        Number of uniformly random genotypes evaluated before mutation starts.
    mutation_sigma : float
        Standard deviation of the per-gene Gaussian mutation; children are
        clipped to ``[0, 1]``.
    batch_size : int
        Parents are drawn from the archive as it stands at the start of a
        batch; the batch's children are then inserted in order. The result is
        deterministic for a given ``random_state`` and ``batch_size``.
    genotype_size : int
    random_state : int or None
    """

    def __init__(self, resolution=DEFAULT_RESOLUTION, init_count=2000, mutation_sigma=0.05,
                 batch_size=100, genotype_size=24, random_state=None):
        self.resolution = resolution
        self.init_count = init_count
        self.mutation_sigma = mutation_sigma
        self.batch_size = batch_size
        self.genotype_size = genotype_size
        self.random_state = random_state

    def fit(self, evaluate: Callable, budget: int, *, initial=None,
            callback: Callable[[Archive, int], None] | None = None):
        """Run ``budget`` evaluations of ``evaluate``.

        ``evaluate(genotype)`` returns ``(performance, descriptor,
        safety_values)``; exceptions and non-finite results count as failed
        evaluations, which still consume budget. ``initial`` optionally holds
        pre-evaluated ``(genotype, outcome)`` pairs used as the random
        initial batch (``outcome`` may be ``None`` for a failure).
        """
        if not (budget >= self.init_count >= 1):
            raise ValueError(f"need budget >= init_count >= 1, got {budget} and {self.init_count}")
        if self.batch_size < 1 or not self.mutation_sigma >= 0:
            raise ValueError("batch_size must be >= 1 and mutation_sigma >= 0")
        rng = np.random.default_rng(self.random_state)
        archive = Archive(self.resolution)
        self.n_evaluations_ = 0
        self.n_failed_ = 0
        self.coverage_history_ = []

        if initial is None:
            genotypes = rng.random((self.init_count, self.genotype_size))
            initial = [(g, self._safe_eval(evaluate, g)) for g in genotypes]
        elif len(initial) != self.init_count:
            raise ValueError(f"initial batch has {len(initial)} entries, expected {self.init_count}")
        for g, outcome in initial:
            self._insert(archive, g, outcome)
        self._report(archive, callback)

        while self.n_evaluations_ < budget:
            n = min(self.batch_size, budget - self.n_evaluations_)
            elites = [e for _, e in archive]
            if elites:
                parents = np.stack([elites[i].genotype for i in rng.integers(len(elites), size=n)])
                children = np.clip(parents + rng.normal(0.0, self.mutation_sigma, parents.shape), 0.0, 1.0)
            else:
                children = rng.random((n, self.genotype_size))
            for g in children:
                self._insert(archive, g, self._safe_eval(evaluate, g))
            self._report(archive, callback)

        if self.n_failed_:
            logger.info("%d of %d evaluations failed", self.n_failed_, self.n_evaluations_)
        self.archive_ = archive
        return self

    def _safe_eval(self, evaluate, genotype):
        try:
            return evaluate(genotype)
        except Exception as exc:  # a broken controller must not stop the run
            logger.debug("evaluation failed: %s", exc)
            return None

    def _insert(self, archive, genotype, outcome):
        self.n_evaluations_ += 1
        if outcome is None:
            self.n_failed_ += 1
            return
        performance, descriptor, safety = outcome
        try:
            elite = Elite(np.array(genotype, dtype=float), descriptor, performance, safety)
        except ValueError as exc:
            logger.debug("invalid evaluation result: %s", exc)
            self.n_failed_ += 1
            return
        archive.add(elite)

    def _report(self, archive, callback):
        self.coverage_history_.append((self.n_evaluations_, len(archive)))
        if callback is not None:
            callback(archive, self.n_evaluations_)


def run_map_elites(evaluate, budget, config: dict | None = None, **fit_kw) -> Archive:
    """Functional front end to :class:`MapElites`.

    ``config`` keys: ``resolution``, ``init_count``, ``mutation_sigma``,
    ``batch_size``, ``genotype_size`` and ``seed``.
    """
    config = dict(config or {})
    seed = config.pop("seed", None)
    est = MapElites(random_state=seed, **config).fit(evaluate, budget, **fit_kw)
    return est.archive_


# -- persistence -------------------------------------------------------------

_INT_META = {"seed", "budget", "elites"}
_FLOAT_META = {"force_norm_max", "safety_threshold"}


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_archive(archive: Archive, path) -> None:
    archive.check()
    meta = dict(archive.metadata)
    genotype_size = len(next(iter(archive.cells.values())).genotype) if archive.cells else 0
    header = [
        FORMAT_TAG,
        f"dims={archive.dims}",
        "res=" + ",".join(str(r) for r in archive.resolution),
        f"G={genotype_size}",
        f"force_norm_max={float(meta.pop('force_norm_max', float('nan')))!r}",
        f"seed={int(meta.pop('seed', 0))}",
    ]
    meta.pop("elites", None)
    for key in sorted(meta):
        value = meta[key]
        if any(ch in str(value) for ch in ";=\n"):
            raise ValueError(f"metadata value for {key!r} contains a reserved character")
        header.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    header.append(f"elites={len(archive)}")
    lines = ["; ".join(header)]
    for cell, e in archive:
        lines.append(" | ".join([
            ",".join(str(i) for i in cell),
            _fmt(e.descriptor),
            repr(float(e.performance)),
            _fmt(e.safety_values),
            _fmt(e.genotype),
        ]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(line: str) -> tuple[tuple[int, ...], int, dict]:
    parts = [p.strip() for p in line.strip().split(";")]
    if not parts or parts[0] != FORMAT_TAG:
        raise ArchiveFormatError(f"line 1: expected header starting with {FORMAT_TAG!r}")
    fields = {}
    for p in parts[1:]:
        key, sep, value = p.partition("=")
        if not sep:
            raise ArchiveFormatError(f"line 1: malformed header field {p!r}")
        fields[key.strip()] = value.strip()
    for key in ("dims", "res", "G", "force_norm_max", "seed"):
        if key not in fields:
            raise ArchiveFormatError(f"line 1: header is missing {key!r}")
    try:
        dims = int(fields.pop("dims"))
        res = tuple(int(v) for v in fields.pop("res").split(","))
        genotype_size = int(fields.pop("G"))
        meta = {}
        for key, value in fields.items():
            if key in _INT_META:
                meta[key] = int(value)
            elif key in _FLOAT_META:
                meta[key] = float(value)
            else:
                meta[key] = value
    except ValueError as exc:
        raise ArchiveFormatError(f"line 1: {exc}") from exc
    if len(res) != dims:
        raise ArchiveFormatError(f"line 1: dims={dims} but res lists {len(res)} values")
    return res, genotype_size, meta


def _floats(text: str, lineno: int, what: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros(0)
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ArchiveFormatError(f"line {lineno}: bad {what}: {exc}") from exc


def load_archive(path) -> Archive:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise ArchiveFormatError("line 1: empty file")
    res, genotype_size, meta = _parse_header(lines[0])
    expected = meta.pop("elites", None)
    archive = Archive(res, meta)
    records = lines[1:]
    if records and records[-1] == "":
        records = records[:-1]
    elif records:
        raise ArchiveFormatError(f"line {len(lines)}: file does not end with a newline (truncated?)")
    for lineno, line in enumerate(records, start=2):
        parts = line.split("|")
        if len(parts) != 5:
            raise ArchiveFormatError(f"line {lineno}: expected 5 '|'-separated fields, got {len(parts)}")
        try:
            cell = tuple(int(v) for v in parts[0].split(","))
        except ValueError as exc:
            raise ArchiveFormatError(f"line {lineno}: bad cell index: {exc}") from exc
        descriptor = _floats(parts[1], lineno, "descriptor")
        performance = _floats(parts[2], lineno, "performance")
        safety = _floats(parts[3], lineno, "safety values")
        genotype = _floats(parts[4], lineno, "genotype")
        if len(cell) != len(res) or len(descriptor) != len(res):
            raise ArchiveFormatError(f"line {lineno}: cell/descriptor must have {len(res)} dims")
        if len(performance) != 1:
            raise ArchiveFormatError(f"line {lineno}: expected one performance value")
        if len(genotype) != genotype_size:
            raise ArchiveFormatError(f"line {lineno}: genotype has {len(genotype)} genes, header says {genotype_size}")
        try:
            elite = Elite(genotype, descriptor, performance[0], safety)
        except ValueError as exc:
            raise ArchiveFormatError(f"line {lineno}: invalid elite: {exc}") from exc
        if discretize(descriptor, res) != cell:
            raise ArchiveFormatError(f"line {lineno}: descriptor falls in {discretize(descriptor, res)}, not {cell}")
        if cell in archive.cells:
            raise ArchiveFormatError(f"line {lineno}: duplicate cell {cell}")
        archive.cells[cell] = elite
    if expected is not None and expected != len(archive):
        raise ArchiveFormatError(f"header announces {expected} elites but file holds {len(archive)} (truncated?)")
    return archive
