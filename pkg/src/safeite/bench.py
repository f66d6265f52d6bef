"""Experiment harness: strategies x damages x maps x replicates, plus statistics.

Plan files are INI documents with a single ``[plan]`` section::

    [plan]
    archives = maps/map0.txt, maps/map1.txt
    damages = d1, d2, d3, d4
    strategies = ite, mo-ite, site
    replicates = 20
    trials = 30
    base_seed = 0
    speed_noise = 0.01
    force_noise = 2.0
    sim_config = robot.ini

Relative paths resolve against the plan file's directory. ``sim_config`` is
optional. Runs never stop early, so every replicate uses all of its trials.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .adaptation import (
    AdaptationConfig,
    ConstraintSpec,
    DamagedRobot,
    Strategy,
    adapt,
    read_trial_log,
    write_trial_log,
)
from .archive import load_archive
from .crawler import DAMAGES, SIM_VERSION, SimConfig, load_sim_config


class PlanError(ValueError):
    """Malformed plan file or a plan that refers to missing inputs."""


@dataclass(frozen=True)
class ExperimentPlan:
    archives: tuple[Path, ...]
    damages: tuple[str, ...] = ("d1", "d2", "d3", "d4")
    strategies: tuple[Strategy, ...] = (Strategy.ITE, Strategy.MO_ITE, Strategy.SITE)
    replicates: int = 20
    trials: int = 30
    base_seed: int = 0
    speed_noise: float = 0.01
    force_noise: float = 2.0
    sim_config: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "archives", tuple(Path(a) for a in self.archives))
        object.__setattr__(self, "strategies", tuple(Strategy(s) for s in self.strategies))
        object.__setattr__(self, "damages", tuple(self.damages))
        if not self.archives:
            raise PlanError("plan lists no archives")
        for d in self.damages:
            if d not in DAMAGES:
                raise PlanError(f"unknown damage {d!r}; expected one of {sorted(DAMAGES)}")
        if self.replicates < 2:
            raise PlanError("replicates must be >= 2")
        if self.trials < 1:
            raise PlanError("trials must be >= 1")
        if self.speed_noise < 0 or self.force_noise < 0:
            raise PlanError("noise levels must be non-negative")

    @property
    def n_runs(self) -> int:
        return len(self.archives) * len(self.damages) * len(self.strategies) * self.replicates


def _split(raw: str) -> list[str]:
    return [p.strip() for p in raw.replace("\n", ",").split(",") if p.strip()]


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise PlanError(f"{path}: {exc}") from exc
    if not parser.has_section("plan"):
        raise PlanError(f"{path}: missing [plan] section")
    sec = parser["plan"]
    known = {"archives", "damages", "strategies", "replicates", "trials", "base_seed",
             "speed_noise", "force_noise", "sim_config"}
    unknown = set(sec) - known
    if unknown:
        raise PlanError(f"{path}: unknown keys {sorted(unknown)}")
    if "archives" not in sec:
        raise PlanError(f"{path}: 'archives' is required")
    base = path.parent
    kw = {"archives": tuple(base / a for a in _split(sec["archives"]))}
    try:
        if "damages" in sec:
            kw["damages"] = tuple(_split(sec["damages"]))
        if "strategies" in sec:
            kw["strategies"] = tuple(Strategy(s) for s in _split(sec["strategies"]))
        for key in ("replicates", "trials", "base_seed"):
            if key in sec:
                kw[key] = sec.getint(key)
        for key in ("speed_noise", "force_noise"):
            if key in sec:
                kw[key] = sec.getfloat(key)
    except ValueError as exc:
        raise PlanError(f"{path}: {exc}") from exc
    if "sim_config" in sec:
        kw["sim_config"] = base / sec["sim_config"].strip()
    return ExperimentPlan(**kw)


def replicate_seed(base_seed: int, map_id: str, damage: str, strategy, replicate: int) -> int:
    """Stable 63-bit seed: sha256 of ``base|map|damage|strategy|replicate``."""
    key = f"{base_seed}|{map_id}|{damage}|{Strategy(strategy).value}|{replicate}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big") >> 1


def map_id_of(archive_path: Path, metadata: dict) -> str:
    seed = metadata.get("seed")
    return str(seed) if seed is not None else Path(archive_path).stem


def run_filename(map_id: str, damage: str, strategy, replicate: int) -> str:
    return f"map{map_id}_{damage}_{Strategy(strategy).value}_r{replicate:02d}.csv"


@dataclass(frozen=True)
class RunResult:
    map_id: str
    damage: str
    strategy: Strategy
    replicate: int
    best_safe: float
    unsafe: int


@dataclass(frozen=True)
class _Job:
    archive: Path
    map_id: str
    damage: str
    strategy: Strategy
    replicate: int
    seed: int
    trials: int
    noise: tuple[float, float]
    sim_config: Path | None
    out: Path | None


_ARCHIVE_CACHE: dict = {}


def _archive(path: Path):
    key = str(path)
    if key not in _ARCHIVE_CACHE:
        _ARCHIVE_CACHE[key] = load_archive(path)
    return _ARCHIVE_CACHE[key]


def _run_job(job: _Job) -> RunResult:
    archive = _archive(job.archive)
    sim = load_sim_config(job.sim_config) if job.sim_config is not None else SimConfig()
    threshold = archive.metadata["safety_threshold"]
    constraints = (ConstraintSpec("force", threshold),)
    cfg = AdaptationConfig(max_trials=job.trials, stop_ratio=None, constraints=constraints,
                           strategy=job.strategy, seed=job.seed, observation_noise=job.noise)
    log = adapt(archive, DamagedRobot(sim, DAMAGES[job.damage]), cfg)
    if job.out is not None:
        write_trial_log(log, job.out, job.strategy, archive, len(constraints))
    return RunResult(job.map_id, job.damage, job.strategy, job.replicate,
                     log.best_safe_performance, log.unsafe_count)


def _jobs(plan: ExperimentPlan, out_dir: Path | None) -> list[_Job]:
    missing = [str(a) for a in plan.archives if not a.is_file()]
    if plan.sim_config is not None and not plan.sim_config.is_file():
        missing.append(str(plan.sim_config))
    if missing:
        raise PlanError(f"missing input files: {', '.join(missing)}")
    jobs = []
    for path in plan.archives:
        archive = _archive(path)
        if "safety_threshold" not in archive.metadata:
            raise PlanError(f"{path}: archive metadata lacks safety_threshold")
        map_id = map_id_of(path, archive.metadata)
        for damage in plan.damages:
            for strategy in plan.strategies:
                for r in range(plan.replicates):
                    out = out_dir / run_filename(map_id, damage, strategy, r) if out_dir else None
                    jobs.append(_Job(path, map_id, damage, strategy, r,
                                     replicate_seed(plan.base_seed, map_id, damage, strategy, r),
                                     plan.trials, (plan.speed_noise, plan.force_noise),
                                     plan.sim_config, out))
    ids = [j.map_id for j in jobs]
    if len({(j.map_id, str(j.archive)) for j in jobs}) != len(set(ids)):
        raise PlanError("two archives share a map id (archive seed)")
    return jobs


def run_experiment(plan: ExperimentPlan, n_jobs: int = 1, out_dir=None) -> list[RunResult]:
    """Run every (map, damage, strategy, replicate) combination.

    Results come back in plan order whatever ``n_jobs`` is, and each run
    depends only on its own seed, so parallelism never changes the output.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    jobs = _jobs(plan, out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if n_jobs == 1:
        return [_run_job(j) for j in jobs]
    workers = n_jobs if n_jobs > 0 else os.cpu_count() or 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))


def load_results(run_dir) -> list[RunResult]:
    """Rebuild results from the per-run trial logs in ``run_dir``."""
    run_dir = Path(run_dir)
    results = []
    for path in sorted(run_dir.glob("map*_*_*_r*.csv")):
        stem = path.stem
        head, rep = stem.rsplit("_r", 1)
        map_part, damage, strategy = head.rsplit("_", 2)
        rows = read_trial_log(path)
        if not rows:
            raise ValueError(f"{path}: empty trial log")
        safe = [float(r["performance"]) for r in rows if r["feasible"] == "1"]
        unsafe = sum(1 for r in rows if r["feasible"] != "1")
        results.append(RunResult(map_part[3:], damage, Strategy(strategy), int(rep),
                                 max(safe) if safe else -math.inf, unsafe))
    if not results:
        raise ValueError(f"{run_dir}: no trial logs found")
    return results


def mann_whitney_u(sample_a, sample_b) -> tuple[float, float]:
    """``(U_a, two-sided p)`` with midranks for ties.

    The p-value is exact (enumerating rank-sum arrangements) when either
    sample has fewer than 8 values, otherwise the normal approximation with
    tie and continuity corrections.
    """
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples need at least one value")
    if np.any(np.isnan(a)) or np.any(np.isnan(b)):
        raise ValueError("samples must not contain NaN")
    na, nb = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:na].sum() - na * (na + 1) / 2)
    if min(na, nb) < 8:
        return u, _exact_p(ranks, na, u)
    n = na + nb
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts)) / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie)
    if var <= 0:
        return u, 1.0
    z = max(abs(u - na * nb / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * ndtr(-z)))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks: np.ndarray, na: int, u_obs: float) -> float:
    # doubled midranks are integers, so rank sums can be counted exactly
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros((na + 1, total + 1))
    counts[0, 0] = 1.0
    for r in r2:
        counts[1:, r:] += counts[:-1, :total + 1 - r].copy()
    dist = counts[na]
    sums = np.arange(total + 1) / 2.0
    u_vals = sums - na * (na + 1) / 2
    center = na * (ranks.size - na) / 2.0
    extreme = np.abs(u_vals - center) >= abs(u_obs - center) - 1e-9
    return float(min(1.0, dist[extreme].sum() / dist.sum()))


@dataclass
class SummaryRow:
    scope: str
    damage: str
    strategy: Strategy
    best_safe: list = field(default_factory=list)
    unsafe: list = field(default_factory=list)

    @property
    def median_best_safe(self) -> float:
        return float(np.median(self.best_safe))

    @property
    def median_unsafe(self) -> float:
        return float(np.median(self.unsafe))


SUMMARY_HEADER = ["scope", "damage", "strategy", "n", "median_best_safe", "median_unsafe",
                  "best_safe_values", "unsafe_values"]


def summarize(results: list[RunResult]) -> list[SummaryRow]:
    """Pooled rows (scope ``all``) first, then one row per map.

    Within a row, values are ordered by (map, replicate) so the output does
    not depend on the order runs finished in.
    """
    results = sorted(results, key=lambda r: (r.damage, r.strategy.value, _map_key(r.map_id), r.replicate))
    rows: dict = {}
    for r in results:
        for scope in ("all", r.map_id):
            row = rows.setdefault((scope, r.damage, r.strategy), SummaryRow(scope, r.damage, r.strategy))
            row.best_safe.append(r.best_safe)
            row.unsafe.append(r.unsafe)
    def order(key):
        scope, damage, strategy = key
        return (scope != "all", _map_key(scope), damage, strategy.value)
    return [rows[k] for k in sorted(rows, key=order)]


def _map_key(map_id: str):
    return (0, int(map_id), "") if map_id.lstrip("-").isdigit() else (1, 0, map_id)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_summary_csv(rows: list[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([row.scope, row.damage, row.strategy.value, len(row.unsafe),
                        _fmt(row.median_best_safe), _fmt(row.median_unsafe),
                        ";".join(_fmt(v) for v in row.best_safe),
                        ";".join(str(int(v)) for v in row.unsafe)])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


@dataclass(frozen=True)
class Comparison:
    damage: str
    metric: str
    other: Strategy
    u: float
    p: float


def compare(rows: list[SummaryRow]) -> list[Comparison]:
    """SITE against each other strategy, on both metrics, per damage (pooled)."""
    pooled = {(r.damage, r.strategy): r for r in rows if r.scope == "all"}
    out = []
    for damage in sorted({d for d, _ in pooled}):
        site = pooled.get((damage, Strategy.SITE))
        if site is None:
            continue
        for other in (Strategy.ITE, Strategy.MO_ITE):
            row = pooled.get((damage, other))
            if row is None:
                continue
            for metric in ("unsafe", "best_safe"):
                u, p = mann_whitney_u(getattr(site, metric), getattr(row, metric))
                out.append(Comparison(damage, metric, other, u, p))
    return out


def ordering_checks(rows: list[SummaryRow]) -> dict:
    """Per damage: unsafe medians strictly ordered SITE < MO_ITE < ITE, and
    whether SITE's best-safe median is at least both others'."""
    pooled = {(r.damage, r.strategy): r for r in rows if r.scope == "all"}
    out = {}
    for damage in sorted({d for d, _ in pooled}):
        try:
            s, m, i = (pooled[(damage, st)] for st in (Strategy.SITE, Strategy.MO_ITE, Strategy.ITE))
        except KeyError:
            continue
        out[damage] = {
            "unsafe_ordered": s.median_unsafe < m.median_unsafe < i.median_unsafe,
            "site_best_safe_top": s.median_best_safe >= max(m.median_best_safe, i.median_best_safe),
        }
    return out


def write_report(rows: list[SummaryRow], path) -> None:
    lines = [f"simulator: {SIM_VERSION} (reduced-order planar crawler)", "",
             "pooled medians over maps and replicates",
             f"{'damage':<7}{'strategy':<9}{'n':>5}{'best_safe':>12}{'unsafe':>8}"]
    for row in rows:
        if row.scope == "all":
            lines.append(f"{row.damage:<7}{row.strategy.value:<9}{len(row.unsafe):>5}"
                         f"{row.median_best_safe:>12.4f}{row.median_unsafe:>8.1f}")
    lines += ["", "Mann-Whitney U, SITE against each strategy",
              f"{'damage':<7}{'metric':<11}{'versus':<8}{'U':>9}{'p':>12}"]
    for c in compare(rows):
        lines.append(f"{c.damage:<7}{c.metric:<11}{c.other.value:<8}{c.u:>9.1f}{c.p:>12.3g}")
    lines += ["", "ordering"]
    for damage, chk in ordering_checks(rows).items():
        lines.append(f"{damage}: unsafe SITE < MO-ITE < ITE: {'yes' if chk['unsafe_ordered'] else 'no'}; "
                     f"SITE best-safe highest: {'yes' if chk['site_best_safe_top'] else 'no'}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_outputs(results: list[RunResult], out_dir) -> list[SummaryRow]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summarize(results)
    write_summary_csv(rows, out_dir / "summary.csv")
    write_report(rows, out_dir / "report.txt")
    return rows
