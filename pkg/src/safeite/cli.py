"""Command-line entry point: ``safeite <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when an input file is
missing or malformed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .adaptation import (
    AdaptationConfig,
    ConstraintSpec,
    DamagedRobot,
    Strategy,
    adapt,
    write_trial_log,
)
from .archive import ArchiveFormatError, load_archive, save_archive
from .crawler import DAMAGES, Crawler, SimConfig, load_sim_config
from .mapgen import generate_map

log = logging.getLogger("safeite")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sim_config(path) -> SimConfig:
    if path is None:
        return SimConfig()
    try:
        return load_sim_config(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_archive(path):
    try:
        return load_archive(path)
    except (OSError, ArchiveFormatError) as exc:
        raise DataError(str(exc)) from exc


def cmd_mapgen(args) -> None:
    if args.budget < 1:
        raise UsageError("--budget must be positive")
    config = _sim_config(args.config)
    archive = generate_map(args.seed, args.budget, config, init_count=min(args.init_count, args.budget))
    save_archive(archive, args.out)
    log.info("wrote %d elites to %s", len(archive), args.out)


def cmd_adapt(args) -> None:
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    archive = _load_archive(args.archive)
    threshold = args.threshold if args.threshold is not None else archive.metadata.get("safety_threshold")
    if threshold is None:
        raise DataError(f"{args.archive}: no safety_threshold in metadata; pass --threshold")
    cfg = AdaptationConfig(max_trials=args.trials, stop_ratio=args.stop_ratio,
                           constraints=(ConstraintSpec("force", float(threshold)),),
                           strategy=Strategy(args.strategy), seed=args.seed)
    result = adapt(archive, DamagedRobot(_sim_config(args.config), DAMAGES[args.damage]), cfg)
    write_trial_log(result, args.out, cfg.strategy, archive, 1)
    log.info("%d trials, %d unsafe, best safe %.4f", len(result), result.unsafe_count,
             result.best_safe_performance)


def cmd_simulate(args) -> None:
    archive = _load_archive(args.archive)
    cells = [c for c, _ in archive]
    flat = [archive.flat_index(c) for c in cells]
    if args.cell is None:
        elite = archive.best()
    elif args.cell in flat:
        elite = archive[cells[flat.index(args.cell)]]
    else:
        raise DataError(f"cell {args.cell} is empty in {args.archive}")
    crawler = Crawler(_sim_config(args.config), DAMAGES[args.damage])
    res = crawler.run(elite.genotype, dump_trajectory=args.dump_trajectory)
    duty = " ".join(f"{v:.4f}" for v in np.asarray(res.duty))
    print(f"speed {res.speed:.6f}\nforce_sum {res.force_sum:.6f}\npeak_force {res.peak_force:.6f}\n"
          f"duty {duty}\nfailed {int(res.failed)}")


def cmd_bench(args) -> None:
    try:
        plan = bench.load_plan(args.plan)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except bench.PlanError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out_dir)
    runs = out / "runs"
    try:
        results = bench.run_experiment(plan, n_jobs=args.jobs, out_dir=runs)
    except (bench.PlanError, ArchiveFormatError) as exc:
        raise DataError(str(exc)) from exc
    bench.write_outputs(results, out)
    log.info("%d runs; summary in %s", len(results), out / "summary.csv")


def cmd_stats(args) -> None:
    try:
        results = bench.load_results(args.input)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    rows = bench.summarize(results)
    out = Path(args.out)
    bench.write_summary_csv(rows, out)
    bench.write_report(rows, out.with_name("report.txt"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safeite", description="Map-based safe damage recovery for a simulated crawler.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("mapgen", help="build a behavior-performance map with MAP-Elites")
    m.add_argument("--config", help="simulator configuration file")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--budget", type=int, default=100_000)
    m.add_argument("--init-count", type=int, default=2000)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mapgen)

    a = sub.add_parser("adapt", help="run one adaptation on a damaged robot")
    a.add_argument("--archive", required=True)
    a.add_argument("--damage", choices=sorted(DAMAGES), required=True)
    a.add_argument("--strategy", choices=[s.value for s in Strategy], required=True)
    a.add_argument("--trials", type=int, default=30)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="simulator configuration file")
    a.add_argument("--threshold", type=float, help="force threshold (default: archive metadata)")
    a.add_argument("--stop-ratio", type=float, default=None,
                   help="stop once best safe speed reaches this fraction of the archive best")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("simulate", help="replay one archived controller")
    s.add_argument("--archive", required=True)
    s.add_argument("--cell", type=int, help="flat cell index (default: best elite)")
    s.add_argument("--damage", choices=sorted(DAMAGES), default="none")
    s.add_argument("--config", help="simulator configuration file")
    s.add_argument("--dump-trajectory", metavar="PATH", help="write per-step state as CSV")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="run an experiment plan")
    b.add_argument("--plan", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--jobs", type=int, default=1, help="worker processes (0: one per CPU)")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("stats", help="summarize a directory of trial logs")
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"safeite: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"safeite: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
