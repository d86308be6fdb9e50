"""Command-line entry point: ``hazardnav <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import conformal as cf
from . import experiment as ex
from .agent import TRAJECTORY_FIELDS, QTable, evaluate
from .env import NavEnv
from .synth import DatasetManifest, build_dataset
from .tables import read_table, write_table

log = logging.getLogger("hazardnav")


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _require(value, flag: str):
    if value is None:
        raise ValueError(f"{flag} is required")
    return value


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or "dataset")
    ds = cfg.dataset
    build_dataset(ds.world, ds.scorer, ds.counts, ds.k, cfg.seed, out)
    print(out / "manifest.json")
    return 0


def cmd_calibrate(args) -> int:
    manifest = DatasetManifest.load(_require(args.manifest, "--manifest"))
    method = cf.Method(args.method.upper())
    alpha = args.alpha
    if method.is_conformal and alpha is None:
        alpha = _load_config(args).alpha if args.config else None
        _require(alpha, "--alpha")
    pred = ex.calibrate_from_manifest(manifest, method, alpha, args.grid, args.k)
    out = Path(args.out or f"{method.value}.json")
    ex.save_predictor(out, pred)
    print(json.dumps(pred.to_record(), sort_keys=True))
    return 0


def cmd_segeval(args) -> int:
    manifest = DatasetManifest.load(_require(args.manifest, "--manifest"))
    preds = [ex.load_predictor(p) for p in _require(args.predictors, "--predictors")]
    rows = ex.segeval_rows(manifest, preds, args.cover_frac)
    summary = ex.write_segeval(Path(args.out or "."), rows)
    sys.stdout.write(ex.format_report(summary, []))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = DatasetManifest.load(_require(args.manifest, "--manifest"))
    preds = [ex.load_predictor(p) for p in _require(args.predictor, "--predictor")]
    out = Path(args.out or "train")
    cases = ex.build_cases(manifest, preds, cfg.envs, cfg.seed)
    for case in cases:
        ex.write_world_files(out / "worlds", case)
    methods = [p.method for p in preds]
    results = ex.run_jobs(ex.make_jobs(cases, methods, cfg), args.jobs)
    runs = ex.write_training_outputs(out, results)
    summary = ex.summary_rows(runs, [m.value for m in methods])
    write_table(out / "summary.csv", ex.SUMMARY_FIELDS, summary)
    sys.stdout.write(ex.format_report([], summary))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    world = ex.load_world_file(_require(args.world, "--world"))
    table = QTable.load(_require(args.qtable, "--qtable"))
    seed = args.seed if args.seed is not None else 0
    trajectory: list = []
    summary = evaluate(table, lambda: NavEnv(world, cfg.rewards, cfg.noise, seed), args.episodes,
                       greedy=not args.epsilon_greedy, seed=seed, log=trajectory)
    if args.out:
        write_table(args.out, TRAJECTORY_FIELDS, trajectory)
    print(json.dumps(asdict(summary), sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or "results")
    ex.run_experiment(cfg, out, args.jobs)
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    print(out / "summary.csv")
    return 0


def cmd_report(args) -> int:
    root = Path(args.results or args.out or "results")
    seg = root / "segeval_summary.csv"
    summ = root / "summary.csv"
    if not seg.exists() and not summ.exists():
        raise FileNotFoundError(f"no result tables in {root}")
    segsum = read_table(seg) if seg.exists() else []
    summary = read_table(summ) if summ.exists() else []
    for row in summary:
        row["runs"] = int(row["runs"])
    sys.stdout.write(ex.format_report(segsum, summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for training")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hazardnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", parents=[common], help="fit one predictor on the CAL split")
    p.add_argument("--manifest")
    p.add_argument("--method", required=True, choices=[m.value for m in cf.Method],
                   type=str.upper)
    p.add_argument("--alpha", type=float)
    p.add_argument("--grid", type=int, default=cf.DEFAULT_GRID)
    p.add_argument("--k", type=int, help="use the first K stored samples")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("segeval", parents=[common], help="segmentation metrics on TEST")
    p.add_argument("--manifest")
    p.add_argument("--predictors", nargs="+")
    p.add_argument("--cover-frac", type=float, default=0.5)
    p.set_defaults(func=cmd_segeval)

    p = sub.add_parser("train", parents=[common], help="train agents on calibrated worlds")
    p.add_argument("--manifest")
    p.add_argument("--predictor", nargs="+")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="roll out a saved Q-table")
    p.add_argument("--world")
    p.add_argument("--qtable")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--epsilon-greedy", action="store_true", help="act with epsilon 0.05")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="run the full protocol")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="print tables from a results directory")
    p.add_argument("--results")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ex.StageError as exc:
        print(f"hazardnav {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"hazardnav {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
