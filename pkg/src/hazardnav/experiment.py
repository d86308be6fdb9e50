"""End-to-end protocol: dataset, calibration, segmentation metrics, navigation.

The harness is deterministic given an :class:`ExperimentConfig`. Every
random choice is drawn from a sub-seed of the config's master seed or from
the listed agent seeds, and training jobs are merged in a fixed order no
matter how many worker processes ran them.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import conformal as cf
from .agent import (
    CURVE_METRICS,
    TRAJECTORY_FIELDS,
    AgentConfig,
    CurveRecord,
    EvalSummary,
    evaluate,
    final_window,
    train,
)
from .env import NavEnv, NavWorld, NoiseConfig, RewardParams, sample_start_goal
from .hazardmap import PixelCoord, format_mask, read_mask
from .metrics import INSTANCE_FIELDS, PIXEL_FIELDS, instance_metrics, pixel_metrics, summarize
from .synth import (
    DatasetManifest,
    ScorerConfig,
    Split,
    WorldConfig,
    atomic_write_text,
    build_dataset,
    derive_seed,
)
from .tables import read_numeric_table, write_table

log = logging.getLogger(__name__)

_PLACEMENT = 5  # sub-seed stream for start/goal placement


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ---------------------------------------------------------


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ValueError(f"unknown keys in '{section}': {sorted(unknown)}")


@dataclass(frozen=True)
class DatasetSection:
    world: WorldConfig = field(default_factory=WorldConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    counts: dict = field(default_factory=lambda: {"TRAIN": 0, "CAL": 200, "TEST": 20})
    k: int = 8

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSection":
        _check_keys("dataset", data, ("world", "scorer", "counts", "K"))
        world = WorldConfig.from_dict(data.get("world", {}))
        scorer_defaults = ScorerConfig.default_for(world.hazard_kind).to_dict()
        scorer = ScorerConfig.from_dict({**scorer_defaults, **data.get("scorer", {})})
        counts = {Split(str(k).upper()).value: int(v) for k, v in data.get("counts", cls().counts).items()}
        if any(v < 0 for v in counts.values()):
            raise ValueError("dataset counts must be non-negative")
        if counts.get("CAL", 0) < 1 or counts.get("TEST", 0) < 1:
            raise ValueError("dataset needs at least one CAL and one TEST item")
        k = int(data.get("K", cls.k))
        if k < 0:
            raise ValueError("K must be non-negative")
        return cls(world, scorer, counts, k)

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(), "scorer": self.scorer.to_dict(),
                "counts": {s.value: int(self.counts.get(s.value, 0)) for s in Split}, "K": self.k}


@dataclass(frozen=True)
class EnvSection:
    n_worlds: int = 3
    horizon: int = 1000
    min_separation: Optional[int] = None

    @classmethod
    def from_dict(cls, data: dict) -> "EnvSection":
        _check_keys("envs", data, ("n_worlds", "horizon", "min_separation"))
        out = cls(**data)
        if out.n_worlds < 1 or out.horizon < 1:
            raise ValueError("envs.n_worlds and envs.horizon must be positive")
        return out

    def to_dict(self) -> dict:
        return {"n_worlds": self.n_worlds, "horizon": self.horizon, "min_separation": self.min_separation}


_TOP_KEYS = ("seed", "dataset", "methods", "alpha", "grid", "cover_frac", "agent", "envs",
             "rewards", "noise", "seeds", "window", "eval_episodes")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    methods: tuple = tuple(cf.Method)
    alpha: float = 0.1
    grid: int = cf.DEFAULT_GRID
    cover_frac: float = 0.5
    agent: AgentConfig = field(default_factory=AgentConfig)
    envs: EnvSection = field(default_factory=EnvSection)
    rewards: RewardParams = field(default_factory=RewardParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seeds: tuple = (0,)
    window: int = 25
    eval_episodes: int = 1

    def __post_init__(self):
        methods = tuple(cf.Method(m) for m in self.methods)
        if not methods:
            raise ValueError("at least one method is required")
        if len(set(methods)) != len(methods):
            raise ValueError("methods must not repeat")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("at least one agent seed is required")
        if any(m.is_conformal for m in methods):
            cf.check_alpha(self.alpha)
        if any(m.uses_samples for m in methods) and self.dataset.k < 1:
            raise ValueError("MC and MCCP need dataset.K >= 1")
        cf.lambda_grid(self.grid)
        if not 0.0 < self.cover_frac <= 1.0:
            raise ValueError("cover_frac must lie in (0, 1]")
        if self.window < 1 or self.eval_episodes < 0:
            raise ValueError("window must be positive and eval_episodes non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        _check_keys("config", data, _TOP_KEYS)
        d = cls()
        return cls(
            seed=int(data.get("seed", d.seed)),
            dataset=DatasetSection.from_dict(data.get("dataset", {})),
            methods=tuple(data.get("methods", [m.value for m in d.methods])),
            alpha=float(data.get("alpha", d.alpha)),
            grid=int(data.get("grid", d.grid)),
            cover_frac=float(data.get("cover_frac", d.cover_frac)),
            agent=AgentConfig.from_dict(data.get("agent", {})),
            envs=EnvSection.from_dict(data.get("envs", {})),
            rewards=RewardParams(**data.get("rewards", {})),
            noise=NoiseConfig(**data.get("noise", {})),
            seeds=tuple(data.get("seeds", d.seeds)),
            window=int(data.get("window", d.window)),
            eval_episodes=int(data.get("eval_episodes", d.eval_episodes)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        try:
            return cls.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "methods": [m.value for m in self.methods],
            "alpha": self.alpha,
            "grid": self.grid,
            "cover_frac": self.cover_frac,
            "agent": self.agent.to_dict(),
            "envs": self.envs.to_dict(),
            "rewards": {"kappa": self.rewards.kappa, "beta": self.rewards.beta},
            "noise": {"sigma": self.noise.sigma, "p": self.noise.p, "enabled": self.noise.enabled},
            "seeds": list(self.seeds),
            "window": self.window,
            "eval_episodes": self.eval_episodes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- calibration and segmentation -------------------------------------------


def _inputs(manifest: DatasetManifest, split: Split, method: cf.Method, k: Optional[int] = None) -> list:
    if not method.uses_samples:
        return manifest.load_pairs(split)
    pairs = manifest.load_sample_pairs(split)
    if k is not None:
        if k < 1 or any(len(s) < k for s, _ in pairs):
            raise ValueError(f"requested K={k} but the manifest stores {manifest.k} samples per item")
        pairs = [(s[:k], t) for s, t in pairs]
    return pairs


def calibrate_from_manifest(manifest: DatasetManifest, method, alpha: Optional[float],
                            grid: int = cf.DEFAULT_GRID, k: Optional[int] = None) -> cf.CalibratedPredictor:
    """Fit one predictor on the CAL split (the F1-tuned comparators use CAL too)."""
    method = cf.Method(method)
    if not manifest.split(Split.CAL):
        raise ValueError("manifest has no CAL items")
    return cf.calibrate(method, _inputs(manifest, Split.CAL, method, k),
                        alpha=alpha if method.is_conformal else None, grid=grid)


def save_predictor(path, pred: cf.CalibratedPredictor) -> None:
    atomic_write_text(path, json.dumps(pred.to_record(), indent=2, sort_keys=True) + "\n")


def load_predictor(path) -> cf.CalibratedPredictor:
    path = Path(path)
    try:
        return cf.CalibratedPredictor.from_record(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise FileNotFoundError(f"predictor record not found: {path}") from None


SEGEVAL_FIELDS = ("image_id", "split", "method", "level", "precision", "coverage", "f1", "iou")
SEGSUMMARY_FIELDS = ("method", "level", "metric", "mean", "std", "n")
SEGEVAL_NOTE = ("undefined ratios (empty prediction or empty truth) are NaN and excluded from means; "
                "instance iou is not defined")


def segeval_rows(manifest: DatasetManifest, predictors: Sequence[cf.CalibratedPredictor],
                 cover_frac: float = 0.5) -> list[dict]:
    test = manifest.split(Split.TEST)
    if not test:
        raise ValueError("manifest has no TEST items")
    rows = []
    for pred in predictors:
        inputs = _inputs(manifest, Split.TEST, pred.method, pred.mc_samples if pred.method.uses_samples else None)
        for item, (x, truth) in zip(test, inputs):
            mask = cf.predict(pred, x)
            pm = pixel_metrics(mask, truth)
            im = instance_metrics(mask, truth, cover_frac)
            base = {"image_id": item.world_id, "split": Split.TEST.value, "method": pred.method.value}
            rows.append({**base, "level": "pixel", **pm.as_dict()})
            rows.append({**base, "level": "instance", "precision": im.precision, "coverage": im.coverage,
                         "f1": im.f1, "iou": im.iou})
    return rows


def segeval_summary(rows: Sequence[dict]) -> list[dict]:
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for method in methods:
        for level, names in (("pixel", PIXEL_FIELDS), ("instance", INSTANCE_FIELDS)):
            sel = [r for r in rows if r["method"] == method and r["level"] == level]
            for name in names:
                s = summarize(float(r[name]) for r in sel)
                out.append({"method": method, "level": level, "metric": name,
                            "mean": s.mean, "std": s.std, "n": s.n})
    return out


def write_segeval(out_dir, rows: Sequence[dict]) -> list[dict]:
    out_dir = Path(out_dir)
    summary = segeval_summary(rows)
    write_table(out_dir / "segeval_rows.csv", SEGEVAL_FIELDS, rows, [SEGEVAL_NOTE])
    write_table(out_dir / "segeval_summary.csv", SEGSUMMARY_FIELDS, summary, [SEGEVAL_NOTE])
    return summary


# -- navigation worlds -------------------------------------------------------


@dataclass(frozen=True)
class NavCase:
    """One navigation layout shared by every method: same terrain, start and goal."""

    world_id: str
    gt_mask: np.ndarray
    plans: dict
    start: PixelCoord
    goal: PixelCoord
    horizon: int

    def world(self, method: cf.Method) -> NavWorld:
        return NavWorld(self.gt_mask, self.plans[method], self.start, self.goal, self.horizon)


def build_cases(manifest: DatasetManifest, predictors: Sequence[cf.CalibratedPredictor],
                envs: EnvSection, seed: int) -> list[NavCase]:
    """Navigation layouts over the first ``envs.n_worlds`` TEST items.

    Start and goal avoid the union of every method's plan mask and the true
    hazards, so the methods are compared on identical, well-posed episodes.
    """
    test = manifest.split(Split.TEST)
    if len(test) < envs.n_worlds:
        raise ValueError(f"need {envs.n_worlds} TEST items for navigation, manifest has {len(test)}")
    per_method = {}
    for pred in predictors:
        k = pred.mc_samples if pred.method.uses_samples else None
        per_method[pred.method] = _inputs(manifest, Split.TEST, pred.method, k)[: envs.n_worlds]
    cases = []
    for i, item in enumerate(test[: envs.n_worlds]):
        gt = read_mask(manifest.resolve(item.mask_path))
        plans = {p.method: cf.predict(p, per_method[p.method][i][0]) for p in predictors}
        blocked = gt.copy()
        for mask in plans.values():
            blocked |= mask
        rng = np.random.default_rng(derive_seed(seed, _PLACEMENT, i))
        start, goal = sample_start_goal(blocked, rng, envs.min_separation)
        cases.append(NavCase(item.world_id, gt, plans, start, goal, envs.horizon))
    return cases


def write_world_files(out_dir, case: NavCase) -> dict:
    """World records (JSON) plus the plan masks they reference; returns paths by method."""
    out_dir = Path(out_dir)
    gt_rel = f"{case.world_id}_gt.txt"
    atomic_write_text(out_dir / gt_rel, format_mask(case.gt_mask))
    paths = {}
    for method, plan in case.plans.items():
        plan_rel = f"{case.world_id}_{method.value}_plan.txt"
        atomic_write_text(out_dir / plan_rel, format_mask(plan))
        record = {"schema_version": 1, "world_id": case.world_id, "method": method.value,
                  "gt_mask_path": gt_rel, "plan_mask_path": plan_rel,
                  "start": list(case.start), "goal": list(case.goal), "horizon": case.horizon}
        path = out_dir / f"{case.world_id}_{method.value}.json"
        atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")
        paths[method] = path
    return paths


def load_world_file(path) -> NavWorld:
    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"world file not found: {path}") from None
    root = path.parent
    return NavWorld(read_mask(root / rec["gt_mask_path"]), read_mask(root / rec["plan_mask_path"]),
                    tuple(rec["start"]), tuple(rec["goal"]), rec["horizon"])


# -- training jobs -----------------------------------------------------------


@dataclass(frozen=True)
class TrainJob:
    world_id: str
    method: cf.Method
    seed: int
    world: NavWorld
    rewards: RewardParams
    noise: NoiseConfig
    agent: AgentConfig
    window: int
    eval_episodes: int


@dataclass
class TrainResult:
    job: TrainJob
    curves: list
    final: CurveRecord
    evaluation: Optional[EvalSummary]
    trajectory: list
    qtable: str


def run_job(job: TrainJob) -> TrainResult:
    make_env = partial(NavEnv, job.world, job.rewards, job.noise, job.seed)
    table, curves = train(make_env, replace(job.agent, seed=job.seed), window=job.window)
    final = final_window(curves)
    trajectory: list = []
    evaluation = None
    if job.eval_episodes:
        evaluation = evaluate(table, make_env, job.eval_episodes, greedy=True, seed=job.seed, log=trajectory)
    return TrainResult(job, curves, final, evaluation, trajectory, table.dumps())


def make_jobs(cases: Sequence[NavCase], methods: Sequence[cf.Method], cfg: ExperimentConfig) -> list[TrainJob]:
    jobs = []
    for case in cases:
        for method in methods:
            for seed in cfg.seeds:
                jobs.append(TrainJob(case.world_id, method, seed, case.world(method), cfg.rewards,
                                     cfg.noise, cfg.agent, cfg.window, cfg.eval_episodes))
    return jobs


def run_jobs(jobs: Sequence[TrainJob], n_jobs: int = 1) -> list[TrainResult]:
    """Results come back in job order regardless of the worker count."""
    if n_jobs <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
        return list(pool.map(run_job, jobs))


CURVE_FIELDS = ("world_id", "method", "seed", "step", "episode", "metric", "value")
RUN_FIELDS = ("world_id", "method", "seed", "step", "episode", *CURVE_METRICS,
              "eval_success_rate", "eval_unseen_states")
SUMMARY_FIELDS = ("method", "runs", *(f"{m}_{s}" for m in CURVE_METRICS for s in ("mean", "std")))


def curve_rows(result: TrainResult) -> list[dict]:
    rows = []
    for rec in result.curves:
        for metric in CURVE_METRICS:
            rows.append({"world_id": result.job.world_id, "method": result.job.method.value,
                         "seed": result.job.seed, "step": rec.step, "episode": rec.episode,
                         "metric": metric, "value": float(getattr(rec, metric))})
    return rows


def run_row(result: TrainResult) -> dict:
    f, ev = result.final, result.evaluation
    row = {"world_id": result.job.world_id, "method": result.job.method.value, "seed": result.job.seed,
           "step": f.step, "episode": f.episode}
    row.update({m: float(getattr(f, m)) for m in CURVE_METRICS})
    row["eval_success_rate"] = float(ev.success_rate) if ev else math.nan
    row["eval_unseen_states"] = ev.unseen_states if ev else 0
    return row


def summary_rows(runs: Sequence[dict], methods: Sequence[str]) -> list[dict]:
    """Final-window metrics pooled over every (world, seed) run of each method."""
    out = []
    for method in methods:
        sel = [r for r in runs if r["method"] == method]
        row = {"method": method, "runs": len(sel)}
        for m in CURVE_METRICS:
            s = summarize(float(r[m]) for r in sel)
            row[f"{m}_mean"], row[f"{m}_std"] = s.mean, s.std
        out.append(row)
    return out


def write_training_outputs(out_dir, results: Sequence[TrainResult]) -> list[dict]:
    """Curves (one file per method and seed), trajectories, Q-tables and the runs table."""
    out_dir = Path(out_dir)
    by_file: dict = {}
    for res in results:
        key = (res.job.method.value, res.job.seed)
        by_file.setdefault(key, []).extend(curve_rows(res))
        stem = f"{res.job.method.value}_{res.job.world_id}_seed{res.job.seed}"
        if res.trajectory:
            write_table(out_dir / "trajectories" / f"{stem}.csv", TRAJECTORY_FIELDS, res.trajectory)
        atomic_write_text(out_dir / "qtables" / f"{stem}.tsv", res.qtable)
    for (method, seed), rows in by_file.items():
        write_table(out_dir / "curves" / f"{method}_seed{seed}.csv", CURVE_FIELDS, rows)
    runs = [run_row(r) for r in results]
    write_table(out_dir / "runs.csv", RUN_FIELDS, runs)
    return runs


def read_runs(path) -> list[dict]:
    return read_numeric_table(path, text_fields=("world_id", "method"))


def read_summary(path) -> list[dict]:
    return read_numeric_table(path, text_fields=("method",))


# -- the whole protocol ------------------------------------------------------


@dataclass
class ExperimentResult:
    out_dir: Path
    predictors: dict
    segeval: list
    runs: list
    summary: list


def _promote(tmp: Path, out: Path) -> None:
    old = out.with_name(f".{out.name}.old")
    if old.exists():
        shutil.rmtree(old)
    if out.exists():
        os.replace(out, old)
    os.replace(tmp, out)
    if old.exists():
        shutil.rmtree(old)


def _stage(name: str, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, out_dir, n_jobs: int = 1) -> ExperimentResult:
    """gen, calibrate, segeval, train, summarize; the directory appears only on success."""
    out_dir = Path(out_dir)
    tmp = out_dir.with_name(f".{out_dir.name}.partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        atomic_write_text(tmp / "config.json", cfg.dumps())
        ds = cfg.dataset
        manifest = _stage("gen", build_dataset, ds.world, ds.scorer, ds.counts, ds.k, cfg.seed, tmp / "dataset")

        def _calibrate():
            preds = {}
            for m in cfg.methods:
                preds[m] = calibrate_from_manifest(manifest, m, cfg.alpha, cfg.grid)
                save_predictor(tmp / "predictors" / f"{m.value}.json", preds[m])
            return preds

        predictors = _stage("calibrate", _calibrate)
        rows = _stage("segeval", segeval_rows, manifest, list(predictors.values()), cfg.cover_frac)
        segsum = _stage("segeval", write_segeval, tmp, rows)

        def _worlds():
            cases = build_cases(manifest, list(predictors.values()), cfg.envs, cfg.seed)
            for case in cases:
                write_world_files(tmp / "worlds", case)
            return cases

        cases = _stage("worlds", _worlds)
        results = _stage("train", run_jobs, make_jobs(cases, cfg.methods, cfg), n_jobs)
        runs = _stage("train", write_training_outputs, tmp, results)
        summary = summary_rows(runs, [m.value for m in cfg.methods])
        _stage("summary", write_table, tmp / "summary.csv", SUMMARY_FIELDS, summary)
        _stage("report", atomic_write_text, tmp / "report.txt", format_report(segsum, summary))
        _promote(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return ExperimentResult(out_dir, predictors, segsum, runs, summary)


def _pm(mean: float, std: float, scale: float = 1.0) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


_LEVEL_TAG = {"pixel": "px", "instance": "inst"}


def format_report(segsum: Sequence[dict], summary: Sequence[dict]) -> str:
    """Human-readable tables: segmentation metrics in percent, navigation final windows."""
    lines = []
    if segsum:
        cols = [("pixel", m) for m in PIXEL_FIELDS] + [("instance", m) for m in INSTANCE_FIELDS]
        lines.append("Segmentation on TEST (percent, mean ± std)")
        lines.append("method    " + "".join(f"{_LEVEL_TAG[lvl] + '.' + m:<17}" for lvl, m in cols))
        methods = list(dict.fromkeys(r["method"] for r in segsum))
        for method in methods:
            cells = []
            for lvl, m in cols:
                r = next(r for r in segsum if r["method"] == method and r["level"] == lvl and r["metric"] == m)
                cells.append(f"{_pm(float(r['mean']), float(r['std']), 100.0):<17}")
            lines.append(f"{method:<10}" + "".join(cells))
        lines.append("")
    if summary:
        lines.append("Navigation, final training window (mean ± std over runs)")
        lines.append(f"{'method':<10}{'runs':<6}" + "".join(f"{m:<26}" for m in CURVE_METRICS))
        for row in summary:
            cells = "".join(f"{_pm(float(row[m + '_mean']), float(row[m + '_std'])):<26}" for m in CURVE_METRICS)
            lines.append(f"{row['method']:<10}{row['runs']:<6}" + cells)
    return "\n".join(lines) + "\n"
