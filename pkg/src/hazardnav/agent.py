"""Tabular Q-learning over a quantized vector-view observation."""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

from .env import NavEnv, Observation
from .synth import atomic_write_text, derive_seed

StateKey = tuple[int, ...]

# upper edges of the distance buckets {0, 1, 2, 3-4, 5-8, >=9}
_BUCKET_EDGES = (0, 1, 2, 4, 8)
N_BUCKETS = len(_BUCKET_EDGES) + 1
MAX_KEYS = 3 * N_BUCKETS * 3 * N_BUCKETS * N_BUCKETS * 2 * 16


def _round(x: float) -> int:
    return math.floor(x + 0.5)


def bucket(n: int) -> int:
    for i, edge in enumerate(_BUCKET_EDGES):
        if n <= edge:
            return i
    return N_BUCKETS - 1


def _sign(n: int) -> int:
    return (n > 0) - (n < 0)


def quantize(obs: Observation) -> StateKey:
    """``(sign dr, bucket |dr|, sign dc, bucket |dc|, bucket rim, inside, legal x4)``.

    Noisy real-valued entries are rounded to the nearest integer first;
    negative rim distances (possible under noise) fall into bucket 0.
    """
    dr, dc, rim = _round(obs.d_row), _round(obs.d_col), _round(obs.rim_dist)
    return (_sign(dr), bucket(abs(dr)), _sign(dc), bucket(abs(dc)), bucket(max(rim, 0)),
            int(obs.inside), *obs.legal)


@dataclass(frozen=True)
class AgentConfig:
    total_steps: int = 200_000
    max_episode: int = 1000
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_frac: float = 0.75
    lr_start: float = 0.5
    lr_end: float = 0.01
    lr_frac: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.max_episode < 1:
            raise ValueError("total_steps and max_episode must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("epsilon_frac", "lr_frac"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 1.0 >= self.epsilon_start >= self.epsilon_end >= 0.0:
            raise ValueError("epsilon schedule must be non-increasing within [0, 1]")
        if not self.lr_start >= self.lr_end > 0.0:
            raise ValueError("learning-rate schedule must be non-increasing and positive")

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def _linear(self, step: int, start: float, end: float, frac: float) -> float:
        span = frac * self.total_steps
        if step >= span:
            return end
        return start + (end - start) * (step / span)

    def epsilon_at(self, step: int) -> float:
        return self._linear(step, self.epsilon_start, self.epsilon_end, self.epsilon_frac)

    def lr_at(self, step: int) -> float:
        return self._linear(step, self.lr_start, self.lr_end, self.lr_frac)


class QTable:
    """Action values per state key, zero for keys never updated."""

    def __init__(self, values: Optional[dict] = None):
        self.values: dict[StateKey, list[float]] = values if values is not None else {}

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, key) -> bool:
        return key in self.values

    def row(self, key: StateKey) -> list[float]:
        row = self.values.get(key)
        if row is None:
            row = self.values[key] = [0.0, 0.0, 0.0, 0.0]
        return row

    def max_abs(self) -> float:
        return max((abs(v) for row in self.values.values() for v in row), default=0.0)

    def dumps(self) -> str:
        lines = ["# schema_version: 1", "state\tq_up\tq_right\tq_down\tq_left"]
        for key in sorted(self.values):
            vals = "\t".join(repr(v) for v in self.values[key])
            lines.append(",".join(str(k) for k in key) + "\t" + vals)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "QTable":
        values = {}
        for line in text.splitlines():
            if not line or line.startswith("#") or line.startswith("state"):
                continue
            key, *vals = line.split("\t")
            values[tuple(int(k) for k in key.split(","))] = [float(v) for v in vals]
        return cls(values)

    @classmethod
    def load(cls, path) -> "QTable":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _greedy(row: list[float], rng: random.Random) -> int:
    best = max(row)
    ties = [a for a in range(4) if row[a] == best]
    return ties[0] if len(ties) == 1 else ties[rng.randrange(len(ties))]


@dataclass(frozen=True)
class CurveRecord:
    step: int
    episode: int
    mean_episodic_reward: float
    success_rate: float
    mean_gt_rim_dist: float
    frac_time_in_gt_hazard: float
    mean_episode_length: float


CURVE_METRICS = ("mean_episodic_reward", "success_rate", "mean_gt_rim_dist",
                 "frac_time_in_gt_hazard", "mean_episode_length")


@dataclass
class EpisodeStats:
    reward: float = 0.0
    length: int = 0
    success: bool = False
    gt_steps: int = 0
    rim_sum: int = 0


def window_record(step: int, episode: int, episodes: list[EpisodeStats]) -> CurveRecord:
    """Aggregate episodes: rewards and success per episode, safety per step."""
    n = len(episodes)
    total_steps = sum(e.length for e in episodes)
    return CurveRecord(
        step=step,
        episode=episode,
        mean_episodic_reward=math.fsum(e.reward for e in episodes) / n,
        success_rate=sum(e.success for e in episodes) / n,
        mean_gt_rim_dist=sum(e.rim_sum for e in episodes) / total_steps,
        frac_time_in_gt_hazard=sum(e.gt_steps for e in episodes) / total_steps,
        mean_episode_length=total_steps / n,
    )


def train(make_env: Callable[[], NavEnv], cfg: AgentConfig, window: int = 25,
          check_bounds: bool = False) -> tuple[QTable, list[CurveRecord]]:
    """One-step Q-learning with linear epsilon and learning-rate schedules.

    Only goal arrival is terminal; hitting the horizon or the per-episode cap
    still bootstraps from the next state. A curve record is emitted after
    every ``window`` completed episodes.
    """
    env = make_env()
    rng = random.Random(cfg.seed)
    table = QTable()
    gamma = cfg.gamma
    bound = None
    if check_bounds:
        lo, hi = env.rewards.bounds
        bound = max(abs(lo), abs(hi)) / (1.0 - gamma)

    curves: list[CurveRecord] = []
    pending: list[EpisodeStats] = []
    step = episode = 0
    while step < cfg.total_steps:
        obs = env.reset(seed=derive_seed(cfg.seed, episode))
        s = table.row(quantize(obs))
        stats = EpisodeStats()
        finished = False
        for _ in range(cfg.max_episode):
            if step >= cfg.total_steps:
                break
            if rng.random() < cfg.epsilon_at(step):
                a = rng.randrange(4)
            else:
                a = _greedy(s, rng)
            obs, reward, done, info = env.step(a)
            s_next = table.row(quantize(obs))
            target = reward if info["success"] else reward + gamma * max(s_next)
            s[a] += cfg.lr_at(step) * (target - s[a])
            if bound is not None and abs(s[a]) > bound + 1e-9:
                raise AssertionError(f"Q-value {s[a]} exceeds bound {bound}")
            step += 1
            stats.reward += reward
            stats.length += 1
            stats.gt_steps += info["in_gt_hazard"]
            stats.rim_sum += info["gt_rim_dist"]
            s = s_next
            if done:
                stats.success = info["success"]
                finished = True
                break
        else:
            finished = True
        if not finished:
            break
        episode += 1
        pending.append(stats)
        if len(pending) == window:
            curves.append(window_record(step, episode, pending))
            pending = []
    return table, curves


@dataclass(frozen=True)
class EvalSummary:
    episodes: int
    mean_episodic_reward: float
    success_rate: float
    mean_gt_rim_dist: float
    frac_time_in_gt_hazard: float
    mean_episode_length: float
    unseen_states: int


TRAJECTORY_FIELDS = ("episode", "t", "row", "col", "action", "reward", "in_plan_hazard",
                     "in_gt_hazard", "gt_rim_dist", "obs_d_row", "obs_d_col", "obs_rim_dist")


def evaluate(table: QTable, make_env: Callable[[], NavEnv], episodes: int, greedy: bool = True,
             seed: int = 0, epsilon: float = 0.05, log: Optional[list] = None) -> EvalSummary:
    """Roll out the learned policy without updating it.

    States absent from the table get a uniformly random action. When
    ``log`` is a list, one dict per step (``TRAJECTORY_FIELDS``) is appended.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    env = make_env()
    rng = random.Random(seed)
    eps = 0.0 if greedy else epsilon
    unseen = 0
    all_stats = []
    for ep in range(episodes):
        obs = env.reset(seed=derive_seed(seed, 1, ep))
        stats = EpisodeStats()
        while True:
            key = quantize(obs)
            row = table.values.get(key)
            if row is None:
                unseen += 1
                a = rng.randrange(4)
            elif eps > 0 and rng.random() < eps:
                a = rng.randrange(4)
            else:
                a = _greedy(row, rng)
            obs, reward, done, info = env.step(a)
            stats.reward += reward
            stats.length += 1
            stats.gt_steps += info["in_gt_hazard"]
            stats.rim_sum += info["gt_rim_dist"]
            if log is not None:
                pose = info["pose"]
                log.append({
                    "episode": ep, "t": info["t"], "row": pose.row, "col": pose.col, "action": a,
                    "reward": reward, "in_plan_hazard": int(info["in_plan_hazard"]),
                    "in_gt_hazard": int(info["in_gt_hazard"]), "gt_rim_dist": info["gt_rim_dist"],
                    "obs_d_row": obs.d_row, "obs_d_col": obs.d_col, "obs_rim_dist": obs.rim_dist,
                })
            if done:
                stats.success = info["success"]
                break
        all_stats.append(stats)
    rec = window_record(0, episodes, all_stats)
    return EvalSummary(episodes, rec.mean_episodic_reward, rec.success_rate, rec.mean_gt_rim_dist,
                       rec.frac_time_in_gt_hazard, rec.mean_episode_length, unseen)


def final_window(curves: Iterable[CurveRecord]) -> CurveRecord:
    curves = list(curves)
    if not curves:
        raise ValueError("training produced no complete evaluation window")
    return curves[-1]
