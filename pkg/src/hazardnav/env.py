"""Lattice navigation MDP over a calibrated hazard mask.

The agent moves in the four cardinal directions. Reward comes from the
planning mask alone; the ground-truth mask is only consulted to report
safety statistics in ``info``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .hazardmap import PixelCoord, as_mask, d_max, manhattan_distance_field


class WorldError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    """``step`` was called on a finished episode."""


class Action(enum.IntEnum):
    UP = 0
    RIGHT = 1
    DOWN = 2
    LEFT = 3


DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
DEFAULT_HORIZON = 1000


class Observation(NamedTuple):
    d_row: float
    d_col: float
    rim_dist: float
    inside: int
    legal: tuple[int, int, int, int]

    @property
    def goal_distance(self) -> float:
        return abs(self.d_row) + abs(self.d_col)


@dataclass(frozen=True)
class RewardParams:
    kappa: float = 0.05
    beta: float = 50.0

    def __post_init__(self):
        if self.kappa < 0 or self.beta < 0:
            raise ValueError("kappa and beta must be non-negative")

    @property
    def bounds(self) -> tuple[float, float]:
        return -1.0 - self.kappa, 1.0 - self.kappa + self.beta


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 1.0
    p: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("noise probability p must lie in [0, 1]")


@dataclass(frozen=True)
class NavWorld:
    gt_mask: np.ndarray
    plan_mask: np.ndarray
    start: PixelCoord
    goal: PixelCoord
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        gt, plan = as_mask(self.gt_mask), as_mask(self.plan_mask)
        if gt.shape != plan.shape:
            raise WorldError(f"gt mask {gt.shape} and plan mask {plan.shape} differ in shape")
        object.__setattr__(self, "gt_mask", gt)
        object.__setattr__(self, "plan_mask", plan)
        h, w = gt.shape
        start, goal = PixelCoord(*map(int, self.start)), PixelCoord(*map(int, self.goal))
        for name, q in (("start", start), ("goal", goal)):
            if not (0 <= q.row < h and 0 <= q.col < w):
                raise WorldError(f"{name} {tuple(q)} lies off the {h}x{w} lattice")
            if plan[q]:
                raise WorldError(f"{name} {tuple(q)} lies inside the planning mask")
        if start == goal:
            raise WorldError("start and goal coincide")
        if int(self.horizon) < 1:
            raise WorldError("horizon must be positive")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_mask.shape


def noise_bounds(shape: tuple[int, int], sigma: float) -> tuple[tuple[float, float], ...]:
    """Clip ranges for (d_row, d_col, rim_dist): nominal bounds widened by 3 sigma."""
    h, w = shape
    pad = 3.0 * sigma
    return (
        (-(h - 1) - pad, (h - 1) + pad),
        (-(w - 1) - pad, (w - 1) + pad),
        (0.0 - pad, d_max(shape) + pad),
    )


def inject_noise(obs: Observation, cfg: NoiseConfig, rng: np.random.Generator,
                 shape: tuple[int, int]) -> Observation:
    """Perturb the distance entries with clipped Gaussian noise.

    The goal distance is not stored separately: it is recomputed from the
    perturbed offset pair. Inside and legality flags are left untouched.
    """
    if cfg.sigma == 0 or cfg.p == 0:
        return obs
    if cfg.p < 1.0 and rng.random() >= cfg.p:
        return obs
    eps = rng.normal(0.0, cfg.sigma, size=3)
    (lr, hr), (lc, hc), (lm, hm) = noise_bounds(shape, cfg.sigma)
    return Observation(
        min(max(obs.d_row + eps[0], lr), hr),
        min(max(obs.d_col + eps[1], lc), hc),
        min(max(obs.rim_dist + eps[2], lm), hm),
        obs.inside,
        obs.legal,
    )


def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


class NavEnv:
    """Single-threaded episode state over one ``NavWorld``."""

    def __init__(self, world: NavWorld, rewards: RewardParams = RewardParams(),
                 noise: Optional[NoiseConfig] = None, seed: int = 0):
        self.world = world
        self.rewards = rewards
        self.noise = noise if noise is not None and noise.enabled else None
        self.height, self.width = world.shape
        plan, gt = world.plan_mask, world.gt_mask
        self._plan = plan.tolist()
        self._gt = gt.tolist()
        self._plan_rim = manhattan_distance_field(plan).tolist()
        self._gt_rim = manhattan_distance_field(gt).tolist()
        self._legal = [[self._legal_flags(r, c) for c in range(self.width)] for r in range(self.height)]
        self._seed = seed
        self._rng = np.random.default_rng(seed)
        self.pose: PixelCoord = world.start
        self.t = 0
        self.done = True

    def _legal_flags(self, r: int, c: int) -> tuple[int, int, int, int]:
        flags = []
        for dr, dc in DELTAS:
            nr, nc = r + dr, c + dc
            ok = 0 <= nr < self.height and 0 <= nc < self.width and not self._plan[nr][nc]
            flags.append(int(ok))
        return tuple(flags)

    def observe(self, q) -> Observation:
        r, c = q
        g = self.world.goal
        return Observation(g.row - r, g.col - c, self._plan_rim[r][c], int(self._plan[r][c]), self._legal[r][c])

    def _emit(self, q) -> Observation:
        obs = self.observe(q)
        if self.noise is not None:
            obs = inject_noise(obs, self.noise, self._rng, (self.height, self.width))
        return obs

    def reset(self, seed: Optional[int] = None) -> Observation:
        if seed is not None:
            self._seed = seed
        self._rng = np.random.default_rng(self._seed)
        self.pose = self.world.start
        self.t = 0
        self.done = False
        return self._emit(self.pose)

    def goal_distance(self, q) -> int:
        g = self.world.goal
        return abs(q[0] - g.row) + abs(q[1] - g.col)

    def step(self, action: int):
        if self.done:
            raise EpisodeDone("episode finished; call reset() first")
        a = int(action)
        if not 0 <= a < 4:
            raise ValueError(f"invalid action {action!r}")
        r, c = self.pose
        dr, dc = DELTAS[a]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.height and 0 <= nc < self.width):
            nr, nc = r, c
        self.t += 1
        new = PixelCoord(nr, nc)
        at_goal = new == self.world.goal
        in_plan = self._plan[nr][nc]
        if in_plan:
            reward = -1.0 - self.rewards.kappa
        else:
            reward = float(_sgn(self.goal_distance(self.pose) - self.goal_distance(new))) - self.rewards.kappa
            if at_goal:
                reward += self.rewards.beta
        self.pose = new
        truncated = self.t >= self.world.horizon and not at_goal
        self.done = at_goal or self.t >= self.world.horizon
        info = {
            "t": self.t,
            "pose": new,
            "in_plan_hazard": bool(in_plan),
            "in_gt_hazard": bool(self._gt[nr][nc]),
            "gt_rim_dist": self._gt_rim[nr][nc],
            "success": at_goal,
            "truncated": truncated,
        }
        return self._emit(new), reward, self.done, info


def sample_start_goal(blocked: np.ndarray, rng: np.random.Generator,
                      min_separation: Optional[int] = None, max_tries: int = 10_000) -> tuple[PixelCoord, PixelCoord]:
    """Uniform start/goal pair outside ``blocked`` with Manhattan separation at least ``min_separation``."""
    blocked = as_mask(blocked)
    h, w = blocked.shape
    if min_separation is None:
        min_separation = math.ceil(max(h, w) / 2)
    free = np.argwhere(~blocked)
    if len(free) < 2:
        raise WorldError("fewer than two free cells for start and goal")
    for _ in range(max_tries):
        i, j = rng.integers(len(free), size=2)
        a, b = free[i], free[j]
        if abs(int(a[0]) - int(b[0])) + abs(int(a[1]) - int(b[1])) >= min_separation:
            return PixelCoord(int(a[0]), int(a[1])), PixelCoord(int(b[0]), int(b[1]))
    raise WorldError(f"no start/goal pair with separation >= {min_separation} found")
