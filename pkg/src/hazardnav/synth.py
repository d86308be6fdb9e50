"""Seeded hazard worlds and an imperfect stand-in segmentation scorer.

Every generator is a pure function of its config and an integer seed.
Sub-streams are derived with ``numpy.random.SeedSequence`` spawn keys, so
adding items to a dataset never changes the items already in it.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .hazardmap import (
    GridFormatError,
    PathLike,
    format_mask,
    format_score_map,
    read_mask,
    read_score_map,
    signed_boundary_distance,
)

SCHEMA_VERSION = 1

# spawn-key stream ids
_WORLD, _SCORE, _MC, _ITEM = 1, 2, 3, 4


class GenerationError(RuntimeError):
    pass


class HazardKind(str, enum.Enum):
    CRATERS = "CRATERS"
    WATERBODY = "WATERBODY"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    CAL = "CAL"
    TEST = "TEST"


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=stream))


def derive_seed(seed: int, *stream: int) -> int:
    """A 63-bit child seed for ``(seed, stream...)``."""
    words = np.random.SeedSequence(int(seed), spawn_key=stream).generate_state(2, np.uint32)
    return (int(words[0]) << 31) ^ int(words[1])


def _interval(value, name: str, kind=int) -> tuple:
    lo, hi = (kind(v) for v in value)
    if lo > hi:
        raise ValueError(f"{name}: empty interval [{lo}, {hi}]")
    return lo, hi


@dataclass(frozen=True)
class WorldConfig:
    height: int = 32
    width: int = 32
    hazard_kind: HazardKind = HazardKind.CRATERS
    n_blobs_range: tuple[int, int] = (5, 10)
    blob_radius_range: tuple[int, int] = (2, 5)
    target_hazard_frac_range: tuple[float, float] = (0.08, 0.35)
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "hazard_kind", HazardKind(self.hazard_kind))
        if self.height <= 0 or self.width <= 0:
            raise ValueError("world dimensions must be positive")
        nb = _interval(self.n_blobs_range, "n_blobs_range")
        rr = _interval(self.blob_radius_range, "blob_radius_range")
        fr = _interval(self.target_hazard_frac_range, "target_hazard_frac_range", float)
        if nb[0] < 1:
            raise ValueError("n_blobs_range must start at 1 or more")
        if rr[0] < 1 or rr[1] > max(self.height, self.width):
            raise ValueError("blob_radius_range must lie within the lattice")
        if not 0.0 < fr[0] <= fr[1] < 1.0:
            raise ValueError("target_hazard_frac_range must lie inside (0, 1)")
        object.__setattr__(self, "n_blobs_range", nb)
        object.__setattr__(self, "blob_radius_range", rr)
        object.__setattr__(self, "target_hazard_frac_range", fr)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hazard_kind"] = self.hazard_kind.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class ScorerConfig:
    boundary_softness: float = 1.0
    noise_sigma: float = 0.5
    miss_bias: float = -1.5
    mc_jitter_sigma: float = 1.0

    def __post_init__(self):
        if not self.boundary_softness > 0:
            raise ValueError("boundary_softness must be positive")
        if self.noise_sigma < 0 or self.mc_jitter_sigma < 0:
            raise ValueError("noise levels must be non-negative")

    @classmethod
    def default_for(cls, kind: HazardKind | str) -> "ScorerConfig":
        if HazardKind(kind) is HazardKind.WATERBODY:
            return cls(miss_bias=-0.25)
        return cls()

    @classmethod
    def from_dict(cls, data: dict) -> "ScorerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scorer config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -- worlds ---------------------------------------------------------------


def _disk(shape: tuple[int, int], cy: float, cx: float, radius: float) -> np.ndarray:
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius


def _craters(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    shape = (cfg.height, cfg.width)
    mask = np.zeros(shape, dtype=bool)
    n = rng.integers(cfg.n_blobs_range[0], cfg.n_blobs_range[1] + 1)
    for _ in range(n):
        radius = rng.integers(cfg.blob_radius_range[0], cfg.blob_radius_range[1] + 1)
        cy = rng.uniform(0, cfg.height - 1)
        cx = rng.uniform(0, cfg.width - 1)
        mask |= _disk(shape, cy, cx, radius)
    return mask


_STEPS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])


def _waterbody(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """One blob grown by a random walk stamping disks of a fixed brush radius."""
    shape = (cfg.height, cfg.width)
    mask = np.zeros(shape, dtype=bool)
    lo, hi = cfg.target_hazard_frac_range
    target = rng.uniform(lo, hi) * mask.size
    radius = rng.integers(cfg.blob_radius_range[0], cfg.blob_radius_range[1] + 1)
    pos = np.array([rng.integers(0, cfg.height), rng.integers(0, cfg.width)])
    for _ in range(50 * mask.size):
        mask |= _disk(shape, pos[0], pos[1], radius)
        if mask.sum() >= target:
            break
        pos = np.clip(pos + _STEPS[rng.integers(4)], 0, [cfg.height - 1, cfg.width - 1])
    return mask


def gen_world(cfg: WorldConfig, seed: int) -> np.ndarray:
    """Ground-truth hazard mask whose hazard fraction lies in the configured range."""
    rng = _rng(seed, _WORLD)
    lo, hi = cfg.target_hazard_frac_range
    build = _craters if cfg.hazard_kind is HazardKind.CRATERS else _waterbody
    for _ in range(cfg.max_retries):
        mask = build(cfg, rng)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise GenerationError(
        f"no {cfg.hazard_kind.value} world with hazard fraction in [{lo}, {hi}] "
        f"after {cfg.max_retries} attempts (seed={seed})"
    )


# -- scorer ----------------------------------------------------------------


def score_logits(mask: np.ndarray, scfg: ScorerConfig, seed: int) -> np.ndarray:
    rng = _rng(seed, _SCORE)
    signed = signed_boundary_distance(mask).astype(np.float64)
    noise = rng.normal(0.0, scfg.noise_sigma, size=mask.shape)
    return signed / scfg.boundary_softness + scfg.miss_bias + noise


def score_world(mask: np.ndarray, scfg: ScorerConfig, seed: int) -> np.ndarray:
    """Logistic of the signed boundary distance plus bias and per-pixel logit noise."""
    return expit(score_logits(mask, scfg, seed))


def mc_samples(mask: np.ndarray, scfg: ScorerConfig, k: int, seed: int) -> list[np.ndarray]:
    """K sampled score maps: the ``score_world`` logit plus independent per-pixel jitter."""
    if k < 1:
        raise ValueError("need at least one MC sample")
    base = score_logits(mask, scfg, seed)
    out = []
    for i in range(k):
        jitter = _rng(seed, _MC, i).normal(0.0, scfg.mc_jitter_sigma, size=mask.shape)
        out.append(expit(base + jitter))
    return out


# -- datasets --------------------------------------------------------------


@dataclass
class Item:
    world_id: str
    split: Split
    seed: int
    mask: np.ndarray
    scores: np.ndarray
    samples: list[np.ndarray]


_SPLIT_CODE = {Split.TRAIN: 0, Split.CAL: 1, Split.TEST: 2}


def generate_items(
    cfg: WorldConfig,
    scfg: ScorerConfig,
    counts: dict,
    k: int,
    seed: int,
) -> list[Item]:
    """In-memory dataset: ``counts[split]`` i.i.d. worlds per split, TRAIN first."""
    items = []
    for split in Split:
        n = int(counts.get(split.value, counts.get(split.value.lower(), 0)))
        if n < 0:
            raise ValueError(f"negative count for split {split.value}")
        for i in range(n):
            item_seed = derive_seed(seed, _ITEM, _SPLIT_CODE[split], i)
            mask = gen_world(cfg, item_seed)
            items.append(Item(
                world_id=f"{split.value.lower()}_{i:04d}",
                split=split,
                seed=item_seed,
                mask=mask,
                scores=score_world(mask, scfg, item_seed),
                samples=mc_samples(mask, scfg, k, item_seed) if k > 0 else [],
            ))
    if not any(it.split is Split.CAL for it in items) or not any(it.split is Split.TEST for it in items):
        raise ValueError("datasets need at least one CAL and one TEST item")
    return items


@dataclass
class ManifestItem:
    world_id: str
    split: Split
    score_path: str
    mask_path: str
    mc_paths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "world_id": self.world_id,
            "split": self.split.value,
            "score_path": self.score_path,
            "mask_path": self.mask_path,
            "mc_paths": list(self.mc_paths),
        }


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    seed: Optional[int] = None
    k: int = 0
    root: Path = Path(".")
    world_config: Optional[dict] = None
    scorer_config: Optional[dict] = None

    def __post_init__(self):
        ids = [it.world_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("world ids must be unique across splits")

    def split(self, split: Split | str) -> list[ManifestItem]:
        split = Split(split)
        return [it for it in self.items if it.split is split]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_pairs(self, split: Split | str) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(read_score_map(self.resolve(it.score_path)), read_mask(self.resolve(it.mask_path)))
                for it in self.split(split)]

    def load_sample_pairs(self, split: Split | str) -> list[tuple[list[np.ndarray], np.ndarray]]:
        out = []
        for it in self.split(split):
            if not it.mc_paths:
                raise ValueError(f"item {it.world_id} has no MC sample files")
            out.append(([read_score_map(self.resolve(p)) for p in it.mc_paths],
                        read_mask(self.resolve(it.mask_path))))
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "K": self.k,
            "world_config": self.world_config,
            "scorer_config": self.scorer_config,
            "items": [it.to_dict() for it in self.items],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: PathLike) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: cannot read manifest: {exc}") from exc
        items = [ManifestItem(d["world_id"], Split(d["split"]), d["score_path"], d["mask_path"],
                              list(d.get("mc_paths", []))) for d in data["items"]]
        return cls(items, seed=data.get("seed"), k=int(data.get("K", 0)), root=path.parent,
                   world_config=data.get("world_config"), scorer_config=data.get("scorer_config"))


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write via a sibling temporary file and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"{path}: write failed: {exc}") from exc


def build_dataset(
    cfg: WorldConfig,
    scfg: ScorerConfig,
    counts: dict,
    k: int,
    seed: int,
    out_dir: PathLike,
) -> DatasetManifest:
    """Materialize score, mask and MC-sample files plus ``manifest.json``."""
    out_dir = Path(out_dir)
    for split in Split:
        if int(counts.get(split.value, counts.get(split.value.lower(), 0))) < 0:
            raise ValueError("split counts must be non-negative")
    entries = []
    for item in generate_items(cfg, scfg, counts, k, seed):
        stem = f"data/{item.world_id}"
        atomic_write_text(out_dir / f"{stem}_mask.txt", format_mask(item.mask))
        atomic_write_text(out_dir / f"{stem}_scores.txt", format_score_map(item.scores))
        mc_paths = []
        for j, sample in enumerate(item.samples):
            rel = f"{stem}_mc{j:02d}.txt"
            atomic_write_text(out_dir / rel, format_score_map(sample))
            mc_paths.append(rel)
        entries.append(ManifestItem(item.world_id, item.split, f"{stem}_scores.txt",
                                    f"{stem}_mask.txt", mc_paths))
    manifest = DatasetManifest(entries, seed=int(seed), k=int(k), root=out_dir,
                               world_config=cfg.to_dict(), scorer_config=scfg.to_dict())
    manifest.save(out_dir / "manifest.json")
    return manifest


def import_external(
    score_files: Sequence[PathLike],
    mask_files: Sequence[PathLike],
    split_tags: Sequence[str],
    mc_files: Optional[Sequence[Sequence[PathLike]]] = None,
) -> DatasetManifest:
    """Manifest over externally produced score maps, referencing the files as-is."""
    if not len(score_files) == len(mask_files) == len(split_tags):
        raise ValueError("score_files, mask_files and split_tags must have equal length")
    if mc_files is not None and len(mc_files) != len(score_files):
        raise ValueError("mc_files must list samples for every item")
    items = []
    k = 0
    for i, (sp, mp, tag) in enumerate(zip(score_files, mask_files, split_tags)):
        scores = read_score_map(sp)
        mask = read_mask(mp)
        if scores.shape != mask.shape:
            raise GridFormatError(
                f"dimension mismatch: {sp} is {scores.shape[0]}x{scores.shape[1]} "
                f"but {mp} is {mask.shape[0]}x{mask.shape[1]}"
            )
        paths = []
        if mc_files is not None:
            for p in mc_files[i]:
                if read_score_map(p).shape != mask.shape:
                    raise GridFormatError(f"dimension mismatch: {p} vs {mp}")
                paths.append(str(Path(p).resolve()))
            k = len(paths)
        items.append(ManifestItem(f"ext_{i:04d}", Split(str(tag).upper()), str(Path(sp).resolve()),
                                  str(Path(mp).resolve()), paths))
    return DatasetManifest(items, k=k)
