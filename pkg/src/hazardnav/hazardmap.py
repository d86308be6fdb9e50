"""Grid primitives: score maps, hazard masks and the nested threshold family.

Score maps are 2-D float arrays of per-pixel hazard probabilities; hazard
masks are 2-D boolean arrays of the same shape. Both have a plain text file
format: a header line ``"H W"`` followed by ``H`` rows of ``W``
space-separated values (decimal probabilities, or 0/1 for masks).
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, Path]


class GridFormatError(ValueError):
    """Raised when a score map or mask (in memory or on disk) is malformed."""


class PixelCoord(NamedTuple):
    row: int
    col: int


def as_score_map(values) -> np.ndarray:
    scores = np.asarray(values, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise GridFormatError(f"score map must be a non-empty 2-D grid, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
        raise GridFormatError("score map values must lie in [0, 1]")
    return scores


def as_mask(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 2 or arr.size == 0:
        raise GridFormatError(f"hazard mask must be a non-empty 2-D grid, got shape {arr.shape}")
    if arr.dtype != np.bool_:
        if not np.all((arr == 0) | (arr == 1)):
            raise GridFormatError("hazard mask entries must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def check_threshold(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"threshold lambda must lie in [0, 1], got {lam}")
    return lam


def threshold_mask(scores, lam: float) -> np.ndarray:
    """Pixels whose score is at least ``1 - lam``.

    Larger ``lam`` never removes pixels, so the masks form a nested family
    ranging from (almost always) empty at ``lam = 0`` to the full lattice at
    ``lam = 1``.
    """
    scores = as_score_map(scores)
    return scores >= 1.0 - check_threshold(lam)


def hazard_set(mask) -> set[PixelCoord]:
    mask = as_mask(mask)
    return {PixelCoord(int(r), int(c)) for r, c in np.argwhere(mask)}


def d_max(shape: tuple[int, int]) -> int:
    """Sentinel distance for an empty mask, larger than any lattice L1 distance."""
    return int(shape[0]) + int(shape[1])


def manhattan_distance_field(mask) -> np.ndarray:
    """L1 distance from every cell to the nearest set pixel (0 inside the mask).

    An empty mask yields ``H + W`` everywhere.
    """
    mask = as_mask(mask)
    if not mask.any():
        return np.full(mask.shape, d_max(mask.shape), dtype=np.int64)
    # cdt measures distance from nonzero cells to the nearest zero cell
    field = ndimage.distance_transform_cdt(~mask, metric="taxicab")
    return field.astype(np.int64)


def signed_boundary_distance(mask) -> np.ndarray:
    """Signed L1 distance to the hazard boundary, positive inside hazards.

    Inner boundary pixels (set pixels with an unset 4-neighbour) sit at 0,
    deeper pixels count up from there, and unset pixels carry minus their
    distance to the nearest set pixel.
    """
    mask = as_mask(mask)
    outside = -manhattan_distance_field(mask)
    if mask.all():
        depth = np.full(mask.shape, d_max(mask.shape), dtype=np.int64)
    else:
        depth = ndimage.distance_transform_cdt(mask, metric="taxicab").astype(np.int64) - 1
    return np.where(mask, depth, outside)


# -- text formats ---------------------------------------------------------


def _read_grid(path: PathLike, kind: str) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise GridFormatError(f"{path}: cannot read {kind} file: {exc}") from exc
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise GridFormatError(f"{path}:1: empty {kind} file")
    header = lines[0].split()
    try:
        height, width = (int(tok) for tok in header)
    except ValueError:
        raise GridFormatError(f"{path}:1: header must be 'H W', got {lines[0]!r}") from None
    if height <= 0 or width <= 0:
        raise GridFormatError(f"{path}:1: dimensions must be positive, got {height}x{width}")
    if len(lines) - 1 != height:
        raise GridFormatError(f"{path}: expected {height} rows, found {len(lines) - 1}")
    grid = np.empty((height, width), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        toks = line.split()
        if len(toks) != width:
            raise GridFormatError(f"{path}:{lineno}: expected {width} values, found {len(toks)}")
        try:
            row = [float(tok) for tok in toks]
        except ValueError as exc:
            raise GridFormatError(f"{path}:{lineno}: {exc}") from None
        for tok, val in zip(toks, row):
            if kind == "mask" and val not in (0.0, 1.0):
                raise GridFormatError(f"{path}:{lineno}: mask entry {tok!r} is not 0 or 1")
            if not 0.0 <= val <= 1.0:
                raise GridFormatError(f"{path}:{lineno}: score {tok!r} outside [0, 1]")
        grid[i] = row
    return grid


def read_score_map(path: PathLike) -> np.ndarray:
    return _read_grid(path, "score map")


def read_mask(path: PathLike) -> np.ndarray:
    return _read_grid(path, "mask").astype(bool)


def format_score_map(scores, digits: int = 6) -> str:
    scores = as_score_map(scores)
    h, w = scores.shape
    fmt = f"{{:.{digits}f}}"
    rows = [" ".join(fmt.format(v) for v in row) for row in scores]
    return f"{h} {w}\n" + "\n".join(rows) + "\n"


def format_mask(mask) -> str:
    mask = as_mask(mask)
    h, w = mask.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in mask]
    return f"{h} {w}\n" + "\n".join(rows) + "\n"


def write_score_map(path: PathLike, scores, digits: int = 6) -> None:
    Path(path).write_text(format_score_map(scores, digits), encoding="utf-8")


def write_mask(path: PathLike, mask) -> None:
    Path(path).write_text(format_mask(mask), encoding="utf-8")
