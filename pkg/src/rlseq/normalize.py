"""Fluence normalization: ROI cropping, resampling, coordinate back-mapping,
and control-point merging for variable sector lengths.

The agents only ever see cropped grids resampled to a fixed column count, so
one policy serves fluences of any size. Predicted positions live on the
normalized column lattice [0, columns] and are mapped back affinely onto the
original grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FluenceGrid, LeafPair, MachineState, PlanSequence, as_grid
from .errors import ContractError, DataError


@dataclass(frozen=True)
class CropBox:
    """Half-open row/column crop window plus the shape it was cut from."""

    x1: int
    x2: int
    y1: int
    y2: int
    original_shape: tuple[int, int]

    def __post_init__(self) -> None:
        n_rows, n_cols = self.original_shape
        if not (0 <= self.x1 < self.x2 <= n_rows):
            raise ContractError(f"bad row bounds ({self.x1}, {self.x2}) for {n_rows} rows")
        if not (0 <= self.y1 < self.y2 <= n_cols):
            raise ContractError(f"bad column bounds ({self.y1}, {self.y2}) for {n_cols} cols")


def detect_roi(grid: FluenceGrid | np.ndarray) -> tuple[int, int, int, int]:
    """Tight half-open bounding box (x1, x2, y1, y2) of strictly positive cells."""
    v = as_grid(grid).values
    rows = np.flatnonzero(v.sum(axis=1) > 0)
    cols = np.flatnonzero(v.sum(axis=0) > 0)
    if rows.size == 0:
        raise DataError("empty target: no positive fluence values")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def make_crop(
    roi: tuple[int, int, int, int],
    original_shape: tuple[int, int],
    mode: str = "inference",
    rng: np.random.Generator | None = None,
) -> CropBox:
    """Widen the ROI into the crop window actually fed to the agents.

    Inference splits the margins in half deterministically; training samples
    the column margins uniformly for augmentation (degenerate ranges collapse
    to the endpoint).
    """
    x1, x2, ry1, ry2 = roi
    n_cols = original_shape[1]
    if mode == "inference":
        y1 = ry1 // 2
        y2 = -((-(ry2 + n_cols)) // 2)  # ceil((ry2 + n_cols) / 2)
    elif mode == "train":
        if rng is None:
            raise ContractError("train-mode crop needs an rng")
        y1 = int(rng.integers(0, ry1 + 1))
        y2 = int(rng.integers(ry2, n_cols + 1))
    else:
        raise ContractError(f"unknown crop mode {mode!r}")
    return CropBox(x1, x2, y1, y2, original_shape)


def resample_row(row: np.ndarray, columns: int) -> np.ndarray:
    """Linearly resample a 1D profile to `columns` samples (endpoints aligned).

    Identity when lengths match; exact for constant and linear profiles.
    """
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[-1]
    if n == columns:
        return row.copy()
    positions = np.arange(columns) * ((n - 1) / (columns - 1))
    return np.interp(positions, np.arange(n), row)


def resample_rows(grid: np.ndarray, columns: int) -> np.ndarray:
    """Row-wise resample_row over a 2D array."""
    grid = np.asarray(grid, dtype=np.float64)
    n = grid.shape[1]
    if n == columns:
        return grid.copy()
    positions = np.arange(columns) * ((n - 1) / (columns - 1))
    idx = np.minimum(positions.astype(np.int64), n - 2)
    frac = positions - idx
    return grid[:, idx] * (1.0 - frac) + grid[:, idx + 1] * frac


def crop_and_resize(grid: FluenceGrid | np.ndarray, box: CropBox, columns: int) -> FluenceGrid:
    """Cut the crop window and resample its columns to a fixed count."""
    v = as_grid(grid).values
    if v.shape != box.original_shape:
        raise ContractError(f"grid shape {v.shape} does not match crop box {box.original_shape}")
    window = v[box.x1 : box.x2, box.y1 : box.y2]
    return FluenceGrid(np.maximum(resample_rows(window, columns), 0.0))


def map_positions_back(
    positions: np.ndarray, box: CropBox, columns: int
) -> np.ndarray:
    """Map normalized leaf positions (K, x2-x1, 2) back onto the original grid.

    The affine map sends the normalized lattice [0, columns] onto [y1, y2].
    Rounding ties open outward (a down, b up) so apertures never collapse from
    rounding alone. Rows outside the crop window are closed at the window's
    column midpoint. Output is (K, n_rows, 2) with 0 <= a <= b <= n_cols.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_rows, n_cols = box.original_shape
    if positions.ndim != 3 or positions.shape[1] != box.x2 - box.x1 or positions.shape[2] != 2:
        raise ContractError(
            f"expected positions of shape (K, {box.x2 - box.x1}, 2), got {positions.shape}"
        )
    scale = (box.y2 - box.y1) / columns
    mapped = positions * scale + box.y1
    a = np.ceil(mapped[:, :, 0] - 0.5)  # nearest, ties down
    b = np.floor(mapped[:, :, 1] + 0.5)  # nearest, ties up
    a = np.clip(a, 0, n_cols).astype(np.int64)
    b = np.clip(b, 0, n_cols).astype(np.int64)
    crossed = a > b
    if np.any(crossed):
        mid = (a + b) // 2
        a = np.where(crossed, mid, a)
        b = np.where(crossed, mid, b)

    k = positions.shape[0]
    out = np.empty((k, n_rows, 2), dtype=np.int64)
    mid_col = min(max((box.y1 + box.y2) // 2, 0), n_cols)
    out[:, :, 0] = mid_col
    out[:, :, 1] = mid_col
    out[:, box.x1 : box.x2, 0] = a
    out[:, box.x1 : box.x2, 1] = b
    return out


def merge_control_points(plan: PlanSequence, n_target: int) -> PlanSequence:
    """Shrink a plan to `n_target` control points by averaging adjacent pairs.

    Each merged control point takes the elementwise mean of the two source
    positions (half-integer means open outward: a down, b up) and the sum of
    the two monitor units, preserving total delivered weight. Only pairwise
    merging is supported, so n_target >= ceil(K/2).
    """
    k = plan.n_cp
    if n_target > k:
        raise ContractError(f"cannot grow plan from {k} to {n_target} control points")
    if n_target < -(-k // 2):
        raise ContractError(
            f"target {n_target} below ceil({k}/2); only pairwise merging is supported"
        )
    if n_target == k:
        return PlanSequence(plan.states, plan.grid_shape, plan.crop_record)

    n_merges = k - n_target
    starts = [(j * k) // n_merges for j in range(n_merges)]  # disjoint: k/n_merges >= 2

    merged: list[MachineState] = []
    start_set = set(starts)
    i = 0
    while i < k:
        if i in start_set:
            lo, hi = plan.states[i], plan.states[i + 1]
            pairs = []
            for p, q in zip(lo.pairs, hi.pairs):
                pairs.append(LeafPair((p.a + q.a) // 2, -((-(p.b + q.b)) // 2)))
            merged.append(MachineState(tuple(pairs), lo.mu + hi.mu))
            i += 2
        else:
            merged.append(plan.states[i])
            i += 1
    return PlanSequence(tuple(merged), plan.grid_shape, plan.crop_record)
