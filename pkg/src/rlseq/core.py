"""Fluence grids, MLC leaf geometry, and the aperture-to-fluence maps.

Conventions used everywhere in the package:

* a fluence grid is a nonnegative (n_pairs, n_cols) float64 array; row x
  belongs to leaf pair x, columns are the leaf-travel axis;
* leaf positions are integers on the column boundaries 0..n_cols, and an
  aperture row covers the half-open column interval [a, b) -- a == b means
  the pair is closed;
* a control point is one MachineState: all leaf pairs plus one monitor unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import ContractError

if TYPE_CHECKING:
    from .normalize import CropBox


@dataclass(frozen=True)
class LeafPair:
    """One pair of opposing leaves: tail leaf at `a`, front leaf at `b`."""

    a: int
    b: int

    @property
    def width(self) -> int:
        return self.b - self.a

    @property
    def is_closed(self) -> bool:
        return self.a == self.b


@dataclass
class FluenceGrid:
    """Nonnegative 2D intensity grid (leaf pairs x columns)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractError(f"fluence grid must be 2D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 2:
            raise ContractError(f"fluence grid needs >=1 row and >=2 columns, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("fluence grid contains non-finite values")
        if np.any(v < 0):
            raise ContractError("fluence grid contains negative values")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def n_pairs(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


def as_grid(grid: FluenceGrid | np.ndarray) -> FluenceGrid:
    """Coerce an array to a validated FluenceGrid (no copy for valid input)."""
    if isinstance(grid, FluenceGrid):
        return grid
    return FluenceGrid(np.asarray(grid, dtype=np.float64))


@dataclass
class MachineState:
    """One control point: every leaf pair's position plus the monitor unit.

    `mu` is allowed down to 0 so that post-hoc MU refinement can disable a
    redundant control point; the environment itself always keeps mu inside
    its configured range.
    """

    pairs: tuple[LeafPair, ...]
    mu: float

    def __post_init__(self) -> None:
        self.pairs = tuple(self.pairs)
        if not self.pairs:
            raise ContractError("machine state needs at least one leaf pair")
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ContractError(f"monitor unit must be finite and >= 0, got {self.mu}")

    def position_array(self) -> np.ndarray:
        """(n_pairs, 2) int64 array of (a, b) rows."""
        return np.array([(p.a, p.b) for p in self.pairs], dtype=np.int64)


@dataclass
class PlanSequence:
    """A full deliverable plan: K control points over a fixed grid shape."""

    states: tuple[MachineState, ...]
    grid_shape: tuple[int, int]
    crop_record: Optional["CropBox"] = None

    def __post_init__(self) -> None:
        self.states = tuple(self.states)
        if not self.states:
            raise ContractError("plan needs at least one control point")
        n_pairs = self.grid_shape[0]
        for st in self.states:
            if len(st.pairs) != n_pairs:
                raise ContractError(
                    f"control point has {len(st.pairs)} pairs, grid expects {n_pairs}"
                )

    @property
    def n_cp(self) -> int:
        return len(self.states)

    def positions(self) -> np.ndarray:
        """(K, n_pairs, 2) int64 array of leaf positions."""
        return np.stack([st.position_array() for st in self.states])

    def monitor_units(self) -> np.ndarray:
        return np.array([st.mu for st in self.states], dtype=np.float64)


def row_masks(a: np.ndarray, b: np.ndarray, n_cols: int) -> np.ndarray:
    """Binary aperture mask rows for position vectors: 1 on [a, b) per row."""
    cols = np.arange(n_cols)
    a = np.asarray(a)[:, None]
    b = np.asarray(b)[:, None]
    return ((cols >= a) & (cols < b)).astype(np.float64)


def _validate_state_for_shape(state: MachineState, shape: tuple[int, int]) -> np.ndarray:
    n_pairs, n_cols = shape
    if len(state.pairs) != n_pairs:
        raise ContractError(f"state has {len(state.pairs)} pairs, shape expects {n_pairs}")
    pos = state.position_array()
    if np.any(pos < 0) or np.any(pos > n_cols):
        raise ContractError("leaf positions outside [0, n_cols]")
    if np.any(pos[:, 0] > pos[:, 1]):
        raise ContractError("leaf pair crossing (a > b); enforce before use")
    return pos


def unit_fluence(state: MachineState, shape: tuple[int, int]) -> FluenceGrid:
    """Binary aperture mask of one control point, before MU weighting."""
    pos = _validate_state_for_shape(state, shape)
    return FluenceGrid(row_masks(pos[:, 0], pos[:, 1], shape[1]))


def accumulate(prev: FluenceGrid | np.ndarray, state: MachineState) -> FluenceGrid:
    """Add the control point's MU-weighted unit fluence to `prev` (pure)."""
    prev = as_grid(prev)
    mask = unit_fluence(state, prev.shape)
    return FluenceGrid(prev.values + state.mu * mask.values)


def aperture_area_perimeter(pairs: Sequence[LeafPair]) -> tuple[float, float]:
    """Area and boundary length of the rectilinear union of open cells.

    Rows are unit-height; row x contributes the cells [a_x, b_x). The
    perimeter counts every unit edge that borders exactly one open cell.
    An all-closed aperture returns (0, 0).
    """
    a = np.array([p.a for p in pairs], dtype=np.int64)
    b = np.array([p.b for p in pairs], dtype=np.int64)
    if np.any(a > b):
        raise ContractError("pairs must be enforced (a <= b)")
    return aperture_area_perimeter_arrays(a, b)


def aperture_area_perimeter_arrays(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    widths = b - a
    area = int(widths.sum())
    vertical = 2 * int(np.count_nonzero(widths > 0))
    # Pad with empty rows above and below; each row boundary exposes the
    # symmetric difference of the two adjacent intervals.
    ap = np.concatenate(([0], a, [0]))
    bp = np.concatenate(([0], b, [0]))
    wp = bp - ap
    overlap = np.maximum(0, np.minimum(bp[:-1], bp[1:]) - np.maximum(ap[:-1], ap[1:]))
    horizontal = int((wp[:-1] + wp[1:] - 2 * overlap).sum())
    return float(area), float(vertical + horizontal)
