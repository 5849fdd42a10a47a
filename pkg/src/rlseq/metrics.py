"""Evaluation metrics: reconstruction error, plan reconstruction, leaf-speed
statistics."""

from __future__ import annotations

import numpy as np

from .core import FluenceGrid, PlanSequence, as_grid, row_masks
from .errors import ContractError, DataError


def mnse(pairs: list[tuple[FluenceGrid | np.ndarray, FluenceGrid | np.ndarray]]) -> float:
    """Mean over samples of ||target - predicted||_2 / ||target||_2.

    Despite the historical "square error" name this is a plain L2-norm ratio;
    an all-zero prediction scores exactly 1.0.
    """
    if not pairs:
        raise ContractError("mnse needs at least one (target, predicted) pair")
    ratios = []
    for target, predicted in pairs:
        t = as_grid(target).values
        p = as_grid(predicted).values
        if t.shape != p.shape:
            raise ContractError(f"shape mismatch {t.shape} vs {p.shape}")
        denom = np.linalg.norm(t)
        if denom == 0:
            raise DataError("mnse undefined for a zero-norm target")
        ratios.append(np.linalg.norm(t - p) / denom)
    return float(np.mean(ratios))


def reconstruct(plan: PlanSequence, shape: tuple[int, int]) -> FluenceGrid:
    """Predicted fluence delivered by a plan: sum of MU-weighted unit fluences."""
    if plan.grid_shape != tuple(shape):
        raise ContractError(f"plan is for shape {plan.grid_shape}, asked for {tuple(shape)}")
    pos = plan.positions()
    mus = plan.monitor_units()
    out = np.zeros(shape, dtype=np.float64)
    for k in range(plan.n_cp):
        out += mus[k] * row_masks(pos[k, :, 0], pos[k, :, 1], shape[1])
    return FluenceGrid(out)


def leaf_speed_stats(plan: PlanSequence) -> tuple[float, float]:
    """(mean, max) of |position change| per control point over both leaves."""
    if plan.n_cp < 2:
        raise ContractError("leaf speed needs at least 2 control points")
    pos = plan.positions()
    deltas = np.abs(np.diff(pos, axis=0)).astype(np.float64)
    return float(deltas.mean()), float(deltas.max())
