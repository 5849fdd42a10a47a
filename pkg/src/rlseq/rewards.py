"""The five per-control-point reward components and their weighted total.

All components are computed per leaf pair. The fluence-fidelity pair
(reward 1 and 2) exists in two forms:

* the default form: reward 1 credits open columns whose remaining headroom
  is at least the monitor unit (>=), reward 2 charges open columns that end
  up above the target (threshold 0, aperture-masked);
* a "literal" ablation form selected by ``strict``/``reward2_literal``:
  reward 1 uses a strict > comparison and reward 2 charges every column
  whose remaining headroom after accumulation is below the monitor unit,
  with no aperture mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LeafPair, aperture_area_perimeter
from .errors import ContractError


@dataclass(frozen=True)
class RewardWeights:
    """Nonnegative mixing weights for the five reward components."""

    lambda1: float = 1.0
    lambda2: float = 2.0
    lambda3: float = 2.0
    lambda4: float = 1.0
    lambda5: float = 1.0

    def __post_init__(self) -> None:
        for name, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"reward weight {name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "lambda4": self.lambda4,
            "lambda5": self.lambda5,
        }

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
        )


@dataclass(frozen=True)
class RewardBreakdown:
    """The five raw components plus their weighted sum."""

    r1: float
    r2: float
    r3: float
    r4: float
    r5: float
    total: float


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# -- row-vectorized forms (used by the environment step) ---------------------


def reward1_rows(
    target: np.ndarray,
    cumu_prev: np.ndarray,
    mask: np.ndarray,
    mu: float,
    strict: bool = False,
) -> np.ndarray:
    headroom = target - cumu_prev
    cond = headroom > mu if strict else headroom >= mu
    return mu * (cond * mask).sum(axis=1)


def reward2_rows(target: np.ndarray, cumu_new: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return -((target - cumu_new < 0) * mask).sum(axis=1)


def reward2_literal_rows(target: np.ndarray, cumu_new: np.ndarray, mu: float) -> np.ndarray:
    return -(target - cumu_new < mu).sum(axis=1).astype(np.float64)


def reward3_rows(a_raw: np.ndarray, b_raw: np.ndarray) -> np.ndarray:
    return np.sign(b_raw - a_raw).astype(np.float64)


def reward4_rows(
    da_abs: np.ndarray, db_abs: np.ndarray, dmu_abs: float | np.ndarray
) -> np.ndarray:
    return 3.0 - sigmoid(da_abs) - sigmoid(db_abs) - sigmoid(dmu_abs)


def reward5_per_pair_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-pair aperture shape score per row: width/(2*width + 2)."""
    w = (b - a).astype(np.float64)
    peri = 2.0 * w + 2.0 * (w > 0)
    return np.divide(w, peri, out=np.zeros_like(w), where=peri > 0)


# -- scalar / object forms (the public per-row contract) ---------------------


def reward1(
    target_row: np.ndarray,
    cumu_prev_row: np.ndarray,
    mask_row: np.ndarray,
    mu: float,
    strict: bool = False,
) -> float:
    """Credit for open columns with headroom able to absorb this MU."""
    if mu <= 0:
        raise ContractError(f"mu must be positive, got {mu}")
    return float(
        reward1_rows(
            np.atleast_2d(target_row), np.atleast_2d(cumu_prev_row),
            np.atleast_2d(mask_row), mu, strict=strict,
        )[0]
    )


def reward2(target_row: np.ndarray, cumu_new_row: np.ndarray, mask_row: np.ndarray) -> float:
    """Penalty for open columns overdosed after this control point."""
    return float(
        reward2_rows(
            np.atleast_2d(target_row), np.atleast_2d(cumu_new_row), np.atleast_2d(mask_row)
        )[0]
    )


def reward2_literal(target_row: np.ndarray, cumu_new_row: np.ndarray, mu: float) -> float:
    return float(
        reward2_literal_rows(np.atleast_2d(target_row), np.atleast_2d(cumu_new_row), mu)[0]
    )


def reward3(intended: LeafPair) -> float:
    """Leaf-crossing guard on the raw (pre-enforcement) intended positions."""
    return float(np.sign(intended.b - intended.a))


def reward4(da_abs: float, db_abs: float, dmu_abs: float) -> float:
    """Movement-smoothness bonus; 1.5 at rest, decaying to 0 for huge jumps."""
    if da_abs < 0 or db_abs < 0 or dmu_abs < 0:
        raise ContractError("reward4 deltas must be absolute values")
    return float(3.0 - sigmoid(da_abs) - sigmoid(db_abs) - sigmoid(dmu_abs))


def reward5(pairs: list[LeafPair] | tuple[LeafPair, ...]) -> float:
    """Aperture shape score area/perimeter over the full enforced aperture."""
    area, peri = aperture_area_perimeter(pairs)
    if peri == 0:
        return 0.0
    return area / peri


def reward5_per_pair(pair: LeafPair) -> float:
    return float(reward5_per_pair_rows(np.array([pair.a]), np.array([pair.b]))[0])


def total_reward(
    parts: tuple[float, float, float, float, float], weights: RewardWeights
) -> RewardBreakdown:
    """Mix the five components; the breakdown is kept for logging/ablation."""
    parts_arr = np.asarray(parts, dtype=np.float64)
    if parts_arr.shape != (5,) or not np.all(np.isfinite(parts_arr)):
        raise ContractError("expected 5 finite reward components")
    total = float(parts_arr @ weights.as_array())
    return RewardBreakdown(*[float(p) for p in parts_arr], total=total)
