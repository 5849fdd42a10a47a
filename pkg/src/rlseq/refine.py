"""Post-hoc monitor-unit refinement by ridge regression.

With the apertures of a plan held fixed, the delivered fluence is linear in
the MU vector, so the best MUs solve a tiny K x K normal-equation system.
The solution is clipped to [0, mu_max]; the lower bound is 0 rather than the
machine minimum so refinement can switch a redundant control point off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import FluenceGrid, MachineState, PlanSequence, as_grid, row_masks
from .errors import ContractError

DEFAULT_MU_MAX = 2.5


@dataclass(frozen=True)
class RidgeConfig:
    alpha: float = 1e-3
    mu_max: float = DEFAULT_MU_MAX

    def __post_init__(self) -> None:
        if self.alpha < 0 or not np.isfinite(self.alpha):
            raise ContractError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.mu_max <= 0:
            raise ContractError(f"mu_max must be positive, got {self.mu_max}")


def ridge_solve(masks: np.ndarray, target: np.ndarray, alpha: float) -> np.ndarray:
    """Minimize ||target - masks @ m||^2 + alpha*||m||^2 over the MU vector.

    masks is (K, n_cells), target is (n_cells,). Solved by Cholesky on the
    K x K normal equations; a singular alpha=0 system falls back to 1e-8.
    """
    gram = masks @ masks.T
    rhs = masks @ target
    for attempt_alpha in (alpha, 1e-8) if alpha == 0 else (alpha,):
        try:
            system = gram + attempt_alpha * np.eye(gram.shape[0])
            return cho_solve(cho_factor(system), rhs)
        except np.linalg.LinAlgError:
            continue
    raise ContractError("ridge system is singular even with fallback regularization")


def ridge_refine(
    target: FluenceGrid | np.ndarray, plan: PlanSequence, cfg: RidgeConfig = RidgeConfig()
) -> PlanSequence:
    """Replace the plan's MUs with the clipped ridge optimum; positions stay."""
    grid = as_grid(target)
    if grid.shape != plan.grid_shape:
        raise ContractError(f"target shape {grid.shape} != plan shape {plan.grid_shape}")
    pos = plan.positions()
    masks = np.stack(
        [row_masks(pos[k, :, 0], pos[k, :, 1], grid.n_cols).ravel() for k in range(plan.n_cp)]
    )
    mu = ridge_solve(masks, grid.values.ravel(), cfg.alpha)
    mu = np.clip(mu, 0.0, cfg.mu_max)
    states = tuple(
        MachineState(st.pairs, float(m)) for st, m in zip(plan.states, mu)
    )
    return PlanSequence(states, plan.grid_shape, plan.crop_record)
