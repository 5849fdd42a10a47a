"""Finite-horizon leaf-sequencing episodes.

One episode delivers a fixed number of control points onto one target grid.
Each step applies every leaf pair's discrete move plus one shared continuous
monitor unit, enforces the physical limits, accumulates fluence, and pays the
five-component reward per leaf pair. States are immutable snapshots; stepping
returns a fresh state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import FluenceGrid, LeafPair, MachineState, as_grid, row_masks
from .errors import ContractError, DataError
from .normalize import resample_row, resample_rows
from .rewards import (
    RewardWeights,
    reward1_rows,
    reward2_literal_rows,
    reward2_rows,
    reward3_rows,
    reward4_rows,
    reward5,
    reward5_per_pair_rows,
)


@dataclass(frozen=True)
class EnvConfig:
    """Episode shape, physical limits, observation encoding, reward mix."""

    horizon: int                                  # control points per episode
    max_leaf_step: int = 4                        # leaf travel limit per CP
    mu_range: tuple[float, float] = (0.5, 2.5)
    obs_columns: int = 64                         # fixed observation row width
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    literal_rewards: bool = False                 # strict-threshold R1/R2 ablation
    per_pair_aperture: bool = False               # R5 per pair instead of full aperture

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ContractError(f"horizon must be >= 1, got {self.horizon}")
        if self.max_leaf_step < 1:
            raise ContractError(f"max_leaf_step must be >= 1, got {self.max_leaf_step}")
        lo, hi = self.mu_range
        if not (0 < lo < hi):
            raise ContractError(f"need 0 < mu_min < mu_max, got {self.mu_range}")
        if self.obs_columns < 8:
            raise ContractError(f"obs_columns must be >= 8, got {self.obs_columns}")


@dataclass(frozen=True)
class LeafAction:
    """Signed integer step for one pair's two leaves, each in [-S, S]."""

    da: int
    db: int


@dataclass(frozen=True)
class MuAction:
    """Requested monitor unit; the environment clamps it into mu_range."""

    value: float


@dataclass(frozen=True)
class LeafObservation:
    """What one leaf agent sees before choosing its move."""

    target_row: np.ndarray
    cumulated_row: np.ndarray
    residual_row: np.ndarray
    a_frac: float
    b_frac: float
    k_frac: float
    x_frac: float

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.target_row,
                self.cumulated_row,
                self.residual_row,
                [self.a_frac, self.b_frac, self.k_frac, self.x_frac],
            ]
        )


@dataclass(frozen=True)
class MuObservation:
    """What the MU agent sees: row-pooled residual/aperture after leaf moves."""

    pooled_residual: np.ndarray
    pooled_mask: np.ndarray
    open_fraction: float
    k_frac: float

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.pooled_residual, self.pooled_mask, [self.open_fraction, self.k_frac]]
        )


def leaf_obs_dim(cfg: EnvConfig) -> int:
    return 3 * cfg.obs_columns + 4


def mu_obs_dim(cfg: EnvConfig) -> int:
    return 2 * cfg.obs_columns + 2


@dataclass(frozen=True)
class RewardArrays:
    """Per-pair reward components for one step; used for logging/ablation."""

    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    r4: np.ndarray
    r5: np.ndarray
    total: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.r1, self.r2, self.r3, self.r4, self.r5], axis=1)


@dataclass(frozen=True)
class EnvState:
    """Immutable episode snapshot after k control points."""

    target: np.ndarray      # (n_pairs, n_cols) float64
    cumulated: np.ndarray   # same shape, elementwise >= 0, nondecreasing in k
    a: np.ndarray           # (n_pairs,) int64 tail-leaf positions
    b: np.ndarray           # (n_pairs,) int64 front-leaf positions
    mu: float
    k: int
    cfg: EnvConfig
    last_rewards: Optional[RewardArrays] = None

    @property
    def n_pairs(self) -> int:
        return self.target.shape[0]

    @property
    def n_cols(self) -> int:
        return self.target.shape[1]

    @property
    def done(self) -> bool:
        return self.k >= self.cfg.horizon

    @property
    def machine(self) -> MachineState:
        pairs = tuple(LeafPair(int(x), int(y)) for x, y in zip(self.a, self.b))
        return MachineState(pairs, self.mu)


def reset(target: FluenceGrid | np.ndarray, cfg: EnvConfig, seed: int = 0) -> EnvState:
    """Start an episode: zero cumulated fluence, leaves conformal to each
    row's positive support (closed at the column midpoint for empty rows),
    monitor unit at the bottom of its range.

    The initial configuration is deterministic; `seed` is accepted for
    interface stability and unused.
    """
    del seed
    grid = as_grid(target)
    v = grid.values
    positive = v > 0
    if not positive.any():
        raise DataError("empty target: no positive fluence values")
    n_cols = grid.n_cols
    has_support = positive.any(axis=1)
    first = positive.argmax(axis=1)
    last = n_cols - positive[:, ::-1].argmax(axis=1)
    mid = n_cols // 2
    a = np.where(has_support, first, mid).astype(np.int64)
    b = np.where(has_support, last, mid).astype(np.int64)
    return EnvState(
        target=v.copy(),
        cumulated=np.zeros_like(v),
        a=a,
        b=b,
        mu=cfg.mu_range[0],
        k=0,
        cfg=cfg,
    )


def enforce(pair: LeafPair, n_cols: int) -> LeafPair:
    """Clamp both positions to [0, n_cols]; collapse crossings to the midpoint."""
    a = min(max(pair.a, 0), n_cols)
    b = min(max(pair.b, 0), n_cols)
    if a > b:
        a = b = (a + b) // 2
    return LeafPair(a, b)


def enforce_arrays(
    raw_a: np.ndarray, raw_b: np.ndarray, n_cols: int
) -> tuple[np.ndarray, np.ndarray]:
    a = np.clip(raw_a, 0, n_cols)
    b = np.clip(raw_b, 0, n_cols)
    crossed = a > b
    if crossed.any():
        mid = (a + b) // 2
        a = np.where(crossed, mid, a)
        b = np.where(crossed, mid, b)
    return a.astype(np.int64), b.astype(np.int64)


def _coerce_leaf_actions(
    actions: Sequence[LeafAction] | np.ndarray, n_pairs: int, max_step: int
) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(actions, np.ndarray):
        arr = np.asarray(actions, dtype=np.int64)
        if arr.shape != (n_pairs, 2):
            raise ContractError(f"expected actions of shape ({n_pairs}, 2), got {arr.shape}")
        da, db = arr[:, 0], arr[:, 1]
    else:
        if len(actions) != n_pairs:
            raise ContractError(f"expected {n_pairs} leaf actions, got {len(actions)}")
        da = np.array([act.da for act in actions], dtype=np.int64)
        db = np.array([act.db for act in actions], dtype=np.int64)
    if np.any(np.abs(da) > max_step) or np.any(np.abs(db) > max_step):
        raise ContractError(f"leaf action outside [-{max_step}, {max_step}]")
    return da, db


def step_cp(
    state: EnvState,
    leaf_actions: Sequence[LeafAction] | np.ndarray,
    mu_action: MuAction | float,
) -> tuple[EnvState, np.ndarray, bool]:
    """Apply one control point; returns (new state, per-pair rewards, done).

    Order of operations: move and enforce leaves, clamp the monitor unit,
    accumulate fluence, then pay rewards on the enforced configuration
    (reward 3 alone looks at the raw intended positions so that crossing
    attempts stay visible to the penalty).
    """
    cfg = state.cfg
    if state.done:
        raise ContractError("episode is finished; reset before stepping again")
    da, db = _coerce_leaf_actions(leaf_actions, state.n_pairs, cfg.max_leaf_step)
    mu_req = mu_action.value if isinstance(mu_action, MuAction) else float(mu_action)
    if not np.isfinite(mu_req):
        raise ContractError("monitor-unit action must be finite")

    raw_a = state.a + da
    raw_b = state.b + db
    new_a, new_b = enforce_arrays(raw_a, raw_b, state.n_cols)
    new_mu = float(min(max(mu_req, cfg.mu_range[0]), cfg.mu_range[1]))

    mask = row_masks(new_a, new_b, state.n_cols)
    r1 = reward1_rows(state.target, state.cumulated, mask, new_mu, strict=cfg.literal_rewards)
    cumu_new = state.cumulated + new_mu * mask
    if cfg.literal_rewards:
        r2 = reward2_literal_rows(state.target, cumu_new, new_mu)
    else:
        r2 = reward2_rows(state.target, cumu_new, mask)
    r3 = reward3_rows(raw_a, raw_b)
    r4 = reward4_rows(
        np.abs(new_a - state.a), np.abs(new_b - state.b), abs(new_mu - state.mu)
    )
    if cfg.per_pair_aperture:
        r5 = reward5_per_pair_rows(new_a, new_b)
    else:
        r5 = np.full(state.n_pairs, reward5(_machine_pairs(new_a, new_b)))

    w = cfg.reward_weights
    total = (
        w.lambda1 * r1 + w.lambda2 * r2 + w.lambda3 * r3 + w.lambda4 * r4 + w.lambda5 * r5
    )
    new_state = EnvState(
        target=state.target,
        cumulated=cumu_new,
        a=new_a,
        b=new_b,
        mu=new_mu,
        k=state.k + 1,
        cfg=cfg,
        last_rewards=RewardArrays(r1, r2, r3, r4, r5, total),
    )
    return new_state, total, new_state.done


def observe_leaf(state: EnvState, x: int) -> LeafObservation:
    """Observation for leaf pair x: fixed-width row profiles plus indices."""
    if not 0 <= x < state.n_pairs:
        raise ContractError(f"leaf index {x} out of range")
    cols = state.cfg.obs_columns
    target_row = resample_row(state.target[x], cols)
    cumulated_row = resample_row(state.cumulated[x], cols)
    return LeafObservation(
        target_row=target_row,
        cumulated_row=cumulated_row,
        residual_row=target_row - cumulated_row,
        a_frac=float(state.a[x]) / state.n_cols,
        b_frac=float(state.b[x]) / state.n_cols,
        k_frac=state.k / state.cfg.horizon,
        x_frac=x / state.n_pairs,
    )


def leaf_observation_matrix(state: EnvState) -> np.ndarray:
    """All leaf observations stacked as an (n_pairs, leaf_obs_dim) batch."""
    cols = state.cfg.obs_columns
    target = resample_rows(state.target, cols)
    cumulated = resample_rows(state.cumulated, cols)
    n = state.n_pairs
    scalars = np.empty((n, 4))
    scalars[:, 0] = state.a / state.n_cols
    scalars[:, 1] = state.b / state.n_cols
    scalars[:, 2] = state.k / state.cfg.horizon
    scalars[:, 3] = np.arange(n) / n
    return np.concatenate([target, cumulated, target - cumulated, scalars], axis=1)


def observe_mu(state: EnvState, post_leaf_pairs: Sequence[LeafPair] | np.ndarray) -> MuObservation:
    """Observation for the MU agent, after leaf moves are fixed.

    `post_leaf_pairs` are the enforced positions the control point will use.
    Residual and aperture rows are mean-pooled over pairs, so the encoding is
    tolerant to row permutation and row count.
    """
    if isinstance(post_leaf_pairs, np.ndarray):
        pos = np.asarray(post_leaf_pairs, dtype=np.int64)
    else:
        pos = np.array([(p.a, p.b) for p in post_leaf_pairs], dtype=np.int64)
    if pos.shape != (state.n_pairs, 2):
        raise ContractError(f"expected ({state.n_pairs}, 2) positions, got {pos.shape}")
    if np.any(pos[:, 0] > pos[:, 1]) or np.any(pos < 0) or np.any(pos > state.n_cols):
        raise ContractError("positions must be enforced before the MU observation")
    cols = state.cfg.obs_columns
    mask = row_masks(pos[:, 0], pos[:, 1], state.n_cols)
    residual = (state.target - state.cumulated).mean(axis=0)
    return MuObservation(
        pooled_residual=resample_row(residual, cols),
        pooled_mask=resample_row(mask.mean(axis=0), cols),
        open_fraction=float(mask.mean()),
        k_frac=state.k / state.cfg.horizon,
    )


def _machine_pairs(a: np.ndarray, b: np.ndarray) -> tuple[LeafPair, ...]:
    return tuple(LeafPair(int(x), int(y)) for x, y in zip(a, b))
