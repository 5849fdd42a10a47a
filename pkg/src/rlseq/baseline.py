"""Deterministic level-sweep sequencer used as the classical comparison.

Each row of the target is quantized into `horizon` intensity levels. Control
point k opens, per row, the widest contiguous run of columns whose target is
at least (k + 0.5) quanta, clamped to what the leaves can reach from the
previous control point. Every control point delivers one quantum of MU.
"""

from __future__ import annotations

import numpy as np

from .core import FluenceGrid, LeafPair, MachineState, PlanSequence, as_grid
from .errors import ContractError, DataError


def _longest_run(level_ok: np.ndarray) -> tuple[int, int] | None:
    """Leftmost longest run of True values as a half-open interval."""
    idx = np.flatnonzero(level_ok)
    if idx.size == 0:
        return None
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [idx.size - 1]))
    lengths = ends - starts + 1
    best = int(np.argmax(lengths))  # argmax takes the first maximum: leftmost
    return int(idx[starts[best]]), int(idx[ends[best]]) + 1


def sweep_sequencer(
    target: FluenceGrid | np.ndarray,
    horizon: int,
    mu_range: tuple[float, float] = (0.5, 2.5),
    max_leaf_step: int = 4,
) -> PlanSequence:
    grid = as_grid(target)
    v = grid.values
    if not (v > 0).any():
        raise DataError("empty target: no positive fluence values")
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    n_pairs, n_cols = grid.shape
    quantum = float(v.max()) / horizon
    mu = float(min(max(quantum, mu_range[0]), mu_range[1]))

    # conformal start, matching the environment's reset
    positive = v > 0
    has_support = positive.any(axis=1)
    first = positive.argmax(axis=1)
    last = n_cols - positive[:, ::-1].argmax(axis=1)
    mid = n_cols // 2
    a = np.where(has_support, first, mid).astype(np.int64)
    b = np.where(has_support, last, mid).astype(np.int64)

    states = []
    for k in range(horizon):
        threshold = (k + 0.5) * quantum
        new_a = np.empty_like(a)
        new_b = np.empty_like(b)
        for x in range(n_pairs):
            run = _longest_run(v[x] >= threshold)
            if run is None:
                want_a = want_b = (int(a[x]) + int(b[x])) // 2
            else:
                want_a, want_b = run
            new_a[x] = min(max(want_a, a[x] - max_leaf_step), a[x] + max_leaf_step)
            new_b[x] = min(max(want_b, b[x] - max_leaf_step), b[x] + max_leaf_step)
        # travel clamps of an ordered desired interval cannot cross
        assert not np.any(new_a > new_b)
        a, b = new_a, new_b
        pairs = tuple(LeafPair(int(p), int(q)) for p, q in zip(a, b))
        states.append(MachineState(pairs, mu))
    return PlanSequence(tuple(states), grid.shape)
