"""Two-level multi-agent PPO: shared leaf policy, one MU policy, one critic.

Rollouts record one transition per (leaf pair, control point); the MU action
and its log-probability are duplicated across that control point's rows so
the probability ratio is the product of the leaf and MU densities. GAE runs
per leaf-pair trajectory with true termination at the horizon (no bootstrap).

Network inputs are the environment observations with the row profiles scaled
by a fixed constant (OBS_ROW_SCALE) to keep tanh layers in range; positions,
indices and pooled features pass through unscaled.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FluenceGrid, LeafPair, MachineState, PlanSequence, as_grid
from .env import (
    EnvConfig,
    EnvState,
    enforce_arrays,
    leaf_obs_dim,
    leaf_observation_matrix,
    mu_obs_dim,
    observe_mu,
    reset,
    step_cp,
)
from .errors import ContractError, DataError, NumericError
from .metrics import mnse, reconstruct
from .nn import (
    OptimizerState,
    PolicyParams,
    adamw_step,
    backward,
    categorical_logprob_entropy,
    categorical_sample,
    clamp_log_std,
    clip_global_norm,
    cosine_lr,
    forward,
    gaussian_logprob_entropy,
    init_policy,
    log_softmax,
    pack_policy,
    save_checkpoint,
)
from .normalize import crop_and_resize, detect_roi, make_crop, map_positions_back, merge_control_points
from .refine import RidgeConfig, ridge_refine

OBS_ROW_SCALE = 0.25
N_EDGE_TAPS = 8  # residual samples around each leaf edge, per leaf

METRICS_COLUMNS = [
    "iter", "mean_reward", "r1", "r2", "r3", "r4", "r5",
    "policy_loss", "value_loss", "entropy", "lr", "probe_mnse",
]


@dataclass(frozen=True)
class TrainConfig:
    """PPO hyperparameters (CleanRL-style defaults)."""

    iterations: int = 150
    episodes_per_iter: int = 16
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    update_epochs: int = 4
    minibatches: int = 4
    max_grad_norm: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    value_target: str = "gae"       # "gae" pairs returns with GAE; "td0" is the literal one-step target
    shared_backbone: bool = False   # share the leaf policy trunk with the critic
    augment_crops: bool = True      # sample crop margins during training

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ContractError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if not 0 < self.gamma <= 1 or not 0 < self.gae_lambda <= 1:
            raise ContractError("gamma and gae_lambda must be in (0, 1]")
        if self.value_target not in ("gae", "td0"):
            raise ContractError(f"value_target must be 'gae' or 'td0', got {self.value_target}")
        if self.iterations < 0 or self.episodes_per_iter < 1:
            raise ContractError("iterations must be >= 0 and episodes_per_iter >= 1")
        if self.update_epochs < 1 or self.minibatches < 1:
            raise ContractError("update_epochs and minibatches must be >= 1")


@dataclass(frozen=True)
class Transition:
    """One (leaf pair, control point) sample as the update sees it."""

    leaf_obs: np.ndarray
    mu_obs: np.ndarray
    da: int
    db: int
    mu_action: float
    leaf_logprob: float
    mu_logprob: float
    reward: float
    value: float
    done: bool
    episode: int
    pair_index: int
    cp_index: int


@dataclass
class RolloutBuffer:
    """Flat per-transition arrays plus per-trajectory index rows."""

    leaf_obs: np.ndarray        # (N, D) network inputs
    mu_obs: np.ndarray          # (N, Dm)
    idx_da: np.ndarray          # (N,) head indices in [0, 2S]
    idx_db: np.ndarray
    mu_action: np.ndarray       # (N,) raw (unclamped) MU samples
    leaf_logprob: np.ndarray
    mu_logprob: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    done: np.ndarray
    episode: np.ndarray
    pair_index: np.ndarray
    cp_index: np.ndarray
    reward_components: np.ndarray  # (N, 5)
    traj_rows: np.ndarray          # (n_traj, K) indices into the flat arrays
    max_leaf_step: int
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.reward.shape[0]

    def get_transition(self, i: int) -> Transition:
        s = self.max_leaf_step
        return Transition(
            leaf_obs=self.leaf_obs[i],
            mu_obs=self.mu_obs[i],
            da=int(self.idx_da[i]) - s,
            db=int(self.idx_db[i]) - s,
            mu_action=float(self.mu_action[i]),
            leaf_logprob=float(self.leaf_logprob[i]),
            mu_logprob=float(self.mu_logprob[i]),
            reward=float(self.reward[i]),
            value=float(self.value[i]),
            done=bool(self.done[i]),
            episode=int(self.episode[i]),
            pair_index=int(self.pair_index[i]),
            cp_index=int(self.cp_index[i]),
        )


@dataclass
class EpisodeSource:
    """Picklable factory mapping an rng to a fresh cropped episode."""

    targets: list[np.ndarray]
    env_cfg: EnvConfig
    augment: bool = True

    def __call__(self, rng: np.random.Generator) -> EnvState:
        grid = as_grid(self.targets[int(rng.integers(len(self.targets)))])
        roi = detect_roi(grid)
        box = make_crop(roi, grid.shape, "train" if self.augment else "inference", rng)
        norm = crop_and_resize(grid, box, self.env_cfg.obs_columns)
        return reset(norm, self.env_cfg)


def leaf_input_dim(cfg: EnvConfig) -> int:
    return leaf_obs_dim(cfg) + 2 * N_EDGE_TAPS


def mu_input_dim(cfg: EnvConfig) -> int:
    return mu_obs_dim(cfg) + 2


def build_leaf_inputs(obs: np.ndarray, obs_columns: int) -> np.ndarray:
    """Network inputs from leaf observations: damped row profiles, the scalar
    indices, plus residual taps sampled around each leaf edge so the policy
    sees the local headroom its next move acts on."""
    obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    c = obs_columns
    rows = obs2[:, : 3 * c] * OBS_ROW_SCALE
    scalars = obs2[:, 3 * c :]
    residual = obs2[:, 2 * c : 3 * c]
    pa = np.rint(scalars[:, 0] * (c - 1)).astype(np.int64)
    pb = np.rint(scalars[:, 1] * (c - 1)).astype(np.int64)
    offs_a = np.arange(-N_EDGE_TAPS // 2, N_EDGE_TAPS // 2)
    offs_b = np.arange(1 - N_EDGE_TAPS // 2, 1 + N_EDGE_TAPS // 2)
    ia = np.clip(pa[:, None] + offs_a[None, :], 0, c - 1)
    ib = np.clip(pb[:, None] + offs_b[None, :], 0, c - 1)
    r = np.arange(obs2.shape[0])[:, None]
    taps = np.concatenate([residual[r, ia], residual[r, ib]], axis=1) * OBS_ROW_SCALE
    out = np.concatenate([rows, scalars, taps], axis=1)
    return out if np.asarray(obs).ndim == 2 else out[0]


def build_mu_inputs(obs: np.ndarray, obs_columns: int) -> np.ndarray:
    """Network inputs for the MU policy: damped pooled rows plus the mean
    residual inside the chosen aperture and the in-aperture headroom
    fraction, the two quantities the monitor unit trades off."""
    obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    c = obs_columns
    residual = obs2[:, :c]
    mask = obs2[:, c : 2 * c]
    weight = mask.sum(axis=1)
    safe = np.maximum(weight, 1e-12)
    inside_mean = (residual * mask).sum(axis=1) / safe
    headroom_frac = ((residual > 0) * mask).sum(axis=1) / safe
    extras = np.stack([inside_mean * OBS_ROW_SCALE, headroom_frac], axis=1)
    scaled = obs2.copy()
    scaled[:, :c] *= OBS_ROW_SCALE
    out = np.concatenate([scaled, extras], axis=1)
    return out if np.asarray(obs).ndim == 2 else out[0]


@dataclass
class _StepDecision:
    action_idx: np.ndarray     # (X, 2)
    mu_raw: float
    leaf_obs: np.ndarray       # (X, D) scaled net input
    mu_obs: np.ndarray         # (Dm,)
    leaf_logprob: np.ndarray   # (X,)
    mu_logprob: float
    value: np.ndarray          # (X,)


def policy_step(
    params: PolicyParams,
    state: EnvState,
    rng: np.random.Generator | None,
    with_value: bool = True,
) -> _StepDecision:
    """Choose all leaf actions then the MU action for the current control
    point. `rng=None` means deterministic mode: argmax leaves, mean MU."""
    cfg = state.cfg
    n_choices = params.n_choices
    obs = build_leaf_inputs(leaf_observation_matrix(state), cfg.obs_columns)
    out, _ = forward(params.leaf_net, obs)
    logits_a = out[:, :n_choices]
    logits_b = out[:, n_choices : 2 * n_choices]
    if rng is None:
        ia = logits_a.argmax(axis=1)
        ib = logits_b.argmax(axis=1)
    else:
        ia = categorical_sample(logits_a, rng)
        ib = categorical_sample(logits_b, rng)
    rows = np.arange(obs.shape[0])
    logp = log_softmax(logits_a)[rows, ia] + log_softmax(logits_b)[rows, ib]

    step = params.max_leaf_step
    new_a, new_b = enforce_arrays(state.a + (ia - step), state.b + (ib - step), state.n_cols)
    mu_view = observe_mu(state, np.stack([new_a, new_b], axis=1))
    mu_obs = build_mu_inputs(mu_view.vector(), cfg.obs_columns)
    mean_out, _ = forward(params.mu_net, mu_obs)
    mean = float(mean_out[0])
    log_std = float(params.mu_log_std[0])
    if rng is None:
        mu_raw = mean
    else:
        mu_raw = mean + math.exp(log_std) * float(rng.standard_normal())
    mu_logp, _, _, _ = gaussian_logprob_entropy(mean, log_std, mu_raw)

    if with_value:
        if params.shared:
            raw = out[:, 2 * n_choices]
        else:
            v, _ = forward(params.critic, obs)
            raw = v[:, 0]
        value = raw * params.value_scale + params.value_shift
    else:
        value = np.zeros(obs.shape[0])
    return _StepDecision(
        action_idx=np.stack([ia, ib], axis=1),
        mu_raw=float(mu_raw),
        leaf_obs=obs,
        mu_obs=mu_obs,
        leaf_logprob=logp,
        mu_logprob=float(mu_logp),
        value=value,
    )


@dataclass
class _EpisodeData:
    leaf_obs: np.ndarray
    mu_obs: np.ndarray
    idx: np.ndarray
    mu_action: np.ndarray
    leaf_logprob: np.ndarray
    mu_logprob: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    components: np.ndarray
    n_pairs: int


def _run_episode(
    source, params: PolicyParams, seed: int, greedy: bool
) -> _EpisodeData:
    rng = np.random.default_rng(seed)
    state = source(rng)
    cfg = state.cfg
    k_total, n = cfg.horizon, state.n_pairs
    dl, dm = leaf_input_dim(cfg), mu_input_dim(cfg)
    data = _EpisodeData(
        leaf_obs=np.empty((k_total, n, dl)),
        mu_obs=np.empty((k_total, dm)),
        idx=np.empty((k_total, n, 2), dtype=np.int64),
        mu_action=np.empty(k_total),
        leaf_logprob=np.empty((k_total, n)),
        mu_logprob=np.empty(k_total),
        reward=np.empty((k_total, n)),
        value=np.empty((k_total, n)),
        components=np.empty((k_total, n, 5)),
        n_pairs=n,
    )
    for k in range(k_total):
        decision = policy_step(params, state, None if greedy else rng)
        actions = decision.action_idx - params.max_leaf_step
        state, rewards, _ = step_cp(state, actions, decision.mu_raw)
        data.leaf_obs[k] = decision.leaf_obs
        data.mu_obs[k] = decision.mu_obs
        data.idx[k] = decision.action_idx
        data.mu_action[k] = decision.mu_raw
        data.leaf_logprob[k] = decision.leaf_logprob
        data.mu_logprob[k] = decision.mu_logprob
        data.reward[k] = rewards
        data.value[k] = decision.value
        data.components[k] = state.last_rewards.stacked()
    return data


def _run_episode_chunk(args) -> list[_EpisodeData]:
    source, params, seeds, greedy = args
    return [_run_episode(source, params, seed, greedy) for seed in seeds]


def collect_rollouts(
    source,
    params: PolicyParams,
    n_episodes: int,
    rng: np.random.Generator,
    greedy: bool = False,
    workers: int = 1,
) -> RolloutBuffer:
    """Roll out `n_episodes` fresh episodes from `source` under the current
    policy. Results are bit-identical for any worker count: every episode
    runs on its own seeded generator drawn here in order."""
    if n_episodes < 1:
        raise ContractError("need at least one episode")
    seeds = [int(s) for s in rng.integers(0, 2**62, size=n_episodes)]
    if workers > 1 and n_episodes > 1:
        n_workers = min(workers, n_episodes)
        chunks = [
            (source, params, seeds[w::n_workers], greedy) for w in range(n_workers)
        ]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_episode_chunk, chunks))
        episodes: list[_EpisodeData] = [None] * n_episodes  # type: ignore[list-item]
        for w, chunk in enumerate(results):
            for j, ep in enumerate(chunk):
                episodes[w + j * n_workers] = ep
    else:
        episodes = [_run_episode(source, params, seed, greedy) for seed in seeds]

    k_total = episodes[0].reward.shape[0]
    total = sum(ep.n_pairs for ep in episodes) * k_total
    dl = episodes[0].leaf_obs.shape[2]
    dm = episodes[0].mu_obs.shape[1]
    buf = RolloutBuffer(
        leaf_obs=np.empty((total, dl)),
        mu_obs=np.empty((total, dm)),
        idx_da=np.empty(total, dtype=np.int64),
        idx_db=np.empty(total, dtype=np.int64),
        mu_action=np.empty(total),
        leaf_logprob=np.empty(total),
        mu_logprob=np.empty(total),
        reward=np.empty(total),
        value=np.empty(total),
        done=np.zeros(total, dtype=bool),
        episode=np.empty(total, dtype=np.int64),
        pair_index=np.empty(total, dtype=np.int64),
        cp_index=np.empty(total, dtype=np.int64),
        reward_components=np.empty((total, 5)),
        traj_rows=np.empty((sum(ep.n_pairs for ep in episodes), k_total), dtype=np.int64),
        max_leaf_step=params.max_leaf_step,
    )
    offset = 0
    traj = 0
    for e, ep in enumerate(episodes):
        n = ep.n_pairs
        count = k_total * n
        sl = slice(offset, offset + count)
        buf.leaf_obs[sl] = ep.leaf_obs.reshape(count, dl)
        buf.mu_obs[sl] = np.repeat(ep.mu_obs, n, axis=0)
        buf.idx_da[sl] = ep.idx[:, :, 0].ravel()
        buf.idx_db[sl] = ep.idx[:, :, 1].ravel()
        buf.mu_action[sl] = np.repeat(ep.mu_action, n)
        buf.leaf_logprob[sl] = ep.leaf_logprob.ravel()
        buf.mu_logprob[sl] = np.repeat(ep.mu_logprob, n)
        buf.reward[sl] = ep.reward.ravel()
        buf.value[sl] = ep.value.ravel()
        buf.done[offset + (k_total - 1) * n : offset + count] = True
        buf.episode[sl] = e
        buf.pair_index[sl] = np.tile(np.arange(n), k_total)
        buf.cp_index[sl] = np.repeat(np.arange(k_total), n)
        buf.reward_components[sl] = ep.components.reshape(count, 5)
        rows = offset + np.arange(k_total)[None, :] * n + np.arange(n)[:, None]
        buf.traj_rows[traj : traj + n] = rows
        traj += n
        offset += count
    return buf


def compute_gae(
    buffer: RolloutBuffer, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Standard GAE over each (episode, leaf pair) trajectory; the horizon is
    a true terminal, so there is no bootstrap past the last control point.
    Returns (advantages, returns) and stores them on the buffer."""
    idx = buffer.traj_rows
    r = buffer.reward[idx]
    v = buffer.value[idx]
    k_total = idx.shape[1]
    adv = np.zeros_like(r)
    carry = np.zeros(idx.shape[0])
    for k in range(k_total - 1, -1, -1):
        next_v = v[:, k + 1] if k < k_total - 1 else 0.0
        delta = r[:, k] + gamma * next_v - v[:, k]
        carry = delta + gamma * lam * carry
        adv[:, k] = carry
    advantages = np.empty(len(buffer))
    advantages[idx.ravel()] = adv.ravel()
    returns = advantages + buffer.value
    buffer.advantages = advantages
    buffer.returns = returns
    return advantages, returns


def td0_targets(buffer: RolloutBuffer, gamma: float) -> np.ndarray:
    """Literal one-step value targets r + gamma*V(s') with terminal cutoff."""
    idx = buffer.traj_rows
    r = buffer.reward[idx]
    v = buffer.value[idx]
    tgt = r.copy()
    tgt[:, :-1] += gamma * v[:, 1:]
    out = np.empty(len(buffer))
    out[idx.ravel()] = tgt.ravel()
    return out


def probability_ratio(params: PolicyParams, transition: Transition) -> float:
    """exp[new (leaf+MU) log-density minus the stored old log-density]."""
    n_choices = params.n_choices
    out, _ = forward(params.leaf_net, transition.leaf_obs)
    s = params.max_leaf_step
    logp_a, _, _, _ = categorical_logprob_entropy(out[:n_choices], transition.da + s)
    logp_b, _, _, _ = categorical_logprob_entropy(
        out[n_choices : 2 * n_choices], transition.db + s
    )
    mean_out, _ = forward(params.mu_net, transition.mu_obs)
    logp_m, _, _, _ = gaussian_logprob_entropy(
        float(mean_out[0]), float(params.mu_log_std[0]), transition.mu_action
    )
    new_logp = float(logp_a) + float(logp_b) + float(logp_m)
    old_logp = transition.leaf_logprob + transition.mu_logprob
    return float(np.exp(new_logp - old_logp))


@dataclass
class MiniBatch:
    leaf_obs: np.ndarray
    mu_obs: np.ndarray
    idx_da: np.ndarray
    idx_db: np.ndarray
    mu_action: np.ndarray
    old_leaf_logprob: np.ndarray
    old_mu_logprob: np.ndarray
    advantages: np.ndarray     # already normalized
    returns: np.ndarray
    value_old: np.ndarray


def make_minibatch(buffer: RolloutBuffer, indices: np.ndarray) -> MiniBatch:
    """Gather one minibatch and normalize its advantages (mean 0, std 1)."""
    if buffer.advantages is None or buffer.returns is None:
        raise ContractError("compute advantages before building minibatches")
    adv = buffer.advantages[indices]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return MiniBatch(
        leaf_obs=buffer.leaf_obs[indices],
        mu_obs=buffer.mu_obs[indices],
        idx_da=buffer.idx_da[indices],
        idx_db=buffer.idx_db[indices],
        mu_action=buffer.mu_action[indices],
        old_leaf_logprob=buffer.leaf_logprob[indices],
        old_mu_logprob=buffer.mu_logprob[indices],
        advantages=adv,
        returns=buffer.returns[indices],
        value_old=buffer.value[indices],
    )


def policy_loss(
    params: PolicyParams, batch: MiniBatch, cfg: TrainConfig
) -> tuple[float, float, list[np.ndarray]]:
    """Clipped-surrogate policy loss with entropy bonus.

    Returns (loss, mean entropy, grads) with grads aligned to
    params.policy_parameters(). The probability ratio multiplies the leaf and
    MU densities, so both policies receive gradient through every transition.
    """
    n_choices = params.n_choices
    batch_size = batch.leaf_obs.shape[0]
    out, tape_l = forward(params.leaf_net, batch.leaf_obs)
    logits_a = out[:, :n_choices]
    logits_b = out[:, n_choices : 2 * n_choices]
    logp_a, ent_a, dlogp_a, dent_a = categorical_logprob_entropy(logits_a, batch.idx_da)
    logp_b, ent_b, dlogp_b, dent_b = categorical_logprob_entropy(logits_b, batch.idx_db)

    mean_out, tape_m = forward(params.mu_net, batch.mu_obs)
    mean = mean_out[:, 0]
    log_std = float(params.mu_log_std[0])
    logp_m, ent_m, dmean_m, dlogstd_m = gaussian_logprob_entropy(mean, log_std, batch.mu_action)

    log_ratio = (logp_a + logp_b + logp_m) - (batch.old_leaf_logprob + batch.old_mu_logprob)
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    objective = np.minimum(surr1, surr2)
    pg_loss = -float(objective.mean())
    entropy_leaf = float((ent_a + ent_b).mean())
    entropy_mu = float(ent_m)
    loss = pg_loss - cfg.entropy_coef * (entropy_leaf + entropy_mu)
    if not np.isfinite(loss):
        raise NumericError("non-finite policy loss")

    # d(pg_loss)/d(new_logp): the clipped branch kills the gradient exactly
    # when it is the active minimum (which only happens with ratio outside
    # the clip window).
    active = surr1 <= surr2
    dlogp = -(active * surr1) / batch_size

    c = cfg.entropy_coef
    dlogits_a = dlogp[:, None] * dlogp_a - (c / batch_size) * dent_a
    dlogits_b = dlogp[:, None] * dlogp_b - (c / batch_size) * dent_b
    dout = np.zeros_like(out)
    dout[:, :n_choices] = dlogits_a
    dout[:, n_choices : 2 * n_choices] = dlogits_b
    leaf_grads, _ = backward(params.leaf_net, tape_l, dout)

    dmean = (dlogp * dmean_m)[:, None]
    mu_grads, _ = backward(params.mu_net, tape_m, dmean)
    dlog_std = float((dlogp * dlogstd_m).sum()) - c
    grads = leaf_grads + mu_grads + [np.array([dlog_std])]
    return loss, entropy_leaf + entropy_mu, grads


def value_loss(
    params: PolicyParams, batch: MiniBatch, cfg: TrainConfig
) -> tuple[float, list[np.ndarray]]:
    """Clipped value loss against the chosen target (GAE return or TD0).

    Returns (loss, grads); grads align with the critic's parameters, or with
    the leaf net's parameters under a shared backbone. The regression runs in
    the critic's whitened output space (value_shift/value_scale).
    """
    n_choices = params.n_choices
    batch_size = batch.leaf_obs.shape[0]
    if params.shared:
        out, tape = forward(params.leaf_net, batch.leaf_obs)
        v = out[:, 2 * n_choices]
    else:
        out, tape = forward(params.critic, batch.leaf_obs)
        v = out[:, 0]
    returns_n = (batch.returns - params.value_shift) / params.value_scale
    value_old_n = (batch.value_old - params.value_shift) / params.value_scale
    diff = v - returns_n
    v_clipped = value_old_n + np.clip(v - value_old_n, -cfg.clip_eps, cfg.clip_eps)
    diff_clipped = v_clipped - returns_n
    sq = diff * diff
    sq_clipped = diff_clipped * diff_clipped
    loss = 0.5 * float(np.maximum(sq, sq_clipped).mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite value loss")

    use_unclipped = sq >= sq_clipped
    inside = np.abs(v - value_old_n) <= cfg.clip_eps
    dv = np.where(use_unclipped, diff, diff_clipped * inside) / batch_size
    dout = np.zeros_like(out)
    if params.shared:
        dout[:, 2 * n_choices] = dv
        grads, _ = backward(params.leaf_net, tape, dout)
    else:
        dout[:, 0] = dv
        grads, _ = backward(params.critic, tape, dout)
    return loss, grads


@dataclass
class Optimizers:
    policy: OptimizerState
    critic: OptimizerState | None   # None under a shared backbone

    @classmethod
    def create(cls, params: PolicyParams, cfg: TrainConfig) -> "Optimizers":
        horizon = max(1, cfg.iterations * cfg.update_epochs * cfg.minibatches)
        policy = OptimizerState.for_params(
            params.policy_parameters(), cfg.lr, cfg.weight_decay, horizon
        )
        critic = None
        if not params.shared:
            critic = OptimizerState.for_params(
                params.critic_parameters(), cfg.lr, cfg.weight_decay, horizon
            )
        return cls(policy, critic)


def update_minibatch(
    params: PolicyParams, opts: Optimizers, batch: MiniBatch, cfg: TrainConfig
) -> tuple[float, float, float]:
    """One gradient step on one minibatch; returns (policy, value, entropy)."""
    p_loss, entropy, p_grads = policy_loss(params, batch, cfg)
    v_loss, v_grads = value_loss(params, batch, cfg)
    v_grads = [cfg.value_coef * g for g in v_grads]
    if params.shared:
        n_leaf = len(params.leaf_net.parameters())
        combined = [p_grads[i] + v_grads[i] for i in range(n_leaf)] + p_grads[n_leaf:]
        clip_global_norm(combined, cfg.max_grad_norm)
        adamw_step(params.policy_parameters(), combined, opts.policy)
    else:
        clip_global_norm(p_grads, cfg.max_grad_norm)
        adamw_step(params.policy_parameters(), p_grads, opts.policy)
        clip_global_norm(v_grads, cfg.max_grad_norm)
        adamw_step(params.critic_parameters(), v_grads, opts.critic)
    clamp_log_std(params)
    return p_loss, v_loss, entropy


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict[str, float]]
    env_cfg: EnvConfig
    train_cfg: TrainConfig


def checkpoint_meta(env_cfg: EnvConfig) -> dict[str, float]:
    return {
        "horizon": float(env_cfg.horizon),
        "obs_columns": float(env_cfg.obs_columns),
        "mu_min": float(env_cfg.mu_range[0]),
        "mu_max": float(env_cfg.mu_range[1]),
        "obs_row_scale": OBS_ROW_SCALE,
    }


def train(
    train_cfg: TrainConfig,
    env_cfg: EnvConfig,
    corpus: list[FluenceGrid | np.ndarray],
    probe: list[FluenceGrid | np.ndarray] | None = None,
    workers: int = 1,
    metrics_path: str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
) -> TrainResult:
    """Run the full PPO loop over a corpus of target fluences.

    Writes one metrics row per iteration and refreshes the checkpoint after
    every iteration, so an aborted run leaves the last good state on disk.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    targets = [as_grid(g).values for g in corpus]
    probe_targets = [as_grid(g) for g in (probe if probe is not None else corpus[:8])]

    init_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    mu_lo, mu_hi = env_cfg.mu_range
    params = init_policy(
        leaf_input_dim(env_cfg),
        mu_input_dim(env_cfg),
        env_cfg.max_leaf_step,
        init_rng,
        shared=train_cfg.shared_backbone,
        mu_mean_init=0.5 * (mu_lo + mu_hi),
        mu_log_std_init=math.log(0.25 * (mu_hi - mu_lo)),
    )
    opts = Optimizers.create(params, train_cfg)
    source = EpisodeSource(targets, env_cfg, augment=train_cfg.augment_crops)
    rollout_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))
    update_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 3]))

    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        fh.flush()

    def save(path) -> None:
        save_checkpoint(os.fspath(path), pack_policy(params, checkpoint_meta(env_cfg)))

    if checkpoint_path is not None:
        save(checkpoint_path)

    metrics_rows: list[dict[str, float]] = []
    try:
        for iteration in range(train_cfg.iterations):
            lr_now = cosine_lr(opts.policy.step, opts.policy.base_lr, opts.policy.horizon)
            buffer = collect_rollouts(
                source, params, train_cfg.episodes_per_iter, rollout_rng, workers=workers
            )
            compute_gae(buffer, train_cfg.gamma, train_cfg.gae_lambda)
            if train_cfg.value_target == "td0":
                buffer.returns = td0_targets(buffer, train_cfg.gamma)
            if iteration == 0:
                # calibrate the critic's frozen affine head from the first batch
                params.value_shift = float(buffer.returns.mean())
                params.value_scale = float(buffer.returns.std() + 1e-8)

            p_losses, v_losses, entropies = [], [], []
            for _ in range(train_cfg.update_epochs):
                perm = update_rng.permutation(len(buffer))
                for chunk in np.array_split(perm, train_cfg.minibatches):
                    if chunk.size == 0:
                        continue
                    batch = make_minibatch(buffer, chunk)
                    pl, vl, ent = update_minibatch(params, opts, batch, train_cfg)
                    p_losses.append(pl)
                    v_losses.append(vl)
                    entropies.append(ent)

            episode_return = buffer.reward[buffer.traj_rows].sum(axis=1).mean()
            components = buffer.reward_components.mean(axis=0)
            probe_err = probe_mnse(probe_targets, params, env_cfg)
            row = {
                "iter": float(iteration),
                "mean_reward": float(episode_return),
                "r1": float(components[0]),
                "r2": float(components[1]),
                "r3": float(components[2]),
                "r4": float(components[3]),
                "r5": float(components[4]),
                "policy_loss": float(np.mean(p_losses)),
                "value_loss": float(np.mean(v_losses)),
                "entropy": float(np.mean(entropies)),
                "lr": float(lr_now),
                "probe_mnse": float(probe_err),
            }
            metrics_rows.append(row)
            if writer is not None:
                writer.writerow([repr(row[c]) if c != "iter" else int(row[c]) for c in METRICS_COLUMNS])
                fh.flush()
            if checkpoint_path is not None:
                save(checkpoint_path)
    finally:
        if fh is not None:
            fh.close()

    if checkpoint_path is not None:
        save(checkpoint_path)
    return TrainResult(params, metrics_rows, env_cfg, train_cfg)


def probe_mnse(
    probe: list[FluenceGrid], params: PolicyParams, env_cfg: EnvConfig
) -> float:
    pairs = []
    for grid in probe:
        plan = sequence(grid, params, env_cfg)
        pairs.append((grid, reconstruct(plan, grid.shape)))
    return mnse(pairs)


def rollout_plan(state: EnvState, params: PolicyParams) -> PlanSequence:
    """Greedy rollout on an already-normalized grid; returns the plan in the
    normalized coordinate space."""
    states: list[MachineState] = []
    for _ in range(state.cfg.horizon):
        decision = policy_step(params, state, None, with_value=False)
        actions = decision.action_idx - params.max_leaf_step
        state, _, _ = step_cp(state, actions, decision.mu_raw)
        states.append(state.machine)
    return PlanSequence(tuple(states), state.target.shape)


def sequence(
    target: FluenceGrid | np.ndarray,
    params: PolicyParams,
    env_cfg: EnvConfig,
    n_target_cp: int | None = None,
    ridge_cfg: RidgeConfig | None = None,
) -> PlanSequence:
    """Full deterministic inference: crop, roll out greedily, map the leaf
    positions back, merge down to the requested control-point count, then
    ridge-refine the monitor units against the original target."""
    grid = as_grid(target)
    roi = detect_roi(grid)
    box = make_crop(roi, grid.shape, "inference")
    norm = crop_and_resize(grid, box, env_cfg.obs_columns)
    state = reset(norm, env_cfg)
    norm_plan = rollout_plan(state, params)
    plan = _map_plan_back(norm_plan, box, env_cfg.obs_columns, grid.shape)
    if n_target_cp is not None:
        plan = merge_control_points(plan, n_target_cp)
    if ridge_cfg is None:
        ridge_cfg = RidgeConfig(mu_max=env_cfg.mu_range[1])
    return ridge_refine(grid, plan, ridge_cfg)


def random_sequence(
    target: FluenceGrid | np.ndarray,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    n_target_cp: int | None = None,
    ridge_cfg: RidgeConfig | None = None,
) -> PlanSequence:
    """The uniform-random-policy analogue of `sequence`, same pipeline."""
    grid = as_grid(target)
    roi = detect_roi(grid)
    box = make_crop(roi, grid.shape, "inference")
    norm = crop_and_resize(grid, box, env_cfg.obs_columns)
    state = reset(norm, env_cfg)
    s = env_cfg.max_leaf_step
    states: list[MachineState] = []
    for _ in range(env_cfg.horizon):
        actions = rng.integers(-s, s + 1, size=(state.n_pairs, 2))
        mu = float(rng.uniform(*env_cfg.mu_range))
        state, _, _ = step_cp(state, actions, mu)
        states.append(state.machine)
    norm_plan = PlanSequence(tuple(states), state.target.shape)
    plan = _map_plan_back(norm_plan, box, env_cfg.obs_columns, grid.shape)
    if n_target_cp is not None:
        plan = merge_control_points(plan, n_target_cp)
    if ridge_cfg is None:
        ridge_cfg = RidgeConfig(mu_max=env_cfg.mu_range[1])
    return ridge_refine(grid, plan, ridge_cfg)


def _map_plan_back(
    norm_plan: PlanSequence, box, columns: int, grid_shape: tuple[int, int]
) -> PlanSequence:
    positions = norm_plan.positions().astype(np.float64)
    mapped = map_positions_back(positions, box, columns)
    states = []
    for k, st in enumerate(norm_plan.states):
        pairs = tuple(LeafPair(int(a), int(b)) for a, b in mapped[k])
        states.append(MachineState(pairs, st.mu))
    return PlanSequence(tuple(states), grid_shape, crop_record=box)
