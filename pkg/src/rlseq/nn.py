"""Minimal dense-network substrate: tanh MLPs with hand-written backprop,
categorical/Gaussian heads, AdamW with cosine learning-rate decay, and the
binary checkpoint format.

Everything is float64 numpy; forward/backward operate on (batch, dim) arrays
and are deterministic given parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ParseError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


# -- dense nets ---------------------------------------------------------------


@dataclass
class DenseNet:
    """An MLP with tanh hidden layers and an identity output layer.

    weights[i] has shape (in_i, out_i); consecutive dims chain.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class Tape:
    """Activation record from one forward pass; enough for exact gradients."""

    inputs: list[np.ndarray]   # input to each layer
    outputs: list[np.ndarray]  # post-activation output of each layer
    batched: bool


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    m = rng.normal(size=shape)
    q, r = np.linalg.qr(m if shape[0] >= shape[1] else m.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


def dense_init(
    dims: list[int],
    rng: np.random.Generator,
    out_gain: float = 1.0,
) -> DenseNet:
    """Orthogonal initialization: gain sqrt(2) on hidden layers, `out_gain`
    on the output layer, zero biases."""
    if len(dims) < 2:
        raise ContractError("need at least input and output dims")
    weights, biases = [], []
    for i in range(len(dims) - 1):
        gain = out_gain if i == len(dims) - 2 else math.sqrt(2.0)
        weights.append(orthogonal((dims[i], dims[i + 1]), gain, rng))
        biases.append(np.zeros(dims[i + 1]))
    return DenseNet(weights, biases)


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the net on a (batch, in) or (in,) array."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = np.atleast_2d(x)
    if h.shape[1] != net.input_dim:
        raise ContractError(f"input dim {h.shape[1]} != net input dim {net.input_dim}")
    n_layers = len(net.weights)
    inputs, outputs = [], []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        h = z if i == n_layers - 1 else np.tanh(z)
        outputs.append(h)
    tape = Tape(inputs, outputs, batched)
    return (h if batched else h[0]), tape


def backward(
    net: DenseNet, tape: Tape, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients.

    Returns (param_grads, input_grad); param_grads aligns with
    net.parameters() and is summed over the batch.
    """
    dy = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    if len(tape.inputs) != len(net.weights):
        raise ContractError("tape does not match network")
    if dy.shape != tape.outputs[-1].shape:
        raise ContractError(
            f"output grad shape {dy.shape} != output shape {tape.outputs[-1].shape}"
        )
    n_layers = len(net.weights)
    grads: list[np.ndarray] = [np.empty(0)] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            dy = dy * (1.0 - tape.outputs[i] ** 2)  # tanh'
        grads[2 * i] = tape.inputs[i].T @ dy
        grads[2 * i + 1] = dy.sum(axis=0)
        dy = dy @ net.weights[i].T
    return grads, (dy if tape.batched else dy[0])


# -- distribution heads -------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_logprob_entropy(
    logits: np.ndarray, action_index: np.ndarray | int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Log-probability of chosen indices, Shannon entropy, and gradients.

    Works on (batch, n) logits with (batch,) indices or on a single row.
    Returns (logprob, entropy, dlogprob_dlogits, dentropy_dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    batched = logits.ndim == 2
    z = np.atleast_2d(logits)
    idx = np.atleast_1d(np.asarray(action_index, dtype=np.int64))
    logp = log_softmax(z)
    p = np.exp(logp)
    rows = np.arange(z.shape[0])
    chosen = logp[rows, idx]
    entropy = -(p * logp).sum(axis=1)
    dlogp = -p.copy()
    dlogp[rows, idx] += 1.0
    dent = -p * (logp + entropy[:, None])
    if batched:
        return chosen, entropy, dlogp, dent
    return chosen[0], entropy[0], dlogp[0], dent[0]


def categorical_sample(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling per row of (batch, n) logits."""
    p = np.exp(log_softmax(np.atleast_2d(logits)))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0])
    idx = (u[:, None] > cdf).sum(axis=1).astype(np.int64)
    return np.minimum(idx, p.shape[1] - 1)


def gaussian_logprob_entropy(
    mean: np.ndarray | float, log_std: float, value: np.ndarray | float
) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Normal log-density, entropy, and gradients wrt (mean, log_std).

    Entropy is 0.5*ln(2*pi*e*sigma^2); dentropy/dlog_std is 1.
    """
    mean = np.asarray(mean, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    inv_var = np.exp(-2.0 * log_std)
    diff = value - mean
    logprob = -0.5 * diff * diff * inv_var - log_std - 0.5 * _LOG_2PI
    entropy = 0.5 * (_LOG_2PI + 1.0) + log_std
    dmean = diff * inv_var
    dlog_std = diff * diff * inv_var - 1.0
    return logprob, entropy, dmean, dlog_std


# -- optimizer ----------------------------------------------------------------


def cosine_lr(step: int, base_lr: float, horizon: int) -> float:
    """Cosine annealing from base_lr at step 0 down to 0 at step == horizon."""
    t = min(max(step, 0), horizon)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


@dataclass
class OptimizerState:
    """AdamW state for one list of parameter arrays.

    The update order per step is: decoupled weight decay
    (p *= 1 - lr*wd), then the Adam moment update with bias correction
    (t = steps completed including this one). lr follows the cosine schedule
    evaluated at the pre-update step counter.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon: int = 1

    @classmethod
    def for_params(
        cls,
        params: list[np.ndarray],
        base_lr: float = 1e-4,
        weight_decay: float = 1e-4,
        horizon: int = 1,
    ) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            base_lr=base_lr,
            weight_decay=weight_decay,
            horizon=horizon,
        )


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], opt: OptimizerState) -> None:
    """One AdamW update, in place on `params` and `opt`."""
    if len(params) != len(opt.m) or len(grads) != len(params):
        raise ContractError("params/grads/optimizer length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; aborting update")
    lr = cosine_lr(opt.step, opt.base_lr, opt.horizon)
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        p *= 1.0 - lr * opt.weight_decay
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale `grads` in place so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# -- the three policy/critic architectures ------------------------------------


HIDDEN_POLICY = 128
HIDDEN_MU = 64


@dataclass
class PolicyParams:
    """Parameters of the leaf policy, MU policy, and critic.

    With a shared backbone the leaf net's final layer emits the two action
    heads plus one value output and `critic` is None.

    The critic regresses in a whitened space: its raw output maps to a value
    estimate through the frozen affine head value_scale * out + value_shift,
    calibrated once from the first rollout batch so arbitrary reward scales
    cannot stall the value function.
    """

    leaf_net: DenseNet
    mu_net: DenseNet
    mu_log_std: np.ndarray  # shape (1,)
    critic: DenseNet | None
    max_leaf_step: int
    shared: bool
    value_shift: float = 0.0
    value_scale: float = 1.0

    @property
    def n_choices(self) -> int:
        return 2 * self.max_leaf_step + 1

    def policy_parameters(self) -> list[np.ndarray]:
        return self.leaf_net.parameters() + self.mu_net.parameters() + [self.mu_log_std]

    def critic_parameters(self) -> list[np.ndarray]:
        if self.critic is None:
            return []
        return self.critic.parameters()


def init_policy(
    leaf_obs_dim: int,
    mu_obs_dim: int,
    max_leaf_step: int,
    rng: np.random.Generator,
    shared: bool = False,
    mu_mean_init: float = 0.0,
    mu_log_std_init: float = 0.0,
) -> PolicyParams:
    """Orthogonal-init policy/critic stack.

    `mu_mean_init` biases the MU head so the initial Gaussian sits inside the
    machine's MU range rather than below its clamp; `mu_log_std_init` sizes
    the initial exploration relative to that range.
    """
    n_choices = 2 * max_leaf_step + 1
    head = 2 * n_choices + (1 if shared else 0)
    leaf_net = dense_init([leaf_obs_dim, HIDDEN_POLICY, HIDDEN_POLICY, head], rng, out_gain=0.01)
    if shared:
        # the value slice of the shared head wants the critic's unit gain
        leaf_net.weights[-1][:, 2 * n_choices :] *= 100.0
        critic = None
    else:
        critic = dense_init([leaf_obs_dim, HIDDEN_POLICY, HIDDEN_POLICY, 1], rng, out_gain=1.0)
    mu_net = dense_init([mu_obs_dim, HIDDEN_MU, HIDDEN_MU, 1], rng, out_gain=0.01)
    mu_net.biases[-1][0] = mu_mean_init
    return PolicyParams(
        leaf_net=leaf_net,
        mu_net=mu_net,
        mu_log_std=np.full(1, float(mu_log_std_init)),
        critic=critic,
        max_leaf_step=max_leaf_step,
        shared=shared,
    )


def clamp_log_std(params: PolicyParams) -> None:
    np.clip(params.mu_log_std, LOG_STD_MIN, LOG_STD_MAX, out=params.mu_log_std)


# -- checkpoint format ---------------------------------------------------------

_MAGIC = b"RLS1"


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Versioned binary: magic, then per tensor (u32 name length, name bytes,
    u32 rank, u32 dims..., little-endian float64 payload), then a trailing
    u64 checksum = sum of all payload bytes mod 2^64."""
    blob = bytearray(_MAGIC)
    checksum = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        name_b = name.encode("utf-8")
        blob += np.uint32(len(name_b)).tobytes()
        blob += name_b
        blob += np.uint32(arr.ndim).tobytes()
        for d in arr.shape:
            blob += np.uint32(d).tobytes()
        payload = arr.astype("<f8").tobytes()
        checksum += int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.int64))
        blob += payload
    blob += np.uint64(checksum % (1 << 64)).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    body, tail = blob[len(_MAGIC) : -8], blob[-8:]
    stored_sum = int(np.frombuffer(tail, dtype="<u8")[0])
    tensors: dict[str, np.ndarray] = {}
    checksum = 0
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise ParseError(f"{path}: truncated checkpoint")
        chunk = body[off : off + n]
        off += n
        return chunk

    while off < len(body):
        name_len = int(np.frombuffer(take(4), dtype="<u4")[0])
        if name_len == 0 or name_len > 4096:
            raise ParseError(f"{path}: corrupt tensor name length {name_len}")
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path}: corrupt tensor name") from exc
        rank = int(np.frombuffer(take(4), dtype="<u4")[0])
        if rank > 8:
            raise ParseError(f"{path}: corrupt tensor rank {rank}")
        dims = [int(np.frombuffer(take(4), dtype="<u4")[0]) for _ in range(rank)]
        count = 1
        for d in dims:
            count *= d
        if count > 100_000_000:
            raise ParseError(f"{path}: corrupt tensor dims {dims}")
        payload = take(8 * count)
        checksum += int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if name in tensors:
            raise ParseError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = arr
    if checksum % (1 << 64) != stored_sum:
        raise ParseError(f"{path}: checksum mismatch (corrupt checkpoint)")
    return tensors


def pack_policy(params: PolicyParams, meta: dict[str, float]) -> dict[str, np.ndarray]:
    """Flatten policy parameters plus scalar metadata into named tensors."""
    tensors: dict[str, np.ndarray] = {}
    for prefix, net in (("leaf", params.leaf_net), ("mu", params.mu_net)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            tensors[f"{prefix}/w{i}"] = w
            tensors[f"{prefix}/b{i}"] = b
    if params.critic is not None:
        for i, (w, b) in enumerate(zip(params.critic.weights, params.critic.biases)):
            tensors[f"critic/w{i}"] = w
            tensors[f"critic/b{i}"] = b
    tensors["mu/log_std"] = params.mu_log_std
    tensors["meta/max_leaf_step"] = np.array(float(params.max_leaf_step))
    tensors["meta/shared"] = np.array(1.0 if params.shared else 0.0)
    tensors["meta/value_shift"] = np.array(params.value_shift)
    tensors["meta/value_scale"] = np.array(params.value_scale)
    for key, value in meta.items():
        tensors[f"meta/{key}"] = np.array(float(value))
    return tensors


def _unpack_net(tensors: dict[str, np.ndarray], prefix: str) -> DenseNet:
    weights, biases = [], []
    i = 0
    while f"{prefix}/w{i}" in tensors:
        weights.append(tensors[f"{prefix}/w{i}"])
        biases.append(tensors[f"{prefix}/b{i}"])
        i += 1
    if not weights:
        raise ParseError(f"checkpoint is missing network {prefix!r}")
    return DenseNet(weights, biases)


def unpack_policy(tensors: dict[str, np.ndarray]) -> tuple[PolicyParams, dict[str, float]]:
    meta = {
        key[len("meta/") :]: float(np.ravel(val)[0])
        for key, val in tensors.items()
        if key.startswith("meta/")
    }
    if "max_leaf_step" not in meta or "shared" not in meta:
        raise ParseError("checkpoint is missing policy metadata")
    shared = meta["shared"] != 0.0
    params = PolicyParams(
        leaf_net=_unpack_net(tensors, "leaf"),
        mu_net=_unpack_net(tensors, "mu"),
        mu_log_std=tensors["mu/log_std"].reshape(1).copy(),
        critic=None if shared else _unpack_net(tensors, "critic"),
        max_leaf_step=int(meta["max_leaf_step"]),
        shared=shared,
        value_shift=meta.get("value_shift", 0.0),
        value_scale=meta.get("value_scale", 1.0),
    )
    return params, meta
