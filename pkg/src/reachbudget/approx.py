"""Small MLPs with explicit backprop, a Gaussian policy head, and Adam.

Everything is plain float64 numpy. Networks are two tanh hidden layers
by default. Gradients come from hand-written reverse mode; the
finite_difference_check helper is the tool the test suite points at
them.

Checkpoints are zip archives of .npy entries written with a pinned
timestamp so identical parameters produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MlpParams:
    """Weights and biases of a fully connected net.

    weights[i] has shape (fan_in, fan_out); activation applies after
    every layer except the last. Supported activations: "tanh" and
    "identity".
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def trainable(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:fan_in, :fan_out])


def mlp_init(
    sizes: tuple[int, ...],
    rng: np.random.Generator,
    activation: str = "tanh",
    final_scale: float = 1.0,
) -> MlpParams:
    """Orthogonally initialized net; final_scale shrinks the last layer
    (0.01 for policy heads keeps the initial actions near zero)."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if activation not in ("tanh", "identity"):
        raise ValueError(f"unsupported activation {activation!r}")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        gain = final_scale if last else np.sqrt(2.0)
        weights.append(_orthogonal(rng, n_in, n_out, gain))
        biases.append(np.zeros(n_out))
    return MlpParams(weights=weights, biases=biases, activation=activation)


def mlp_forward(
    params: MlpParams, x: np.ndarray, return_cache: bool = False
):
    """Forward pass; x is (n, d_in) or (d_in,).

    With return_cache the post-activation of every layer comes back for
    reuse by mlp_backward.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite network input")
    single = arr.ndim == 1
    h = arr[None, :] if single else arr
    cache = [h]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n_layers - 1 and params.activation == "tanh":
            h = np.tanh(h)
        cache.append(h)
    out = h[0] if single else h
    if return_cache:
        return out, cache
    return out


def mlp_backward(
    params: MlpParams,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    cache: list[np.ndarray] | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of sum(upstream_grad * output).

    Returns (grads, dx) with grads interleaved as (dW0, db0, dW1, ...)
    matching MlpParams.trainable() order; dx is the gradient with
    respect to the input batch.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if cache is None:
        _, cache = mlp_forward(params, arr, return_cache=True)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        up = up[None, :]
    n_layers = len(params.weights)
    grads: list[np.ndarray] = [np.empty(0)] * (2 * n_layers)
    delta = up  # gradient at the current layer's pre-activation
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = cache[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0 and params.activation == "tanh":
            # cache[i] is the tanh output feeding layer i
            delta = delta * (1.0 - cache[i] ** 2)
    dx = delta[0] if single else delta
    return grads, dx


# -- Gaussian policy head ------------------------------------------------------


@dataclass
class GaussianPolicyParams:
    """Diagonal Gaussian policy: MLP mean, state-independent log-std.

    Sampling draws from N(mean, diag(std^2)) and clamps into the action
    box; densities and importance ratios are always evaluated on the
    raw pre-clamp draw, which the rollout buffer must record.
    """

    trunk: MlpParams
    log_std: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray

    def trainable(self) -> list[np.ndarray]:
        return [*self.trunk.trainable(), self.log_std]


def policy_init(
    obs_dim: int,
    action_low: np.ndarray,
    action_high: np.ndarray,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (256, 256),
    init_log_std: float = 0.0,
) -> GaussianPolicyParams:
    trunk = mlp_init((obs_dim, *hidden, len(action_low)), rng, final_scale=0.01)
    return GaussianPolicyParams(
        trunk=trunk,
        log_std=np.full(len(action_low), init_log_std, dtype=np.float64),
        action_low=np.asarray(action_low, dtype=np.float64),
        action_high=np.asarray(action_high, dtype=np.float64),
    )


def _clamped_std(params: GaussianPolicyParams) -> np.ndarray:
    return np.exp(np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX))


def policy_sample(
    params: GaussianPolicyParams, obs: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw actions; returns (clamped, raw, log_prob of the raw draw)."""
    mean = mlp_forward(params.trunk, obs)
    std = _clamped_std(params)
    raw = mean + std * rng.standard_normal(mean.shape)
    clamped = np.clip(raw, params.action_low, params.action_high)
    return clamped, raw, policy_log_prob(params, obs, raw)


def policy_log_prob(
    params: GaussianPolicyParams, obs: np.ndarray, raw_action: np.ndarray
) -> np.ndarray:
    mean = mlp_forward(params.trunk, obs)
    std = _clamped_std(params)
    zed = (np.asarray(raw_action) - mean) / std
    per_dim = -0.5 * zed**2 - np.log(std) - 0.5 * _LOG_2PI
    return per_dim.sum(axis=-1)


def policy_entropy(params: GaussianPolicyParams) -> float:
    """Exact entropy; state-independent because the std is."""
    std = _clamped_std(params)
    return float(np.sum(0.5 * np.log(2.0 * np.pi * np.e) + np.log(std)))


def policy_mode(params: GaussianPolicyParams, obs: np.ndarray) -> np.ndarray:
    mean = mlp_forward(params.trunk, obs)
    return np.clip(mean, params.action_low, params.action_high)


def policy_logp_backward(
    params: GaussianPolicyParams,
    obs: np.ndarray,
    raw_action: np.ndarray,
    upstream: np.ndarray,
    cache: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Gradients of sum(upstream * log_prob) in trainable() order.

    The log-std entries stop receiving gradient outside the clamp range
    (the clamp is a hard saturation, not a reparameterization).
    """
    if cache is None:
        mean, cache = mlp_forward(params.trunk, obs, return_cache=True)
    else:
        mean = cache[-1]
    std = _clamped_std(params)
    up = np.asarray(upstream, dtype=np.float64)
    diff = (np.asarray(raw_action) - mean) / std
    d_mean = up[:, None] * diff / std
    trunk_grads, _ = mlp_backward(params.trunk, obs, d_mean, cache=cache)
    d_log_std = (up[:, None] * (diff**2 - 1.0)).sum(axis=0)
    active = (params.log_std > LOG_STD_MIN) & (params.log_std < LOG_STD_MAX)
    d_log_std = np.where(active, d_log_std, 0.0)
    return [*trunk_grads, d_log_std]


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    """Adam accumulators plus a linear learning-rate decay schedule.

    The effective rate at update t (0-based) is
    base_lr * (1 - t / total_updates), floored at 0; pass
    total_updates=None for a constant rate.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    base_lr: float
    total_updates: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls, params: list[np.ndarray], base_lr: float, total_updates: int | None = None
    ) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            base_lr=base_lr,
            total_updates=total_updates,
        )

    def effective_lr(self) -> float:
        if self.total_updates is None:
            return self.base_lr
        frac = min(1.0, self.step / self.total_updates)
        return self.base_lr * (1.0 - frac)


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> list[np.ndarray]:
    """One update, in place on params; returns params for chaining."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads length mismatch with optimizer state")
    lr = state.effective_lr()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g**2
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays + JSON metadata as a byte-stable .npz-style zip."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise ValueError(f"{path}: not a checkpoint (missing meta.json)")
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        for name in names:
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    return arrays, meta


def mlp_to_arrays(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}_w{i}"] = w
        out[f"{prefix}_b{i}"] = b
    return out


def mlp_from_arrays(
    prefix: str, arrays: dict[str, np.ndarray], activation: str = "tanh"
) -> MlpParams:
    weights, biases = [], []
    i = 0
    while f"{prefix}_w{i}" in arrays:
        weights.append(np.array(arrays[f"{prefix}_w{i}"], dtype=np.float64))
        biases.append(np.array(arrays[f"{prefix}_b{i}"], dtype=np.float64))
        i += 1
    if not weights:
        raise ValueError(f"no arrays under prefix {prefix!r}")
    for w, b in zip(weights, biases):
        if w.shape[1] != b.shape[0]:
            raise ValueError(f"{prefix}: weight/bias shape mismatch {w.shape} vs {b.shape}")
    return MlpParams(weights=weights, biases=biases, activation=activation)


def policy_to_arrays(params: GaussianPolicyParams) -> dict[str, np.ndarray]:
    out = mlp_to_arrays("policy", params.trunk)
    out["policy_log_std"] = params.log_std
    out["policy_action_low"] = params.action_low
    out["policy_action_high"] = params.action_high
    return out


def policy_from_arrays(arrays: dict[str, np.ndarray]) -> GaussianPolicyParams:
    return GaussianPolicyParams(
        trunk=mlp_from_arrays("policy", arrays),
        log_std=np.array(arrays["policy_log_std"], dtype=np.float64),
        action_low=np.array(arrays["policy_action_low"], dtype=np.float64),
        action_high=np.array(arrays["policy_action_high"], dtype=np.float64),
    )


# -- gradient checking ---------------------------------------------------------


def finite_difference_check(
    loss_and_grad,
    params: list[np.ndarray],
    rng: np.random.Generator,
    eps: float = 1e-5,
    coords_per_array: int = 25,
) -> float:
    """Largest relative error between analytic and central differences.

    loss_and_grad(params) must return (scalar loss, grads aligned with
    params). Checks a random subset of coordinates per array; exact
    zeros on both sides count as agreement. Near-kink coordinates are
    the caller's responsibility (jitter parameters first).
    """
    _, grads = loss_and_grad(params)
    worst = 0.0
    for arr, g in zip(params, grads):
        g_flat = np.asarray(g).reshape(-1)
        n = arr.size
        idx = np.arange(n) if n <= coords_per_array else rng.choice(n, coords_per_array, False)
        for i in idx:
            # arr.flat writes through regardless of memory layout
            orig = arr.flat[i]
            arr.flat[i] = orig + eps
            hi, _ = loss_and_grad(params)
            arr.flat[i] = orig - eps
            lo, _ = loss_and_grad(params)
            arr.flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = g_flat[i]
            scale = max(abs(fd), abs(an))
            if scale < 1e-6:
                continue
            worst = max(worst, abs(fd - an) / scale)
    return worst
