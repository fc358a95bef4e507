"""Minimal dense-network machinery on float64 numpy.

Fixed-topology MLPs (rectifier hiddens, linear output) with hand-written
backprop, Adam, a tanh-squashed Gaussian policy head with exact
log-probabilities, a central-finite-difference gradient checker, and a raw
little-endian checkpoint format. Determinism and verifiability outrank
speed at desk scale, hence no autograd framework.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_SQUASH_EPS = 1e-6
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
# float64 tanh saturates to exactly +-1 for |u| > ~19; keep actions strictly
# interior so downstream code can rely on the open interval.
_ACTION_LIMIT = float(np.nextafter(1.0, 0.0))


def _squash(u: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(u), -_ACTION_LIMIT, _ACTION_LIMIT)


def _sech2(u: np.ndarray) -> np.ndarray:
    """1 - tanh(u)^2, computed without the catastrophic cancellation that
    1 - tanh(u)**2 suffers near saturation (it feeds a log that would
    amplify the rounding jag a million-fold)."""
    t = np.exp(-2.0 * np.abs(u))
    return 4.0 * t / (1.0 + t) ** 2

CHECKPOINT_MAGIC = b"SLOTBENCH-CKPT-v1\n"


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("all layer dims must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_names(self) -> list[str]:
        return [f"{k}{i}" for i in range(len(self.layer_dims)) for k in ("W", "b")]


@dataclass
class ParamStore:
    """Named float64 arrays plus matching Adam moments and a step counter."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in sorted(self.params)])

    def assign_flat(self, flat: np.ndarray) -> None:
        i = 0
        for n in sorted(self.params):
            p = self.params[n]
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "ParamStore":
        return ParamStore(
            {n: p.copy() for n, p in self.params.items()},
            {n: p.copy() for n, p in self.m.items()},
            {n: p.copy() for n, p in self.v.items()},
            self.step,
        )


def init_mlp(spec: MLPSpec, rng: np.random.Generator) -> ParamStore:
    """He-initialized weights, zero biases."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return ParamStore(params)


def mlp_forward(
    spec: MLPSpec, params: dict[str, np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Forward pass. Returns (outputs, cache for backward)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input width {x.shape[1]} != spec input_dim {spec.input_dim}")
    acts = [x]
    pre = []
    n_layers = len(spec.layer_dims)
    h = x
    for i in range(n_layers):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    cache = {"acts": acts, "pre": pre, "spec": spec, "params": params, "squeeze": squeeze}
    return (h[0] if squeeze else h), cache


def mlp_backward(
    cache: dict, grad_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backward pass from output gradients to parameter and input gradients."""
    spec: MLPSpec = cache["spec"]
    params = cache["params"]
    acts, pre = cache["acts"], cache["pre"]
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["squeeze"] and g.ndim == 1:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(f"grad shape {g.shape} != output shape {acts[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    n_layers = len(spec.layer_dims)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (pre[i] > 0.0)
        grads[f"W{i}"] = acts[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
    return grads, (g[0] if cache["squeeze"] else g)


def adam_update(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam step, applied in place."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def policy_sample(
    mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-squashed Gaussian sample and its exact log-probability.

    u = mean + exp(log_std) * noise; action = tanh(u);
    log_prob = sum over dims of log N(u) - log(1 - tanh(u)^2 + 1e-6).
    """
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * noise
    action = _squash(u)
    log_prob = (
        -_LOG_SQRT_2PI - log_std - 0.5 * noise**2
        - np.log(_sech2(u) + _SQUASH_EPS)
    ).sum(axis=-1)
    return action, log_prob


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance


def _activation_pattern(spec: MLPSpec, params: dict, x: np.ndarray) -> np.ndarray:
    _, cache = mlp_forward(spec, params, x)
    if not cache["pre"][:-1]:
        return np.zeros(0, dtype=bool)
    return np.concatenate([(z > 0.0).ravel() for z in cache["pre"][:-1]])


def grad_check(
    spec: MLPSpec,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    loss_fn,
    tolerance: float = 1e-5,
    h: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn maps network outputs to (scalar loss, dL/doutputs). Parameters
    whose perturbation flips a rectifier activation state are excluded
    (subgradient ambiguity at the kink), not failed.
    """
    y, cache = mlp_forward(spec, params, x)
    _, dy = loss_fn(y)
    analytic, _ = mlp_backward(cache, dy)

    max_rel = 0.0
    checked = 0
    excluded = 0
    work = {n: p.copy() for n, p in params.items()}
    for name in sorted(params):
        p = work[name]
        flat = p.ravel()
        a_flat = analytic[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            pat_hi = _activation_pattern(spec, work, x)
            y_hi, _ = mlp_forward(spec, work, x)
            l_hi, _ = loss_fn(y_hi)
            flat[idx] = orig - h
            pat_lo = _activation_pattern(spec, work, x)
            y_lo, _ = mlp_forward(spec, work, x)
            l_lo, _ = loss_fn(y_lo)
            flat[idx] = orig
            if pat_hi.shape == pat_lo.shape and not np.array_equal(pat_hi, pat_lo):
                excluded += 1
                continue
            fd = (l_hi - l_lo) / (2.0 * h)
            rel = abs(a_flat[idx] - fd) / max(1e-8, abs(a_flat[idx]), abs(fd))
            max_rel = max(max_rel, rel)
            checked += 1
    return GradCheckReport(max_rel, checked, excluded, tolerance)


class ActorNet:
    """MLP trunk whose output splits into mean and log-std heads, with
    reparameterized sampling and a hand-derived backward pass."""

    def __init__(self, obs_dim: int, action_dim: int,
                 hidden: tuple[int, ...] = (256, 256),
                 rng: np.random.Generator | None = None):
        self.action_dim = action_dim
        self.spec = MLPSpec(obs_dim, 2 * action_dim, hidden)
        self.store = init_mlp(self.spec, rng if rng is not None else np.random.default_rng())

    def forward(self, obs: np.ndarray):
        out, cache = mlp_forward(self.spec, self.store.params, np.atleast_2d(obs))
        mean = out[:, : self.action_dim]
        log_std_raw = out[:, self.action_dim :]
        return mean, log_std_raw, cache

    def sample(self, obs: np.ndarray, noise: np.ndarray):
        """Returns (action, log_prob, cache-for-backward)."""
        mean, log_std_raw, cache = self.forward(obs)
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * noise
        action = _squash(u)
        sech2 = _sech2(u)
        log_prob = (
            -_LOG_SQRT_2PI - log_std - 0.5 * noise**2
            - np.log(sech2 + _SQUASH_EPS)
        ).sum(axis=-1)
        scache = {
            "cache": cache,
            "action": action,
            "sech2": sech2,
            "std": std,
            "noise": noise,
            "clip_mask": (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX),
        }
        return action, log_prob, scache

    def backward(self, scache: dict, d_action: np.ndarray, d_log_prob: np.ndarray):
        """Gradients of a scalar loss w.r.t. actor parameters, given its
        gradients w.r.t. the sampled action and the log-probability.

        The noise draw is held fixed (reparameterization), so the Gaussian
        -0.5*noise^2 term carries no parameter gradient; u feeds the loss
        only through action = tanh(u) and the squash correction.
        """
        a = scache["action"]
        sech2 = scache["sech2"]
        dlogp_du = 2.0 * a * sech2 / (sech2 + _SQUASH_EPS)
        dlp = d_log_prob[:, None]
        g_u = d_action * sech2 + dlp * dlogp_du
        g_mean = g_u
        g_log_std = (g_u * scache["std"] * scache["noise"] - dlp) * scache["clip_mask"]
        grad_out = np.concatenate([g_mean, g_log_std], axis=1)
        grads, _ = mlp_backward(scache["cache"], grad_out)
        return grads

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        mean, _, _ = self.forward(obs)
        return _squash(mean[0] if np.asarray(obs).ndim == 1 else mean)


class CriticNet:
    """Q(s, a) MLP over the concatenated observation and action."""

    def __init__(self, obs_dim: int, action_dim: int,
                 hidden: tuple[int, ...] = (256, 256),
                 rng: np.random.Generator | None = None):
        self.obs_dim = obs_dim
        self.spec = MLPSpec(obs_dim + action_dim, 1, hidden)
        self.store = init_mlp(self.spec, rng if rng is not None else np.random.default_rng())

    def q(self, obs: np.ndarray, action: np.ndarray, params: dict | None = None):
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=1)
        out, cache = mlp_forward(self.spec, params if params is not None else self.store.params, x)
        return out[:, 0], cache

    def backward(self, cache: dict, d_q: np.ndarray):
        """Returns (param grads, d_obs, d_action)."""
        grads, d_in = mlp_backward(cache, d_q[:, None])
        return grads, d_in[:, : self.obs_dim], d_in[:, self.obs_dim :]


# -- checkpoint format ------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned magic, one JSON header line (names, shapes, metadata, in a
    fixed order), then the raw little-endian float64 arrays concatenated."""
    names = sorted(arrays)
    header = {
        "arrays": [[n, list(arrays[n].shape)] for n in names],
        "meta": meta,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a slotbench checkpoint: {path}")
        header = json.loads(f.readline().decode())
        arrays = {}
        for name, shape in header["arrays"]:
            n_items = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n_items)
            if len(buf) != 8 * n_items:
                raise ValueError(f"truncated checkpoint array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]
