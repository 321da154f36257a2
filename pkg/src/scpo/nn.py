"""Small float64 MLPs with hand-written reverse mode and a squashed Gaussian head.

Layers compute ``h @ W + b`` on batch-first arrays. Every network keeps all of
its parameters in one flat vector; ``weights`` and ``biases`` are views into
it, so optimisers and target-network blends work on a single array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

ACTIVATIONS = ("relu", "tanh")
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
CHECKPOINT_VERSION = 1
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)
# tanh rounds to +-1 beyond |u| ~ 19; keep emitted actions strictly inside the box
_ACTION_LIMIT = float(np.nextafter(1.0, 0.0))


def _layout(layer_sizes):
    shapes, offset = [], 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        shapes.append((offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        shapes.append((offset, (fan_out,)))
        offset += fan_out
    return shapes, offset


def _views(flat, layer_sizes):
    shapes, _ = _layout(layer_sizes)
    views = [flat[o:o + int(np.prod(shape))].reshape(shape) for o, shape in shapes]
    return views[0::2], views[1::2]


class Mlp:
    """Fully connected network, hidden activation ``relu`` (default) or ``tanh``, linear output."""

    def __init__(self, layer_sizes, params: np.ndarray | None = None, activation: str = "relu"):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes must list at least two positive sizes, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        _, n = _layout(sizes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.layer_sizes = tuple(sizes)
        self.activation = activation
        self.params = params
        self.weights, self.biases = _views(self.params, sizes)

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, activation: str = "relu") -> Mlp:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, layer by layer."""
        net = cls(layer_sizes, activation=activation)
        for w, b in zip(net.weights, net.biases):
            bound = 1.0 / math.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return net

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> Mlp:
        return Mlp(self.layer_sizes, self.params.copy(), self.activation)

    def zeros_like_params(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def __reduce__(self):
        # rebuild through __init__ so the weight/bias views share the flat vector again
        return (Mlp, (self.layer_sizes, self.params, self.activation))

    def __repr__(self) -> str:
        return f"Mlp({list(self.layer_sizes)}, activation={self.activation!r})"


class ForwardCache(NamedTuple):
    inputs: list  # input to each layer, batch-first
    pre: list  # pre-activations of each layer
    output: np.ndarray


class GradientBundle(NamedTuple):
    value: float
    d_params: np.ndarray
    d_input: np.ndarray


def _act(kind, z):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(kind, z, h):
    # ReLU subgradient at 0 is 0
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise ValueError(f"input must have trailing dimension {net.in_dim}, got shape {x.shape}")
    return x2, single


def forward(net: Mlp, x: np.ndarray) -> ForwardCache:
    """Batched forward pass keeping what the backward pass needs."""
    h = x
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(net.activation, z)
    return ForwardCache(inputs, pre, h)


def backward(net: Mlp, cache: ForwardCache, upstream: np.ndarray,
             need_params: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Reverse pass of ``sum(upstream * output)``; returns ``(d_params, d_input)``."""
    d_params = net.zeros_like_params() if need_params else None
    if need_params:
        dws, dbs = _views(d_params, net.layer_sizes)
    g = upstream
    for i in range(len(net.weights) - 1, -1, -1):
        if i < len(net.weights) - 1:
            g = g * _act_grad(net.activation, cache.pre[i], cache.inputs[i + 1])
        if need_params:
            dws[i][...] = cache.inputs[i].T @ g
            dbs[i][...] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return d_params, g


def input_hvp(net: Mlp, cache: ForwardCache, upstream: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of the input gradient of ``sum(upstream * output)``.

    Forward-mode over the reverse pass: returns ``H @ tangent`` per sample, with
    ``H`` the input Hessian. Identically zero for ReLU networks.
    """
    if net.activation == "relu":
        # piecewise linear: the input Hessian vanishes wherever it exists
        return np.zeros_like(tangent, dtype=np.float64)
    n = len(net.weights)
    dz = []
    dh = tangent
    for i in range(n):
        d = dh @ net.weights[i]
        dz.append(d)
        if i < n - 1:
            dh = d * _act_grad(net.activation, cache.pre[i], cache.inputs[i + 1])
    g = upstream
    dg = np.zeros_like(upstream)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            h = cache.inputs[i + 1]
            sp = _act_grad(net.activation, cache.pre[i], h)
            dg = dg * sp + g * (-2.0 * h * sp) * dz[i]  # tanh'' = -2 tanh tanh'
            g = g * sp
        dg = dg @ net.weights[i].T
        g = g @ net.weights[i].T
    return dg


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Output for one input vector or a batch of rows."""
    x2, single = _as_batch(net, x)
    out = forward(net, x2).output
    return out[0] if single else out


def mlp_backward(net: Mlp, x, upstream) -> GradientBundle:
    """Gradients of ``upstream . output`` w.r.t. the parameters and the input.

    For a batch, ``d_params`` is summed over rows and ``d_input`` is per row.
    """
    x2, single = _as_batch(net, x)
    cache = forward(net, x2)
    up = np.asarray(upstream, dtype=np.float64).reshape(cache.output.shape)
    d_params, d_input = backward(net, cache, up)
    value = float((up * cache.output).sum())
    return GradientBundle(value, d_params, d_input[0] if single else d_input)


# -- squashed Gaussian policy -----------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (_LOG2 - u - _softplus(-2.0 * u))


@dataclass
class GaussianTanhPolicy:
    """Trunk MLP emitting ``(mean, log_std)``; actions are ``tanh(mean + std * noise)``."""

    trunk: Mlp

    def __post_init__(self) -> None:
        if self.trunk.out_dim % 2:
            raise ValueError("trunk output must hold a mean and a log-std per action dimension")

    @classmethod
    def init(cls, obs_dim: int, act_dim: int, hidden, rng: np.random.Generator,
             activation: str = "relu") -> GaussianTanhPolicy:
        return cls(Mlp.init([obs_dim, *hidden, 2 * act_dim], rng, activation))

    @property
    def obs_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def act_dim(self) -> int:
        return self.trunk.out_dim // 2

    def copy(self) -> GaussianTanhPolicy:
        return GaussianTanhPolicy(self.trunk.copy())


class PolicySample(NamedTuple):
    action: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray
    std: np.ndarray
    clamp_open: np.ndarray  # 1 where the log-std clamp passes gradients
    cache: ForwardCache


def policy_forward(pol: GaussianTanhPolicy, s: np.ndarray, noise: np.ndarray) -> PolicySample:
    """Batched reparameterised sample; ``s`` is ``(B, obs_dim)``, ``noise`` ``(B, act_dim)``."""
    cache = forward(pol.trunk, s)
    k = pol.act_dim
    mean, raw = cache.output[:, :k], cache.output[:, k:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    clamp_open = ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)).astype(np.float64)
    std = np.exp(log_std)
    u = mean + std * noise
    action = np.clip(np.tanh(u), -_ACTION_LIMIT, _ACTION_LIMIT)
    gauss = -0.5 * noise * noise - log_std - _HALF_LOG_2PI
    log_prob = (gauss - log1m_tanh_sq(u)).sum(axis=1)
    return PolicySample(action, log_prob, noise, std, clamp_open, cache)


def policy_backward(pol: GaussianTanhPolicy, sample: PolicySample, d_action: np.ndarray,
                    d_log_prob: np.ndarray, need_params: bool = True):
    """Pull ``(dL/daction, dL/dlog_prob)`` back to trunk parameters and states.

    The noise is held fixed. Returns ``(d_params, d_state)``.
    """
    a = sample.action
    d_u = d_action * (1.0 - a * a) + d_log_prob[:, None] * (2.0 * a)
    d_mean = d_u
    d_log_std = (d_u * sample.std * sample.noise - d_log_prob[:, None]) * sample.clamp_open
    up = np.concatenate([d_mean, d_log_std], axis=1)
    return backward(pol.trunk, sample.cache, up, need_params)


def policy_sample(pol: GaussianTanhPolicy, s, noise) -> tuple[np.ndarray, np.ndarray | float]:
    """Action and log-density for one state (vectors) or a batch (rows)."""
    s2, single = _as_batch(pol.trunk, s)
    noise = np.asarray(noise, dtype=np.float64)
    n2 = noise[None, :] if single else noise
    if n2.shape != (s2.shape[0], pol.act_dim):
        raise ValueError(f"noise must have shape {(s2.shape[0], pol.act_dim)}, got {noise.shape}")
    out = policy_forward(pol, s2, n2)
    if single:
        return out.action[0], float(out.log_prob[0])
    return out.action, out.log_prob


def policy_mean_action(pol: GaussianTanhPolicy, s) -> np.ndarray:
    """``tanh(mean(s))``, the noise-free action used for evaluation."""
    s2, single = _as_batch(pol.trunk, s)
    out = np.tanh(forward(pol.trunk, s2).output[:, :pol.act_dim])
    return out[0] if single else out


# -- optimiser ----------------------------------------------------------------

class Adam:
    """Adam on a flat parameter vector, updated in place."""

    def __init__(self, n_params: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load_state(self, state: dict) -> None:
        self.m[...] = state["m"]
        self.v[...] = state["v"]
        self.t = int(state["t"])


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, nets: dict[str, Mlp], arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    """Write networks (plus optional extra arrays and JSON metadata) to one ``.npz`` file."""
    path = Path(path)
    payload = {"format_version": np.array(CHECKPOINT_VERSION)}
    header = {}
    for name, net in nets.items():
        payload[f"net/{name}"] = net.params
        header[name] = {"layer_sizes": list(net.layer_sizes), "activation": net.activation}
    for name, arr in (arrays or {}).items():
        payload[f"arr/{name}"] = np.asarray(arr)
    payload["header"] = np.array(json.dumps({"nets": header, "meta": meta or {}}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        header = json.loads(str(data["header"]))
        nets = {
            name: Mlp(spec["layer_sizes"], data[f"net/{name}"].copy(), spec["activation"])
            for name, spec in header["nets"].items()
        }
        arrays = {k[4:]: data[k].copy() for k in data.files if k.startswith("arr/")}
    return nets, arrays, header["meta"]
