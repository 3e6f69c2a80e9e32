"""Tanh MLPs over a flat float64 parameter vector.

Layout of the flat vector: for each layer in order, the weight matrix of
shape ``(fan_in, fan_out)`` in row-major order followed by its bias; the
Gaussian family appends one state-independent ``log_std`` per action dim.

Gradients are hand-derived: a loss is expressed as a gradient with respect
to the network's distribution parameters (logits, or mean and log_std) and
pulled back through the MLP with :func:`backward`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BadParam,
    CheckpointError,
    FamilyMismatch,
    NonFiniteGradient,
    NonFiniteOutput,
    OutOfSupport,
    ShapeMismatch,
)

CATEGORICAL = "categorical"
GAUSSIAN = "gaussian"
VALUE = "value"
FAMILIES = (CATEGORICAL, GAUSSIAN, VALUE)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_STD_INIT = -0.5
DEFAULT_DAMPING = 0.1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: Tuple[int, ...] = (64, 64)
    family: str = CATEGORICAL

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise BadParam(f"all layer sizes must be >= 1: {self}")
        if self.family not in FAMILIES:
            raise BadParam(f"unknown family {self.family!r}")
        if self.family == VALUE and self.output_dim != 1:
            raise BadParam("value networks have a single output")

    @property
    def sizes(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layer_params(self):
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    @property
    def n_params(self):
        extra = self.output_dim if self.family == GAUSSIAN else 0
        return self.n_layer_params + extra


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), zero biases, log_std at -0.5."""
    parts = []
    s = spec.sizes
    for i in range(len(s) - 1):
        bound = 1.0 / math.sqrt(s[i])
        parts.append(rng.uniform(-bound, bound, s[i] * s[i + 1]))
        parts.append(np.zeros(s[i + 1]))
    if spec.family == GAUSSIAN:
        parts.append(np.full(spec.output_dim, LOG_STD_INIT))
    return np.concatenate(parts)


def unpack(params, spec: MlpSpec):
    """Views ``[(W, b), ...]`` and the log_std vector (or ``None``)."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ShapeMismatch(f"expected {spec.n_params} params, got {params.shape}")
    layers = []
    off = 0
    s = spec.sizes
    for i in range(len(s) - 1):
        w = params[off:off + s[i] * s[i + 1]].reshape(s[i], s[i + 1])
        off += s[i] * s[i + 1]
        b = params[off:off + s[i + 1]]
        off += s[i + 1]
        layers.append((w, b))
    log_std = params[off:] if spec.family == GAUSSIAN else None
    return layers, log_std


# ---------------------------------------------------------------------------
# Distributions


@dataclass(frozen=True)
class Categorical:
    logits: np.ndarray  # (N, A)

    @property
    def log_probs(self):
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    @property
    def probs(self):
        return np.exp(self.log_probs)

    def log_prob(self, actions):
        actions = np.asarray(actions)
        n, m = self.logits.shape
        if actions.shape != (n,) or not np.issubdtype(actions.dtype, np.integer):
            raise OutOfSupport(f"expected {n} integer actions, got {actions.shape} {actions.dtype}")
        if actions.size and (actions.min() < 0 or actions.max() >= m):
            raise OutOfSupport(f"actions must lie in [0, {m})")
        return self.log_probs[np.arange(n), actions]

    def entropy(self):
        lp = self.log_probs
        return -(np.exp(lp) * lp).sum(axis=-1)

    def sample(self, rng):
        cdf = np.cumsum(self.probs, axis=-1)
        u = rng.random((self.logits.shape[0], 1))
        return np.minimum((u * cdf[:, -1:] > cdf).sum(axis=-1), self.logits.shape[1] - 1)

    def mode(self):
        return self.logits.argmax(axis=-1)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray     # (N, D)
    log_std: np.ndarray  # (D,)

    @property
    def std(self):
        return np.exp(self.log_std)

    def log_prob(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != self.mean.shape:
            raise OutOfSupport(f"action shape {actions.shape} != {self.mean.shape}")
        z = (actions - self.mean) / self.std
        d = self.mean.shape[-1]
        return -0.5 * (z * z).sum(axis=-1) - self.log_std.sum() - 0.5 * d * LOG_2PI

    def entropy(self):
        d = self.mean.shape[-1]
        e = self.log_std.sum() + 0.5 * d * (1.0 + LOG_2PI)
        return np.full(self.mean.shape[0], e)

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def mode(self):
        return self.mean


def kl(p, q):
    """Per-state ``KL(p || q)`` for two distributions of the same family."""
    if type(p) is not type(q):
        raise FamilyMismatch(f"cannot compare {type(p).__name__} with {type(q).__name__}")
    if isinstance(p, Categorical):
        if p.logits.shape != q.logits.shape:
            raise ShapeMismatch("logit shapes differ")
        lp, lq = p.log_probs, q.log_probs
        return np.maximum((np.exp(lp) * (lp - lq)).sum(axis=-1), 0.0)
    if p.mean.shape != q.mean.shape:
        raise ShapeMismatch("mean shapes differ")
    var_p, var_q = np.exp(2 * p.log_std), np.exp(2 * q.log_std)
    per_dim = (q.log_std - p.log_std) + (var_p + (p.mean - q.mean) ** 2) / (2 * var_q) - 0.5
    return np.maximum(per_dim.sum(axis=-1), 0.0)


def mean_kl(p, q):
    return float(kl(p, q).mean())


# ---------------------------------------------------------------------------
# Forward, backward and forward-mode passes


@dataclass
class Cache:
    """Activations of one forward pass, kept for backward/jvp."""

    spec: MlpSpec
    layers: list
    log_std: Optional[np.ndarray]
    acts: list  # input and every hidden activation
    out: np.ndarray


def _forward_raw(params, spec, obs):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.ndim != 2 or obs.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"observations must be (N, {spec.input_dim}), got {obs.shape}")
    layers, log_std = unpack(params, spec)
    acts = [obs]
    h = obs
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    out = h @ w + b
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput("network output is not finite")
    if log_std is not None:
        log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    return Cache(spec, layers, log_std, acts, out)


def _as_dist(cache: Cache):
    if cache.spec.family == CATEGORICAL:
        return Categorical(cache.out)
    if cache.spec.family == GAUSSIAN:
        return DiagGaussian(cache.out, cache.log_std)
    return cache.out[:, 0]


def forward(params, spec: MlpSpec, obs):
    """Distribution batch for policy families, value vector for value nets."""
    return _as_dist(_forward_raw(params, spec, obs))


def forward_cached(params, spec: MlpSpec, obs):
    cache = _forward_raw(params, spec, obs)
    return _as_dist(cache), cache


def backward(cache: Cache, grad_out, grad_log_std=None, params=None):
    """Pull a gradient on the network outputs back to the flat parameters.

    ``grad_log_std`` is zeroed where the raw log_std sits outside the clamp
    (pass the raw ``params`` to enable that check).
    """
    spec = cache.spec
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape != cache.out.shape:
        raise ShapeMismatch(f"output gradient {g.shape} != {cache.out.shape}")
    per_layer = []
    delta = g
    for i in range(len(cache.layers) - 1, -1, -1):
        w, _ = cache.layers[i]
        h = cache.acts[i]
        per_layer.append(((h.T @ delta).ravel(), delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - h * h)
    flat = [part for pair in reversed(per_layer) for part in pair]
    if spec.family == GAUSSIAN:
        gl = np.zeros(spec.output_dim) if grad_log_std is None else np.asarray(grad_log_std, dtype=np.float64)
        if params is not None:
            raw = unpack(params, spec)[1]
            gl = np.where((raw < LOG_STD_MIN) | (raw > LOG_STD_MAX), 0.0, gl)
        flat.append(gl)
    out = np.concatenate(flat)
    if not np.all(np.isfinite(out)):
        raise NonFiniteGradient("gradient is not finite")
    return out


def jvp(cache: Cache, tangent):
    """Directional derivative of the outputs (and log_std) along ``tangent``."""
    spec = cache.spec
    t_layers, t_log_std = unpack(tangent, spec)
    dh = np.zeros_like(cache.acts[0])
    for i, ((w, _), (tw, tb)) in enumerate(zip(cache.layers, t_layers)):
        pre = dh @ w + cache.acts[i] @ tw + tb
        if i < len(cache.layers) - 1:
            h = cache.acts[i + 1]
            dh = (1.0 - h * h) * pre
        else:
            dh = pre
    return dh, t_log_std


# ---------------------------------------------------------------------------
# Distribution-space derivatives


def log_prob_grad(dist, actions):
    """Per-sample gradients of ``log_prob`` w.r.t. outputs and log_std."""
    if isinstance(dist, Categorical):
        onehot = np.zeros_like(dist.logits)
        onehot[np.arange(len(actions)), actions] = 1.0
        return onehot - dist.probs, None
    z = (np.asarray(actions, dtype=np.float64) - dist.mean) / dist.std
    return z / dist.std, z * z - 1.0


def kl_grad(new, old):
    """Per-sample gradients of ``KL(new || old)`` w.r.t. the new outputs."""
    if type(new) is not type(old):
        raise FamilyMismatch("families differ")
    if isinstance(new, Categorical):
        lp, lq = new.log_probs, old.log_probs
        p = np.exp(lp)
        per = (p * (lp - lq)).sum(axis=-1, keepdims=True)
        return p * ((lp - lq) - per), None
    var_old = np.exp(2 * old.log_std)
    g_ls = np.exp(2 * new.log_std) / var_old - 1.0
    return (new.mean - old.mean) / var_old, np.broadcast_to(g_ls, new.mean.shape).copy()


def grad(loss_fn: Callable, params):
    """Gradient of ``loss_fn(params) -> (value, gradient)``, checked finite."""
    _, g = loss_fn(params)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != np.shape(params) or not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient is missing or not finite")
    return g


def log_prob_loss(spec: MlpSpec, obs, actions, weights=None):
    """``sum_i w_i log pi(a_i|s_i)`` with its parameter gradient; used by A2C and tests."""
    def fn(params):
        dist, cache = forward_cached(params, spec, obs)
        lp = dist.log_prob(actions)
        w = np.ones_like(lp) if weights is None else np.asarray(weights, dtype=np.float64)
        g_out, g_ls = log_prob_grad(dist, actions)
        g_out = g_out * w[:, None]
        g_ls = None if g_ls is None else (g_ls * w[:, None]).sum(axis=0)
        return float(w @ lp), backward(cache, g_out, g_ls, params)
    return fn


def fisher_vector_product(cache: Cache, v, damping=DEFAULT_DAMPING):
    """``(H + damping I) v`` with ``H`` the Hessian of mean KL at the anchor.

    At the anchor the KL Hessian equals the Fisher information, so it is
    computed as ``J^T F J v`` with the analytic Fisher of the head.
    """
    if damping < 0:
        raise BadParam("damping must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteOutput("vector must be finite")
    spec = cache.spec
    n = cache.out.shape[0]
    d_out, d_ls = jvp(cache, v)
    if spec.family == CATEGORICAL:
        p = Categorical(cache.out).probs
        f_out = p * d_out - p * (p * d_out).sum(axis=-1, keepdims=True)
        f_ls = None
    elif spec.family == GAUSSIAN:
        f_out = d_out * np.exp(-2 * cache.log_std)
        f_ls = 2.0 * d_ls
    else:
        raise FamilyMismatch("value networks have no KL")
    hv = backward(cache, f_out / n, f_ls)
    out = hv + damping * v
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput("Fisher-vector product is not finite")
    return out


def fvp(params, spec: MlpSpec, obs, v, damping=DEFAULT_DAMPING):
    _, cache = forward_cached(params, spec, obs)
    return fisher_vector_product(cache, v, damping)


# ---------------------------------------------------------------------------
# Checkpoints
#
#   4 bytes   magic b"APO1"
#   u32       format version (1)
#   u32       family code (0 categorical, 1 gaussian, 2 value)
#   u32       input_dim
#   u32       output_dim
#   u32       number of hidden layers H, then H x u32 widths
#   u64       number of parameters P
#   P x f64   flat parameters
#
# All integers and floats are little-endian.

MAGIC = b"APO1"
CHECKPOINT_VERSION = 1


def encode_checkpoint(spec: MlpSpec, params) -> bytes:
    params = np.asarray(params, dtype="<f8")
    if params.shape != (spec.n_params,):
        raise ShapeMismatch(f"expected {spec.n_params} params, got {params.shape}")
    head = MAGIC + struct.pack(
        f"<IIIII{len(spec.hidden)}IQ", CHECKPOINT_VERSION, FAMILIES.index(spec.family),
        spec.input_dim, spec.output_dim, len(spec.hidden), *spec.hidden, spec.n_params,
    )
    return head + params.tobytes()


def decode_checkpoint(blob: bytes):
    try:
        if blob[:4] != MAGIC:
            raise CheckpointError("bad magic bytes")
        version, fam, din, dout, nh = struct.unpack_from("<IIIII", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 24
        hidden = struct.unpack_from(f"<{nh}I", blob, off)
        off += 4 * nh
        (n,) = struct.unpack_from("<Q", blob, off)
        off += 8
        spec = MlpSpec(din, dout, hidden, FAMILIES[fam])
    except (struct.error, IndexError, BadParam) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if n != spec.n_params or len(blob) != off + 8 * n:
        raise CheckpointError("parameter count does not match descriptor")
    return spec, np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)


def save_checkpoint(path, spec: MlpSpec, params):
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, encode_checkpoint(spec, params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
