"""Transformer density-operator network with a hand-written backward pass.

Pipeline for one ordered pair (alpha, beta) on L sites:

    stack (L, 2) -> circular conv (kernel 2, C1) -> act
                 -> circular conv (kernel 2, C2) -> act            = X
    multi-head self-attention, concat, W_O, + X (residual)         = X'
    mean over sites -> dense (C2 -> 2) -> z = F0 + i F1

The log-amplitude is the Hermitian symmetrization
``log(exp z(a, b) + conj(exp z(b, a)))``. All weights are real.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .spinspace import all_configs, join, split_joint, swap_joint

KERNEL = 2
ENUMERATE_MAX_SITES = 7

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _relu(x):
    return np.maximum(x, 0.0), (x > 0).astype(x.dtype)


def _tanh(x):
    y = np.tanh(x)
    return y, 1.0 - y * y


ACTIVATIONS = {"gelu": _gelu, "relu": _relu, "tanh": _tanh}


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    sites: int
    conv_channels: tuple[int, int] = (8, 16)
    heads: int = 2
    activation: str = "gelu"
    seed: int = 0
    kernel: tuple[int, int] = (2, 1)

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        c1, c2 = self.conv_channels
        if self.sites < 1 or c1 < 1 or c2 < 1 or self.heads < 1:
            raise ValueError("sites, channels and heads must be positive")
        if c2 % self.heads:
            raise ValueError(f"C2={c2} is not divisible by heads={self.heads}")
        if self.kernel != (KERNEL, 1):
            raise ValueError("kernel is fixed to (2, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.conv_channels[1] // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv_channels
        h, d = self.heads, self.head_dim
        return {
            "conv1_w": (KERNEL, 2, c1),
            "conv1_b": (c1,),
            "conv2_w": (KERNEL, c1, c2),
            "conv2_b": (c2,),
            "wq": (h, c2, d),
            "wk": (h, c2, d),
            "wv": (h, c2, d),
            "wo": (c2, c2),
            "dense_w": (c2, 2),
            "dense_b": (2,),
        }

    def slices(self) -> dict[str, slice]:
        return _layout(self)[0]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@lru_cache(maxsize=64)
def _layout(cfg: ModelConfig):
    slices, start = {}, 0
    shapes = cfg.shapes()
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        slices[name] = slice(start, start + size)
        start += size
    return slices, shapes


@dataclass
class ParameterSet:
    config: ModelConfig
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.config.n_params,):
            raise ValueError(
                f"expected {self.config.n_params} parameters, got {self.theta.shape}"
            )

    def __getitem__(self, name: str) -> np.ndarray:
        slices, shapes = _layout(self.config)
        return self.theta[slices[name]].reshape(shapes[name])

    def replace(self, theta: np.ndarray) -> "ParameterSet":
        return ParameterSet(self.config, theta)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.theta.copy())


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParameterSet:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c1, c2 = cfg.conv_channels
    fan_in = {
        "conv1_w": KERNEL * 2,
        "conv2_w": KERNEL * c1,
        "wq": c2,
        "wk": c2,
        "wv": c2,
        "wo": c2,
        "dense_w": c2,
    }
    theta = np.zeros(cfg.n_params)
    for name, sl in cfg.slices().items():
        if name in fan_in:
            theta[sl] = rng.standard_normal(sl.stop - sl.start) / np.sqrt(fan_in[name])
    return ParameterSet(cfg, theta)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    dact1: np.ndarray
    pre2: np.ndarray
    x: np.ndarray
    dact2: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray  # attention weights, (B, heads, L, L)
    context: np.ndarray  # concatenated heads, (B, L, C2)
    out: np.ndarray
    pooled: np.ndarray
    dense_out: np.ndarray = field(repr=False)


def _circ_conv(u, w, b):
    # out[i] = sum_t u[(i + t) % L] @ w[t] + b
    out = b + u @ w[0]
    for t in range(1, w.shape[0]):
        out = out + np.roll(u, -t, axis=1) @ w[t]
    return out


def raw_forward(p: ParameterSet, pairs: np.ndarray, return_cache: bool = False):
    """Complex network output z for ordered pairs, shape (B, 2N) -> (B,)."""
    cfg = p.config
    pairs = np.atleast_2d(pairs)
    n = cfg.sites
    if pairs.shape[1] != 2 * n:
        raise ValueError(f"expected joint configs of length {2 * n}, got {pairs.shape[1]}")
    act = ACTIVATIONS[cfg.activation]
    a, b = split_joint(pairs.astype(np.float64))
    u = np.stack([a, b], axis=-1)  # (B, L, 2)

    pre1 = _circ_conv(u, p["conv1_w"], p["conv1_b"])
    act1, dact1 = act(pre1)
    pre2 = _circ_conv(act1, p["conv2_w"], p["conv2_b"])
    x, dact2 = act(pre2)

    h, d = cfg.heads, cfg.head_dim
    q = np.einsum("blc,hcd->bhld", x, p["wq"])
    k = np.einsum("blc,hcd->bhld", x, p["wk"])
    v = np.einsum("blc,hcd->bhld", x, p["wv"])
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    heads = w @ v  # (B, h, L, d)
    context = heads.transpose(0, 2, 1, 3).reshape(len(pairs), n, h * d)
    out = context @ p["wo"] + x
    pooled = out.mean(axis=1)
    dense_out = pooled @ p["dense_w"] + p["dense_b"]
    z = dense_out[:, 0] + 1j * dense_out[:, 1]
    if not return_cache:
        return z
    cache = ForwardCache(u, pre1, act1, dact1, pre2, x, dact2, q, k, v, w, context,
                         out, pooled, dense_out)
    return z, cache


def backward(p: ParameterSet, cache: ForwardCache, g_out: np.ndarray,
             per_sample: bool = False) -> np.ndarray:
    """Reverse pass from cotangents on (F0, F1).

    ``g_out`` has shape (B, 2) and may be complex. Returns the flat parameter
    gradient of ``sum_b g_out[b] . F[b]``, or one row per sample when
    ``per_sample`` is set.
    """
    cfg = p.config
    n = cfg.sites
    hh, d = cfg.heads, cfg.head_dim
    bsz = len(g_out)
    dtype = np.result_type(g_out.dtype, np.float64)
    grads = np.zeros((bsz, cfg.n_params) if per_sample else cfg.n_params, dtype=dtype)
    sl = cfg.slices()

    def put(name, val):
        if per_sample:
            grads[:, sl[name]] = val.reshape(bsz, -1)
        else:
            grads[sl[name]] = val.reshape(-1)

    if per_sample:
        put("dense_w", cache.pooled[:, :, None] * g_out[:, None, :])
        put("dense_b", g_out)
    else:
        put("dense_w", cache.pooled.T @ g_out)
        put("dense_b", g_out.sum(0))
    g_pool = g_out @ p["dense_w"].T  # (B, C2)
    # d(mean over sites): every site receives g_pool / L
    g_site = g_pool / n

    ctx_sum = cache.context.sum(axis=1)
    if per_sample:
        put("wo", ctx_sum[:, :, None] * g_site[:, None, :])
    else:
        put("wo", ctx_sum.T @ g_site)
    g_ctx = np.broadcast_to((g_site @ p["wo"].T)[:, None, :], cache.context.shape)
    g_x = np.broadcast_to(g_site[:, None, :], cache.x.shape).astype(dtype)

    g_heads = g_ctx.reshape(bsz, n, hh, d).transpose(0, 2, 1, 3)  # (B, h, L, d)
    w = cache.weights
    g_w = g_heads @ cache.v.transpose(0, 1, 3, 2)
    g_v = w.transpose(0, 1, 3, 2) @ g_heads
    g_s = w * (g_w - (g_w * w).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    g_q = g_s @ cache.k
    g_k = g_s.transpose(0, 1, 3, 2) @ cache.q
    x = cache.x
    x_t = x.transpose(0, 2, 1)[:, None]  # (B, 1, C2, L)
    for name, g in (("wq", g_q), ("wk", g_k), ("wv", g_v)):
        gw = x_t @ g  # (B, h, C2, d)
        put(name, gw if per_sample else gw.sum(0))
        g_x = g_x + (g @ p[name].transpose(0, 2, 1)).sum(axis=1)

    g_pre2 = g_x * cache.dact2
    _conv_grads(put, "conv2", cache.act1, g_pre2, per_sample)
    w2 = p["conv2_w"]
    g_a1 = sum(np.roll(g_pre2 @ w2[t].T, t, axis=1) for t in range(KERNEL))
    g_pre1 = g_a1 * cache.dact1
    _conv_grads(put, "conv1", cache.inputs, g_pre1, per_sample)
    return grads


def _conv_grads(put, prefix, inp, g_pre, per_sample):
    taps = [np.roll(inp, -t, axis=1).transpose(0, 2, 1) @ g_pre for t in range(KERNEL)]
    if per_sample:
        put(prefix + "_w", np.stack(taps, axis=1))
        put(prefix + "_b", g_pre.sum(axis=1))
    else:
        put(prefix + "_w", np.stack([t.sum(0) for t in taps]))
        put(prefix + "_b", g_pre.sum(axis=(0, 1)))


def _symmetrize(z1, z2):
    """log(exp z1 + conj(exp z2)) with the larger real part factored out."""
    a, b = z1, np.conj(z2)
    m = np.maximum(a.real, b.real)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m) + np.exp(b - m))


def log_density(p: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Complex log of the density-matrix element for joint configs (B, 2N)."""
    x = np.atleast_2d(x)
    z = raw_forward(p, np.concatenate([x, swap_joint(x)]))
    bsz = len(x)
    return _symmetrize(z[:bsz], z[bsz:])


def _pair_cotangents(z, logrho, c=None):
    """Cotangents on (F0, F1) of the stacked (ab; ba) forward pass.

    With ``c`` absent the result gives per-sample O = d log rho; otherwise it
    gives the gradient of Re sum c * log rho.
    """
    bsz = len(logrho)
    w1 = np.exp(z[:bsz] - logrho)
    w2 = np.exp(np.conj(z[bsz:]) - logrho)
    if c is not None:
        w1, w2 = c * w1, c * w2
        g = np.empty((2 * bsz, 2))
        g[:bsz, 0], g[:bsz, 1] = w1.real, -w1.imag
        g[bsz:, 0], g[bsz:, 1] = w2.real, w2.imag
        return g
    g = np.empty((2 * bsz, 2), dtype=complex)
    g[:bsz, 0], g[:bsz, 1] = w1, 1j * w1
    g[bsz:, 0], g[bsz:, 1] = w2, -1j * w2
    return g


def _check_finite(cache: ForwardCache):
    for name in ("pre1", "pre2", "weights", "out", "dense_out"):
        if not np.all(np.isfinite(getattr(cache, name))):
            raise NonFiniteError(f"non-finite values in layer {name}")


def log_density_and_derivatives(p: ParameterSet, x: np.ndarray):
    """log rho and O_i = d log rho / d theta_i, shapes (B,) and (B, P)."""
    x = np.atleast_2d(x)
    bsz = len(x)
    z, cache = raw_forward(p, np.concatenate([x, swap_joint(x)]), return_cache=True)
    _check_finite(cache)
    logrho = _symmetrize(z[:bsz], z[bsz:])
    per = backward(p, cache, _pair_cotangents(z, logrho), per_sample=True)
    return logrho, per[:bsz] + per[bsz:]


def log_derivatives(p: ParameterSet, x: np.ndarray) -> np.ndarray:
    return log_density_and_derivatives(p, x)[1]


def vjp_log_density(p: ParameterSet, x: np.ndarray, c: np.ndarray):
    """Real gradient of Re(sum_b c_b log rho(x_b)); also returns log rho."""
    x = np.atleast_2d(x)
    bsz = len(x)
    z, cache = raw_forward(p, np.concatenate([x, swap_joint(x)]), return_cache=True)
    _check_finite(cache)
    logrho = _symmetrize(z[:bsz], z[bsz:])
    grad = backward(p, cache, _pair_cotangents(z, logrho, np.asarray(c)))
    return grad, logrho


def enumerate_full_matrix(p: ParameterSet, normalize: bool = True) -> np.ndarray:
    """Dense 2^N x 2^N matrix exp(log rho(a, b)), trace-normalized."""
    n = p.config.sites
    if n > ENUMERATE_MAX_SITES:
        raise ValueError(f"enumeration supports N <= {ENUMERATE_MAX_SITES}, got {n}")
    configs = all_configs(n)
    dim = len(configs)
    a = np.repeat(configs, dim, axis=0)
    b = np.tile(configs, (dim, 1))
    logs = np.concatenate([
        log_density(p, join(a[i:i + 8192], b[i:i + 8192])) for i in range(0, dim * dim, 8192)
    ])
    logs = logs.reshape(dim, dim)
    # rescale before exponentiating; the overall factor drops out on normalization
    rho = np.exp(logs - logs.real.max())
    rho = 0.5 * (rho + rho.conj().T)
    if normalize:
        rho = rho / np.trace(rho).real
    return rho
