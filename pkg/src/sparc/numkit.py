"""Dense numeric kernel: parameters, seeded RNG, paired forward/backward ops.

Tensors are plain C-order numpy float64 arrays. Every differentiable
operation is a (forward, backward) pair; composite blocks thread the
forward caches and unwind them explicitly in reverse order. There is no
tape. `grad_check` closes the loop against central finite differences.

32-bit arrays are accepted only by the benchmark harness; everything that
is gradient-checked runs in float64.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class GradCheckError(RuntimeError):
    """Non-finite value met during a finite-difference probe."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Parameters and RNG
# ---------------------------------------------------------------------------


@dataclass
class Param:
    """A named trainable array with its gradient accumulator.

    `m` and `v` are the optimizer moment buffers; they are created lazily by
    `adamw_step` and persist on the parameter between steps.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        self.value = as_f64(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_f64(self.grad)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


class Rng:
    """Counter-based random stream (Philox 4x64) with named substreams.

    Identical seed plus identical call sequence gives identical outputs on
    any platform. `spawn(tag)` derives an independent stream whose seed is
    the first 8 bytes of SHA-256("<seed>/<tag>"), so substream layouts are
    stable across runs and languages.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, std=1.0, mean=0.0) -> np.ndarray:
        return mean + std * self._gen.standard_normal(size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def poisson(self, lam: float, size=None):
        return self._gen.poisson(lam, size)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] < 1:
        raise ShapeError("softmax axis must have extent >= 1")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """dx for y = softmax(x): y * (dy - sum(dy * y))."""
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


def relu_fwd(x):
    return np.maximum(x, 0.0), x > 0


def relu_bwd(dy, cache):
    return dy * cache


def sigmoid(x):
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) = -softplus(-x), computed without overflow."""
    return -np.logaddexp(0.0, -x)


def reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` over axes that were broadcast relative to `shape`."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Linear / layer norm primitives
# ---------------------------------------------------------------------------


def linear_fwd(x, w, b=None):
    """y = x @ w (+ b). x: (..., din), w: (din, dout), b: (dout,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear inner extents disagree: {x.shape[-1]} vs {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w)


def linear_bwd(dy, cache):
    """Returns (dx, dw, db). db is None when the forward had no bias."""
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


def layer_norm_fwd(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine.

    `gain`/`bias` broadcast against x; per-row shapes are allowed (used by
    the modulated normalization in the fusion decoder).
    """
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm last axis must have extent >= 1")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv, gain)


def layer_norm_bwd(dy, cache):
    """Returns (dx, dgain_elem, dbias_elem).

    dgain_elem/dbias_elem are elementwise (same shape as dy); the caller
    reduces them to the parameter shapes with `reduce_to`.
    """
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain_elem = dy * xhat
    dbias_elem = dy
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain_elem, dbias_elem


def gather_fwd(x, idx):
    """Row gather along axis 0. idx: integer array of any shape."""
    return x[idx], (np.asarray(idx), x.shape)


def gather_bwd(dy, cache):
    idx, x_shape = cache
    dx = np.zeros(x_shape, dtype=np.float64)
    np.add.at(dx, idx.reshape(-1), dy.reshape(-1, *x_shape[1:]))
    return dx


def concat_fwd(parts, axis=0):
    return np.concatenate(parts, axis=axis), ([p.shape[axis] for p in parts], axis)


def concat_bwd(dy, cache):
    sizes, axis = cache
    return np.split(dy, np.cumsum(sizes)[:-1], axis=axis)


# ---------------------------------------------------------------------------
# Attention core
# ---------------------------------------------------------------------------


def masked_attention_fwd(q, k, v, mask=None, bias=None):
    """Scaled dot-product attention with optional additive bias and mask.

    q: (..., Nq, dh), k/v: (..., Nk, dh); bias/mask broadcast to
    (..., Nq, Nk). mask is boolean, True = may attend. Rows with every key
    masked produce zero output (callers pass such rows through by residual).

    Returns (out, weights, cache).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("query/key feature extents disagree")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    mx = logits.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(logits - mx)
    s = e.sum(axis=-1, keepdims=True)
    w = e / np.where(s == 0.0, 1.0, s)
    out = w @ v
    return out, w, (q, k, v, w, scale)


def masked_attention_bwd(dout, cache):
    """Returns (dq, dk, dv, dlogits); dlogits doubles as the bias gradient."""
    q, k, v, w, scale = cache
    dw = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(w, -1, -2) @ dout
    dlogits = softmax_bwd(dw, w)
    dq = (dlogits @ k) * scale
    dk = (np.swapaxes(dlogits, -1, -2) @ q) * scale
    return dq, dk, dv, dlogits


def split_heads(x, heads):
    """(..., N, d) -> (..., H, N, d/H)."""
    *lead, n, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"channel dim {d} not divisible by {heads} heads")
    y = x.reshape(*lead, n, heads, d // heads)
    return np.moveaxis(y, -2, -3)


def merge_heads(x):
    """(..., H, N, dh) -> (..., N, H*dh)."""
    y = np.moveaxis(x, -3, -2)
    *lead, n, h, dh = y.shape
    return np.ascontiguousarray(y).reshape(*lead, n, h * dh)


# ---------------------------------------------------------------------------
# Parameter-owning blocks
# ---------------------------------------------------------------------------


class Linear:
    """y = x @ w + b with gradient accumulation into its Params."""

    def __init__(self, name, d_in, d_out, rng: Rng, bias=True, scale=None):
        std = scale if scale is not None else 1.0 / math.sqrt(d_in)
        self.w = Param(f"{name}.w", rng.normal((d_in, d_out), std=std))
        self.b = Param(f"{name}.b", np.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear_fwd(x, self.w.value, None if self.b is None else self.b.value)

    def backward(self, dy, cache):
        dx, dw, db = linear_bwd(dy, cache)
        self.w.grad += dw
        if self.b is not None:
            self.b.grad += db
        return dx

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])


class LayerNorm:
    """Last-axis layer norm with learnable gain/bias and optional per-row
    additive modulation of both (`row_gain`, `row_bias`)."""

    def __init__(self, name, d, eps=1e-6):
        self.gain = Param(f"{name}.gain", np.ones(d))
        self.bias = Param(f"{name}.bias", np.zeros(d))
        self.eps = eps

    def forward(self, x, row_gain=None, row_bias=None):
        g = self.gain.value if row_gain is None else self.gain.value + row_gain
        b = self.bias.value if row_bias is None else self.bias.value + row_bias
        y, cache = layer_norm_fwd(x, g, b, self.eps)
        return y, cache

    def backward(self, dy, cache):
        """Returns (dx, drow_gain, drow_bias); the row grads are elementwise."""
        dx, dg_elem, db_elem = layer_norm_bwd(dy, cache)
        self.gain.grad += reduce_to(dg_elem, self.gain.value.shape)
        self.bias.grad += reduce_to(db_elem, self.bias.value.shape)
        return dx, dg_elem, db_elem

    def params(self):
        return [self.gain, self.bias]


class Mlp:
    """linear -> relu -> linear."""

    def __init__(self, name, d_in, d_hidden, d_out, rng: Rng):
        self.fc1 = Linear(f"{name}.fc1", d_in, d_hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", d_hidden, d_out, rng)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, ca = relu_fwd(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, ca, c2)

    def backward(self, dy, cache):
        c1, ca, c2 = cache
        da = self.fc2.backward(dy, c2)
        dh = relu_bwd(da, ca)
        return self.fc1.backward(dh, c1)

    def params(self):
        return self.fc1.params() + self.fc2.params()


class MultiHeadAttention:
    """Projected multi-head attention over arbitrary leading batch dims.

    forward(q_in, kv_in, mask, bias): q_in (..., Nq, d), kv_in (..., Nk, d);
    mask/bias broadcast to (..., H, Nq, Nk). Returns (y, weights, cache);
    backward returns (dq_in, dkv_in, dbias) where dbias has the full
    per-head logits shape for the caller to reduce.
    """

    def __init__(self, name, d_model, heads, rng: Rng, qkv_bias=True):
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(f"{name}.wq", d_model, d_model, rng, bias=qkv_bias)
        self.wk = Linear(f"{name}.wk", d_model, d_model, rng, bias=qkv_bias)
        self.wv = Linear(f"{name}.wv", d_model, d_model, rng, bias=qkv_bias)
        self.wo = Linear(f"{name}.wo", d_model, d_model, rng)

    def forward(self, q_in, kv_in, mask=None, bias=None):
        q, cq = self.wq.forward(q_in)
        k, ck = self.wk.forward(kv_in)
        v, cv = self.wv.forward(kv_in)
        qh = split_heads(q, self.heads)
        kh = split_heads(k, self.heads)
        vh = split_heads(v, self.heads)
        oh, w, ca = masked_attention_fwd(qh, kh, vh, mask=mask, bias=bias)
        y, co = self.wo.forward(merge_heads(oh))
        return y, w, (cq, ck, cv, ca, co)

    def backward(self, dy, cache):
        cq, ck, cv, ca, co = cache
        dmerged = self.wo.backward(dy, co)
        doh = split_heads(dmerged, self.heads)
        dqh, dkh, dvh, dlogits = masked_attention_bwd(doh, ca)
        dq_in = self.wq.backward(merge_heads(dqh), cq)
        dkv = self.wk.backward(merge_heads(dkh), ck)
        dkv = dkv + self.wv.backward(merge_heads(dvh), cv)
        return dq_in, dkv, dlogits

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adamw_step(params, lr, beta1=0.9, beta2=0.999, weight_decay=0.0, t=1, eps=1e-8):
    """Decoupled-weight-decay Adam update applied in place.

    t is the 1-based step index used for bias correction. Moment buffers
    live on each Param and are zero-initialized on first use. Decay is
    applied multiplicatively before the moment update, so a zero-gradient,
    zero-decay step is an exact no-op.
    """
    if t < 1:
        raise ConfigError("adamw step index t must be >= 1")
    for p in params:
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        if weight_decay != 0.0:
            p.value *= 1.0 - lr * weight_decay
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, x, eps=1e-5, max_coords=None, seed=0):
    """Compare the analytic gradient of a scalar function to central FD.

    f(x) must return (value, grad) with grad shaped like x. Returns the max
    over checked coordinates of |analytic - fd| / max(1, |analytic|, |fd|).
    When max_coords is given and x has more entries, a seeded random subset
    of coordinates is probed. Non-finite values raise GradCheckError with
    the offending coordinate.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError("grad_check eps must lie in [1e-7, 1e-4]")
    x = as_f64(x).copy()
    value, grad = f(x)
    if not np.isfinite(value):
        raise GradCheckError("f(x) is non-finite at the center point")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ShapeError(f"analytic grad shape {grad.shape} != x shape {x.shape}")
    n = x.size
    coords = np.arange(n)
    if max_coords is not None and n > max_coords:
        coords = np.random.Generator(np.random.Philox(seed)).choice(n, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = x.copy()
        xp.flat[i] += eps
        fp = f(xp)[0]
        xm = x.copy()
        xm.flat[i] -= eps
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite probe at coordinate {i}", coordinate=int(i))
        fd = (fp - fm) / (2.0 * eps)
        a = grad.flat[i]
        err = abs(a - fd) / max(1.0, abs(a), abs(fd))
        worst = max(worst, err)
    return worst
