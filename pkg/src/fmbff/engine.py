"""Dense tensor value type with reverse-mode differentiation.

Layout convention for image-like data is N x C x H x W.  Every operation
returns a fresh Tensor whose backward closure scatters gradients into its
inputs; ``backward(loss)`` runs the whole reverse sweep.  The element type
of new leaves follows the session default (float32 for training, float64
for gradient checking, see ``dtype_session``).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, StateError, UsageError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported element type {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def dtype_session(dtype):
    """Temporarily switch the session element type (e.g. float64 for gradcheck)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense N-d array with an optional gradient and producing-op record."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self):
        return self._backward is None

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        kind = "leaf" if self.is_leaf() else "op"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {kind})"


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _as_array(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def backward(loss):
    """Populate grads of everything reachable from a scalar loss.

    Repeated calls keep accumulating into leaves; intermediate grads are
    reset at the start of each sweep so only leaf accumulation persists.
    """
    if not isinstance(loss, Tensor) or loss._backward is None:
        raise UsageError("backward() requires a non-leaf Tensor produced by an op")
    if loss.size != 1:
        raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in topo:
        if node._backward is not None:
            node.grad = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(a, b, fwd, bwd_a, bwd_b):
    ad, bd = _as_array(a), _as_array(b)
    try:
        data = fwd(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"shapes {ad.shape} and {bd.shape} do not broadcast") from exc

    def back(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(bwd_a(g, ad, bd), ad.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(bwd_b(g, ad, bd), bd.shape))

    return Tensor._from_op(data, (a, b), back)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def elementwise(a, b, kind):
    """Spec-surface dispatcher for add / sub / mul."""
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def neg(x):
    return Tensor._from_op(-x.data, (x,), lambda g: _accumulate(x, -g))


def pow_(x, p):
    """Elementwise x**p for a fixed float exponent."""
    data = x.data ** p

    def back(g):
        _accumulate(x, g * p * x.data ** (p - 1.0))

    return Tensor._from_op(data, (x,), back)


def exp(x):
    data = np.exp(x.data)
    return Tensor._from_op(data, (x,), lambda g: _accumulate(x, g * data))


def log(x):
    return Tensor._from_op(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def clip(x, lo, hi):
    data = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)
    return Tensor._from_op(data, (x,), lambda g: _accumulate(x, g * inside))


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return Tensor._from_op(np.asarray(data), (x,), back)


def mean_(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape) / n)

    return Tensor._from_op(np.asarray(data), (x,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape[-1]} vs {b.shape[-2]}"
        )
    data = np.matmul(a.data, b.data)

    def back(g):
        _accumulate(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return Tensor._from_op(data, (a, b), back)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """2-D convolution (cross-correlation) with zero padding and groups.

    Computed as a tap-wise accumulation of channel GEMMs, which keeps the
    memory footprint linear in the input size (no full im2col buffer).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D, got shape {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(
            f"groups={groups} must divide in-channels {cin} and out-channels {cout}"
        )
    if cg != cin // groups:
        raise DimensionError(
            f"weight channel axis is {cg}, expected {cin // groups} (= Cin/groups)"
        )
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"spatial output extent would be {ho}x{wo} for input {h}x{wd}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    depthwise = groups == cin and cout == cin and cg == 1

    if depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                out += w.data[:, 0, i, j][None, :, None, None] * xs
    elif groups == 1:
        acc = np.zeros((n, ho, wo, cout), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                acc += np.tensordot(xs, w.data[:, :, i, j], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    else:
        out = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
        dg = cout // groups
        for gidx in range(groups):
            xs_g = xp[:, gidx * cg : (gidx + 1) * cg]
            wg = w.data[gidx * dg : (gidx + 1) * dg]
            acc = np.zeros((n, ho, wo, dg), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    xs = xs_g[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                    acc += np.tensordot(xs, wg[:, :, i, j], axes=([1], [1]))
            out[:, gidx * dg : (gidx + 1) * dg] = acc.transpose(0, 3, 1, 2)

    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                    dw[:, 0, i, j] = (g * xs).sum(axis=(0, 2, 3))
                    dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                        w.data[:, 0, i, j][None, :, None, None] * g
                    )
        elif groups == 1:
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                    dw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
        else:
            dg_ = cout // groups
            for gidx in range(groups):
                sl_in = slice(gidx * cg, (gidx + 1) * cg)
                sl_out = slice(gidx * dg_, (gidx + 1) * dg_)
                gg = g[:, sl_out]
                wg = w.data[sl_out]
                for i in range(kh):
                    for j in range(kw):
                        xs = xp[:, sl_in, i : i + sh * ho : sh, j : j + sw * wo : sw]
                        dw[sl_out, :, i, j] = np.tensordot(
                            gg, xs, axes=([0, 2, 3], [0, 2, 3])
                        )
                        contrib = np.tensordot(gg, wg[:, :, i, j], axes=([1], [0]))
                        dxp[:, sl_in, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                            contrib.transpose(0, 3, 1, 2)
                        )
        _accumulate(w, dw)
        _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + wd])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, back)


def dws_conv3x3(x, dw_weight, dw_bias, pw_weight, pw_bias):
    """Depthwise 3x3 (pad 1) followed by pointwise 1x1 convolution."""
    mid = conv2d(x, dw_weight, dw_bias, stride=1, pad=1, groups=x.shape[1])
    return conv2d(mid, pw_weight, pw_bias)


# ---------------------------------------------------------------------------
# pooling


def max_pool2x2(x):
    """2x2 stride-2 max pool; odd extents are right/bottom padded with -inf-like."""
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise DimensionError("max_pool2x2 on empty spatial extent")
    ph, pw = h % 2, w % 2
    fill = np.finfo(x.data.dtype).min
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp // 2, wp // 2
    windows = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)  # first index wins ties (row-major in window)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gp = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gp = gp.reshape(n, c, hp, wp)
        _accumulate(x, gp[:, :, :h, :w])

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back)


def global_avg_pool(x):
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise DimensionError("global_avg_pool on empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def back(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return Tensor._from_op(out, (x,), back)


def global_max_pool(x):
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise DimensionError("global_max_pool on empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

    def back(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g.reshape(n, c, 1), axis=-1)
        _accumulate(x, gf.reshape(x.shape))

    return Tensor._from_op(out, (x,), back)


def pool(x, kind):
    """Spec-surface dispatcher over the three pooling variants."""
    ops = {
        "max2x2-stride2": max_pool2x2,
        "global_avg": global_avg_pool,
        "global_max": global_max_pool,
    }
    if kind not in ops:
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    return ops[kind](x)


# ---------------------------------------------------------------------------
# resampling


def _linear_weights(n_in, n_out, dtype):
    """Align-corners interpolation matrix of shape (n_out, n_in)."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_out > 1 and n_in > 1:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    else:
        pos = np.zeros(n_out, dtype=np.float64)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_resize(x, out_h, out_w):
    """Align-corners bilinear resampling; same-size resize is the exact identity."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extents must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    wh = _linear_weights(h, out_h, x.data.dtype)
    ww = _linear_weights(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(wh, x.data), ww.T)

    def back(g):
        _accumulate(x, np.matmul(np.matmul(wh.T, g), ww))

    return Tensor._from_op(out, (x,), back)


# ---------------------------------------------------------------------------
# normalization


class BatchNormState:
    """Running mean/variance for eval-mode batch normalization."""

    def __init__(self, channels, momentum=0.1):
        self.channels = channels
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.count = 0

    @property
    def populated(self):
        return self.count > 0

    def update(self, mean, var):
        if self.count == 0:
            self.running_mean = np.asarray(mean, dtype=np.float64).copy()
            self.running_var = np.asarray(var, dtype=np.float64).copy()
        else:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        self.count += 1


def _affine(y, scale, shift):
    s = reshape(scale, (1, -1, 1, 1))
    b = reshape(shift, (1, -1, 1, 1))
    return add(mul(y, s), b)


def layer_norm(x, scale, shift, eps=1e-5):
    """Normalize over C,H,W per sample, then apply the channel affine."""
    axes = (1, 2, 3)
    mu = mean_(x, axis=axes, keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axis=axes, keepdims=True)
    y = mul(xc, pow_(add(var, float(eps)), -0.5))
    return _affine(y, scale, shift)


def batch_norm(x, scale, shift, state, mode, eps=1e-5):
    """Normalize over N,H,W per channel; eval mode uses running statistics."""
    if mode == "train":
        axes = (0, 2, 3)
        mu = mean_(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = mean_(mul(xc, xc), axis=axes, keepdims=True)
        state.update(mu.data.reshape(-1), var.data.reshape(-1))
        y = mul(xc, pow_(add(var, float(eps)), -0.5))
    elif mode == "eval":
        if not state.populated:
            raise StateError("eval-mode batch norm before any training batch")
        rm = state.running_mean.astype(x.data.dtype).reshape(1, -1, 1, 1)
        rs = (1.0 / np.sqrt(state.running_var + eps)).astype(x.data.dtype)
        y = mul(sub(x, rm), rs.reshape(1, -1, 1, 1))
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    return _affine(y, scale, shift)


def normalize(x, kind, scale, shift, state=None, eps=1e-5, mode="train"):
    """Spec-surface dispatcher over layer / batch normalization."""
    if kind == "layer":
        return layer_norm(x, scale, shift, eps)
    if kind == "batch":
        if state is None:
            raise UsageError("batch normalization requires a BatchNormState")
        return batch_norm(x, scale, shift, state, mode, eps)
    raise ConfigurationError(f"unknown normalization kind {kind!r}")


# ---------------------------------------------------------------------------
# activations and softmax

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x):
    mask = (x.data > 0).astype(x.data.dtype)
    return Tensor._from_op(x.data * mask, (x,), lambda g: _accumulate(x, g * mask))


def sigmoid(x):
    # expit-style stable evaluation
    data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    ).astype(x.data.dtype)
    # keep outputs strictly inside (0, 1) even when the exp saturates
    tiny = np.finfo(data.dtype).tiny
    eps1 = np.float64(1.0) - np.finfo(data.dtype).epsneg
    data = np.clip(data, tiny, eps1.astype(data.dtype))

    def back(g):
        _accumulate(x, g * data * (1.0 - data))

    return Tensor._from_op(data, (x,), back)


def gelu(x):
    """Exact Gaussian-CDF GeLU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = (x.data * phi_cdf).astype(x.data.dtype)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (phi_cdf + x.data * pdf))

    return Tensor._from_op(data, (x,), back)


def activation(x, kind):
    ops = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
    if kind not in ops:
        raise ConfigurationError(f"unknown activation kind {kind!r}")
    return ops[kind](x)


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - dot))

    return Tensor._from_op(data, (x,), back)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    data = x.data.reshape(shape)
    return Tensor._from_op(data, (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)
    return Tensor._from_op(
        data, (x,), lambda g: _accumulate(x, g.transpose(inverse))
    )


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor._from_op(data, tensors, back)


def channel_shuffle(x, groups):
    """Permute channels: index i moves to (i mod g) * (C/g) + i // g."""
    c = x.shape[1]
    if c % groups != 0:
        raise ConfigurationError(f"groups={groups} does not divide {c} channels")
    dest = (np.arange(c) % groups) * (c // groups) + np.arange(c) // groups
    src = np.argsort(dest)
    data = x.data[:, src]

    def back(g):
        _accumulate(x, g[:, dest])

    return Tensor._from_op(np.ascontiguousarray(data), (x,), back)


def dropout(x, p, mode, rng=None):
    """Inverted dropout; identity in eval mode, deterministic under a fixed rng."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return Tensor._from_op(x.data, (x,), lambda g: _accumulate(x, g))
    if mode != "train":
        raise ConfigurationError(f"unknown mode {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout requires an rng")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: _accumulate(x, g * mask))


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Ordered, named collection of leaf tensors; the unit of checkpointing.

    Initialization is fan-in-scaled uniform for convolution weights, zeros
    for biases and shifts, ones for normalization scales, all drawn from a
    generator seeded with ``rng_seed`` so builds are reproducible.
    """

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._entries = {}

    def add(self, name, data):
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        if not t.is_leaf():
            raise UsageError(f"parameter {name!r} must be a leaf tensor")
        self._entries[name] = t
        return t

    def conv_weight(self, name, cout, cin_g, kh, kw):
        fan_in = cin_g * kh * kw
        bound = 1.0 / math.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=(cout, cin_g, kh, kw))
        return self.add(name, data.astype(_DEFAULT_DTYPE))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape, dtype=_DEFAULT_DTYPE))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape, dtype=_DEFAULT_DTYPE))

    def full(self, name, shape, value):
        return self.add(name, np.full(shape, value, dtype=_DEFAULT_DTYPE))

    def scalar(self, name, value):
        return self.add(name, np.asarray(float(value), dtype=_DEFAULT_DTYPE))

    def matrix(self, name, rows, cols, scale=None):
        bound = scale if scale is not None else 1.0 / math.sqrt(cols)
        data = self._rng.uniform(-bound, bound, size=(rows, cols))
        return self.add(name, data.astype(_DEFAULT_DTYPE))

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def param_count(self):
        return sum(t.size for t in self._entries.values())

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def copy_values(self):
        return {name: t.data.copy() for name, t in self._entries.items()}

    def load_values(self, values):
        for name, t in self._entries.items():
            if name not in values:
                raise UsageError(f"missing value for parameter {name!r}")
            arr = np.asarray(values[name])
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r} shape {arr.shape} != {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor and be deterministic (run dropout
    in eval mode); determinism is verified by evaluating twice.
    """
    y = f(x)
    y2 = f(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise UsageError("f must return a scalar Tensor")
    if float(y.data.reshape(())) != float(y2.data.reshape(())):
        raise UsageError("f is not deterministic; finite differences are invalid")

    x.grad = None
    if not y.is_leaf():
        backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data.reshape(()))
        flat[i] = orig - h
        fm = float(f(x).data.reshape(()))
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    # The 1e-3 floor keeps finite-difference roundoff noise on (near-)zero
    # gradients from registering as a large relative disagreement.
    rel = np.abs(analytic - numeric) / np.maximum(
        np.abs(analytic) + np.abs(numeric), 1e-3
    )
    return float(rel.max()) if rel.size else 0.0
