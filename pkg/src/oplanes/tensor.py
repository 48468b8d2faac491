"""Minimal tensor with reverse-mode gradients for the fixed op set the model needs.

Ops keep the canonical image layout (batch, channels, height, width); 3-D
inputs (channels, height, width) are accepted and treated as batch size 1.
Every op has a hand-written backward kernel, validated against central finite
differences (see ``finite_difference_check``).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "AdamState",
    "ShapeError",
    "ConfigError",
    "UpdateError",
    "conv2d",
    "group_norm",
    "relu",
    "sigmoid",
    "bilinear_upsample",
    "avg_pool2x",
    "concat_channels",
    "pixelwise_inner_product",
    "broadcast_batch",
    "add",
    "scale",
    "tensor_sum",
    "adam_step",
    "zero_grads",
    "finite_difference_check",
    "kaiming_uniform",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op was configured with invalid hyperparameters."""


class UpdateError(RuntimeError):
    """An optimizer update could not be applied."""


class Tensor:
    """A numpy array plus an optional backward closure on a flat tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (must be scalar if grad omitted)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


class Param(Tensor):
    """A named trainable tensor; ``grad`` is reset to zeros by ``zero_grads``."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad or p._parents or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as4d(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected 3-D or 4-D image tensor, got shape {x.shape}")


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def conv2d(inp: Tensor, weight: Param, bias: Param) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    weight: (out_ch, in_ch, k, k) with odd k; bias: (out_ch,).
    """
    x, squeeze = _as4d(inp.data)
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weight must be (out, in, k, k), got {w.shape}")
    out_ch, in_ch, k, _ = w.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {in_ch}")
    if bias.data.shape != (out_ch,):
        raise ShapeError(f"bias must have shape ({out_ch},), got {bias.data.shape}")
    n, _, h, wd = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, out_ch, h, wd), dtype=x.dtype)
    out[:] = bias.data[None, :, None, None]
    # One matmul per kernel tap and batch element keeps memory flat (no im2col
    # buffer) and gives every element the same GEMM shape, so results are
    # bitwise independent of how a plane batch is chunked.
    for ky in range(k):
        for kx in range(k):
            tap = w[:, :, ky, kx]
            for i in range(n):
                patch = xp[i, :, ky:ky + h, kx:kx + wd]
                out[i] += np.tensordot(patch, tap, axes=([0], [1])).transpose(2, 0, 1)
    res = out[0] if squeeze else out

    def backward(grad):
        g = grad[None] if squeeze else grad
        if weight.requires_grad:
            gw = np.empty_like(w)
            for ky in range(k):
                for kx in range(k):
                    patch = xp[:, :, ky:ky + h, kx:kx + wd]
                    gw[:, :, ky, kx] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
            weight.accumulate_grad(gw)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if inp.requires_grad or inp._parents or isinstance(inp, Param):
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + h, kx:kx + wd] += np.tensordot(
                        g, w[:, :, ky, kx], axes=([1], [0])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd]
            inp.accumulate_grad(gx[0] if squeeze else gx)

    return _make(res, (inp, weight, bias), backward)


# ---------------------------------------------------------------------------
# group normalization


def group_norm(inp: Tensor, groups: int, gamma: Param, beta: Param, eps: float = 1e-5) -> Tensor:
    x, squeeze = _as4d(inp.data)
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"{c} channels not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("gamma/beta length must equal the channel count")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    res = out[0] if squeeze else out

    def backward(grad):
        g = grad[None] if squeeze else grad
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        gx_hat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m = xh.shape[2]
        # d/dx of (x - mean) * inv with mean/var of the same group.
        t1 = gx_hat
        t2 = gx_hat.mean(axis=2, keepdims=True)
        t3 = (gx_hat * xh).mean(axis=2, keepdims=True) * xh
        gx = (inv * (t1 - t2 - t3)).reshape(n, c, h, w)
        inp.accumulate_grad(gx[0] if squeeze else gx)

    return _make(res, (inp, gamma, beta), backward)


# ---------------------------------------------------------------------------
# elementwise / structural


def relu(inp: Tensor) -> Tensor:
    out = np.maximum(inp.data, 0)

    def backward(grad):
        inp.accumulate_grad(grad * (inp.data > 0))

    return _make(out, (inp,), backward)


def sigmoid(inp: Tensor) -> Tensor:
    out = _sigmoid_np(inp.data)

    def backward(grad):
        inp.accumulate_grad(grad * out * (1.0 - out))

    return _make(out, (inp,), backward)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(grad):
        a.accumulate_grad(grad)
        b.accumulate_grad(grad)

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def backward(grad):
        a.accumulate_grad(grad * s)

    return _make(out, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(grad):
        a.accumulate_grad(np.broadcast_to(grad, a.data.shape).astype(a.data.dtype))

    return _make(out, (a,), backward)


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    datas = [p.data for p in parts]
    nd = datas[0].ndim
    axis = 0 if nd == 3 else 1
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = (slice(None),) * axis + (slice(lo, hi),)
            p.accumulate_grad(grad[sl])

    return _make(out, tuple(parts), backward)


def pixelwise_inner_product(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel channel dot product: (.., C, h, w) x 2 -> (.., 1, h, w)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    axis = 0 if a.data.ndim == 3 else 1
    out = (a.data * b.data).sum(axis=axis, keepdims=True)

    def backward(grad):
        a.accumulate_grad(grad * b.data)
        b.accumulate_grad(grad * a.data)

    return _make(out, (a, b), backward)


def broadcast_batch(a: Tensor, n: int) -> Tensor:
    """Tile a (C, h, w) tensor into (n, C, h, w); backward sums over the batch."""
    if a.data.ndim != 3:
        raise ShapeError("broadcast_batch expects a 3-D tensor")
    out = np.broadcast_to(a.data[None], (n,) + a.data.shape).copy()

    def backward(grad):
        a.accumulate_grad(grad.sum(axis=0))

    return _make(out, (a,), backward)


def avg_pool2x(inp: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (spatial dims must be even)."""
    x, squeeze = _as4d(inp.data)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"avg_pool2x needs even spatial dims, got {h}x{w}")
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    res = out[0] if squeeze else out

    def backward(grad):
        g = grad[None] if squeeze else grad
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        inp.accumulate_grad(gx[0] if squeeze else gx)

    return _make(res, (inp,), backward)


def _bilinear_coeffs(out_size, in_size, dtype):
    # align-corners-false sampling positions, edge-clamped
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, in_size - 2) if in_size > 1 else i0
    frac = pos - i0
    return i0, frac.astype(dtype)


def bilinear_upsample(inp: Tensor, out_h: int, out_w: int) -> Tensor:
    x, squeeze = _as4d(inp.data)
    n, c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ConfigError("output size must be positive")
    if out_h < h or out_w < w:
        raise ConfigError("bilinear_upsample cannot shrink the input")
    y0, fy = _bilinear_coeffs(out_h, h, x.dtype)
    x0, fx = _bilinear_coeffs(out_w, w, x.dtype)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = (1.0 - fx)[None, :]
    wx1 = fx[None, :]
    top = x[:, :, y0][:, :, :, x0] * (wy0 * wx0) + x[:, :, y0][:, :, :, x1] * (wy0 * wx1)
    bot = x[:, :, y1][:, :, :, x0] * (wy1 * wx0) + x[:, :, y1][:, :, :, x1] * (wy1 * wx1)
    out = (top + bot).astype(x.dtype)
    res = out[0] if squeeze else out

    def backward(grad):
        g = grad[None] if squeeze else grad
        gx = np.zeros_like(x)
        yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        for iy, ix, wgt in ((yy0, xx0, wy0 * wx0), (yy0, xx1, wy0 * wx1),
                            (yy1, xx0, wy1 * wx0), (yy1, xx1, wy1 * wx1)):
            np.add.at(gx, (slice(None), slice(None), iy, ix), g * wgt)
        inp.accumulate_grad(gx[0] if squeeze else gx)

    return _make(res, (inp,), backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers keyed by parameter identity plus a step count."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def buffers(self, param):
        key = id(param)
        if key not in self.m:
            self.m[key] = np.zeros_like(param.data)
            self.v[key] = np.zeros_like(param.data)
        return self.m[key], self.v[key]


def adam_step(params, state: AdamState, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; caller zeroes gradients afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise UpdateError(f"non-finite gradient for parameter '{p.name}'")
        m, v = state.buffers(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(loss_fn, tensors, epsilon=1e-4):
    """Compare analytic gradients of ``loss_fn`` against central differences.

    loss_fn maps the given tensors to a scalar Tensor. Returns the max relative
    error over every coordinate of every tensor, with denominator
    max(|analytic|, |numeric|, 1e-8). Inputs should be 64-bit.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
        t.requires_grad = True
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(loss_fn().data)
            flat[i] = orig - epsilon
            lm = float(loss_fn().data)
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * epsilon)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(analytic - num) / denom))
        worst = max(worst, err)
    return worst
