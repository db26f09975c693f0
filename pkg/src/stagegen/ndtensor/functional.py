"""Differentiable layer vocabulary used by the generators and discriminators.

Every op takes and returns :class:`Tensor` objects and keeps the dtype of its
inputs, so the same code runs in float32 for training and float64 inside
:func:`~stagegen.ndtensor.gradcheck.grad_check`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

BN_EPS = 1e-5
LEAKY_SLOPE = 0.2


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scalar_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _scalar_like(a, b)
    a = as_tensor(a)
    b = _scalar_like(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor.from_op(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return tuple(parts)

    return Tensor.from_op(out, tensors, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]}",
            dim="in_features",
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor.from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded NCHW input -> (N, Ho, Wo, C, kh, kw) patch view (copied)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    """Scatter-add (N, Ho, Wo, C, kh, kw) patches into an (N, C, out_h, out_w) canvas."""
    n, ho, wo, c, kh, kw = cols.shape
    canvas = np.zeros((n, c, out_h, out_w), dtype=cols.dtype)
    patches = cols.transpose(0, 3, 4, 5, 1, 2)  # N C kh kw Ho Wo
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    return canvas


def _check_conv_args(x: Tensor, weight: Tensor, in_axis: int, stride: int, padding: int, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got rank {x.ndim}", dim="rank")
    if weight.ndim != 4:
        raise ShapeError(f"{op}: weight must be rank 4, got rank {weight.ndim}", dim="rank")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            f"{op}: input channels C={x.shape[1]} do not match weight dim {in_axis} "
            f"({weight.shape[in_axis]})",
            dim="C",
        )
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}", dim="stride")
    if padding < 0:
        raise ShapeError(f"{op}: padding must be >= 0, got {padding}", dim="padding")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is (O, I, Kh, Kw)."""
    _check_conv_args(x, weight, 1, stride, padding, "conv2d")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}", dim="H")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = _col2im(gcols, hp, wp, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``weight`` is (I, O, Kh, Kw)."""
    _check_conv_args(x, weight, 0, stride, padding, "conv_transpose2d")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError("conv_transpose2d: padding leaves an empty output", dim="padding")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, -1)
    cols = (xm @ wmat).reshape(n, h, w, cout, kh, kw)
    full = _col2im(cols, hf, wf, stride)
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gf, kh, kw, stride).reshape(n * h * w, cout * kh * kw)
        gw = (xm.T @ gcols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, parents, backward)


def _reflect_index(size: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, size + pad)
    idx = np.abs(idx)
    return np.where(idx >= size, 2 * (size - 1) - idx, idx)


def reflect_pad2d(x: Tensor, pad: int) -> Tensor:
    """Mirror padding without repeating the edge pixel (numpy's ``reflect``)."""
    if pad == 0:
        return x
    h, w = x.shape[2], x.shape[3]
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect_pad2d: pad {pad} must be smaller than H={h}, W={w}", dim="H")
    rows, cols = _reflect_index(h, pad), _reflect_index(w, pad)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        gw = np.zeros(g.shape[:3] + (w,), dtype=g.dtype)
        for j, src in enumerate(cols):
            gw[..., src] += g[..., j]
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, src in enumerate(rows):
            gx[:, :, src, :] += gw[:, :, i, :]
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _norm_backward(g, xhat, inv_std, gamma, axes, m):
    dxhat = g * gamma
    return inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Optional[np.ndarray] = None,
                 running_var: Optional[np.ndarray] = None,
                 training: bool = True, momentum: float = 0.1,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running buffers (if given) are updated in place with
    ``momentum``; the variance buffer tracks the unbiased estimate.
    """
    n, c = x.shape[0], x.shape[1]
    if n == 0:
        raise ShapeError("batch_norm2d: batch size 0", dim="N")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta must have length C={c}", dim="C")
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        m = x.data.size // c
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(c)
        if running_var is not None:
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm2d: eval mode needs running statistics")
        mu = running_mean.reshape(shape).astype(x.dtype)
        var = running_var.reshape(shape).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if training:
            gx = _norm_backward(g, xhat, inv_std, g_, axes, None)
        else:
            gx = g * g_ * inv_std
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-(sample, channel) normalization over (H, W) with an affine map."""
    n, c = x.shape[0], x.shape[1]
    if n == 0:
        raise ShapeError("instance_norm2d: batch size 0", dim="N")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm2d: gamma/beta must have length C={c}", dim="C")
    shape = (1, c, 1, 1)
    axes = (2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)

    def backward(g):
        gx = _norm_backward(g, xhat, inv_std, g_, axes, None)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    out = x.data * scale
    return Tensor.from_op(out, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    # clip keeps generator outputs strictly inside (-1, 1) even when the
    # float rounding of tanh lands on +-1
    bound = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    out = np.clip(np.tanh(x.data), -bound, bound)
    return Tensor.from_op(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, overflow-safe."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    t = np.broadcast_to(t, logits.shape)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    # softplus(z) - t*z, with softplus(z) = max(z, 0) + log1p(exp(-|z|))
    per = np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per.sum() / n, dtype=logits.dtype)

    def backward(g):
        return ((_stable_sigmoid(z) - t) * (g / n),)

    return Tensor.from_op(out, (logits,), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference; the subgradient at exact ties is 0."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {tgt.shape} differ", dim="shape")
    diff = pred.data - tgt
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)
    sign = np.sign(diff)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        gp = sign * (g / n)
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return Tensor.from_op(out, parents, backward)
