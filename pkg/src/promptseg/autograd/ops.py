"""Differentiable network ops built on the tape in ``tensor``.

Convolution is im2col plus one BLAS matmul; its backward scatters column
gradients back with k*k strided slice additions in a fixed loop order, so
results are bit-reproducible on repeated runs.  Bilinear upsampling is a pair
of precomputed interpolation matrices applied as batched matmuls.
"""

from functools import lru_cache

import numpy as np

from .tensor import (
    DegenerateBatchError,
    ShapeError,
    Tensor,
    apply_op,
    current_dtype,
)


def _as_tensor(x, name):
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor")
    return x


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp, k, stride, out_h, out_w):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, out_h, out_w), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * out_h : stride,
                                    kj : kj + stride * out_w : stride]
    return cols


def _col2im(dcols, xp_shape, k, stride, out_h, out_w):
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * out_h : stride,
                kj : kj + stride * out_w : stride] += dcols[:, :, ki, kj]
    return dxp


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D convolution, NCHW input, OIHW weight, square kernel.

    Output spatial size is floor((H + 2*padding - k) / stride) + 1.
    """
    _as_tensor(x, "x"), _as_tensor(weight, "weight"), _as_tensor(bias, "bias")
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (out, in, k, k), got {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, c_in_w, k, _ = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1 or h + 2 * padding < k:
        raise ShapeError(f"conv2d kernel {k} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols6 = _im2col(xp, k, stride, out_h, out_w)
    # rows: every output position, columns: the receptive field
    cols = cols6.transpose(0, 4, 5, 1, 2, 3).reshape(b * out_h * out_w, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(b, out_h, out_w, c_out).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, out_h, out_w, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
            dxp = _col2im(np.ascontiguousarray(dcols), xp.shape, k, stride, out_h, out_w)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    return apply_op("conv2d", out, (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# batch norm

class BnState:
    """Running statistics for one batch-norm layer (mutated only in train mode)."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(channels, dtype=current_dtype())
        self.running_var = np.ones(channels, dtype=current_dtype())
        self.momentum = momentum
        self.eps = eps


def batch_norm2d(x, gamma, beta, state, training):
    """Per-channel batch norm over (B, H, W).

    Train mode normalizes with biased batch statistics and updates running
    stats with momentum (unbiased variance, the usual convention).  Eval mode
    uses the stored running statistics and mutates nothing.
    """
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be 4-D NCHW, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d affine params must be ({c},)")
    eps = state.eps

    if training:
        n = b * h * w
        if n < 2:
            raise DegenerateBatchError(
                f"batch_norm2d train mode needs at least 2 values per channel, got {n}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
        m = state.momentum
        state.running_mean += m * (mean.astype(state.running_mean.dtype) - state.running_mean)
        unbiased = var * (n / (n - 1))
        state.running_var += m * (unbiased.astype(state.running_var.dtype) - state.running_var)
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        inv = inv.astype(x.data.dtype)
        xhat = (x.data - state.running_mean.astype(x.data.dtype)[:, None, None]) * inv[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                n = b * h * w
                gsum = g.sum(axis=(0, 2, 3))
                gxhat = (g * xhat).sum(axis=(0, 2, 3))
                gx = (gamma.data * inv / n)[:, None, None] * (
                    n * g - gsum[:, None, None] - xhat * gxhat[:, None, None]
                )
            else:
                gx = g * (gamma.data * inv)[:, None, None]
        return gx, ggamma, gbeta

    return apply_op("batch_norm2d", out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# activations

def relu(x):
    _as_tensor(x, "x")
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return apply_op("relu", x.data * mask, (x,), backward_fn)


def tanh(x):
    _as_tensor(x, "x")
    out = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return apply_op("tanh", out, (x,), backward_fn)


def sigmoid(x):
    _as_tensor(x, "x")
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", out, (x,), backward_fn)


def softmax(x, axis=-1):
    _as_tensor(x, "x")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra

def linear(x, weight, bias):
    """Affine map of row vectors: (B, D_in) @ (D_in, D_out) + (D_out,)."""
    _as_tensor(x, "x")
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear mismatch: x {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias must be ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return apply_op("linear", out, (x, weight, bias), backward_fn)


def adaptive_avg_pool_to_1(x):
    """Mean over the spatial grid: (B, C, H, W) -> (B, C, 1, 1)."""
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool_to_1 input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return apply_op("adaptive_avg_pool_to_1", out, (x,), backward_fn)


@lru_cache(maxsize=64)
def _interp_matrix(n_in, n_out):
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resize of (B, C, h, w) up to (B, C, out_h, out_w)."""
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    mh = _interp_matrix(h, out_h).astype(x.data.dtype)
    mw = _interp_matrix(w, out_w).astype(x.data.dtype)
    flat = x.data.reshape(b * c, h, w)
    out = (mh[None] @ flat @ mw.T[None]).reshape(b, c, out_h, out_w)

    def backward_fn(g):
        gflat = g.reshape(b * c, out_h, out_w)
        gx = (mh.T[None] @ gflat @ mw[None]).reshape(b, c, h, w)
        return (gx,)

    return apply_op("bilinear_upsample", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# normalization and losses

def _l2_normalize(x, axes, eps):
    norms = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.data / denom
    small = norms <= eps

    def backward_fn(g):
        # d(p/||p||)/dp = (g - out * <out, g>) / ||p||; below the eps floor the
        # denominator is constant so the second term vanishes.
        dot = (g * out).sum(axis=axes, keepdims=True)
        dot = np.where(small, 0.0, dot)
        return ((g - out * dot) / denom,)

    return out, backward_fn


def l2_normalize_channels(x, eps=1e-8):
    """Scale each (b, c) spatial plane of (B, C, H, W) to unit L2 norm."""
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"l2_normalize_channels input must be 4-D, got {x.shape}")
    out, backward_fn = _l2_normalize(x, (2, 3), eps)
    return apply_op("l2_normalize_channels", out, (x,), backward_fn)


def l2_normalize_tensor(x, eps=1e-8):
    """Scale each sample of (B, C, H, W) to unit L2 norm over all of C, H, W."""
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"l2_normalize_tensor input must be 4-D, got {x.shape}")
    out, backward_fn = _l2_normalize(x, (1, 2, 3), eps)
    return apply_op("l2_normalize_tensor", out, (x,), backward_fn)


def cross_entropy(logits, target, ignore_index=None):
    """Mean cross-entropy from raw logits against integer class targets.

    Accepts (B, K) with (B,) targets or (B, K, H, W) with (B, H, W) targets.
    Pixels equal to ``ignore_index`` contribute nothing; the mean is over the
    remaining positions.
    """
    _as_tensor(logits, "logits")
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise TypeError("cross_entropy target must be an integer array")
    if logits.ndim == 2:
        b, k = logits.shape
        x3 = logits.data.reshape(b, k, 1)
        t2 = target.reshape(b, 1)
    elif logits.ndim == 4:
        b, k, h, w = logits.shape
        if target.shape != (b, h, w):
            raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
        x3 = logits.data.reshape(b, k, h * w)
        t2 = target.reshape(b, h * w)
    else:
        raise ShapeError(f"cross_entropy logits must be 2-D or 4-D, got {logits.shape}")

    valid = np.ones(t2.shape, dtype=bool) if ignore_index is None else (t2 != ignore_index)
    checked = t2[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        raise ValueError(f"cross_entropy target out of range for {k} classes")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy has no valid target positions")

    m = x3.max(axis=1, keepdims=True)
    z = x3 - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    t_safe = np.where(valid, t2, 0)
    picked = np.take_along_axis(x3, t_safe[:, None, :], axis=1)[:, 0]
    nll = (lse - picked) * valid
    loss = np.asarray(nll.sum() / n_valid)

    def backward_fn(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
        np.put_along_axis(p, t_safe[:, None, :], np.take_along_axis(p, t_safe[:, None, :], axis=1) - 1.0, axis=1)
        p *= valid[:, None, :]
        p *= g.reshape(()) / n_valid
        return (p.reshape(logits.shape),)

    return apply_op("cross_entropy", loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# prompt-specific structural ops

def embed2d(x, out_h, out_w, row, col):
    """Paste (B, C, h, w) into a zero canvas of (B, C, out_h, out_w) at (row, col)."""
    _as_tensor(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"embed2d input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if row < 0 or col < 0 or row + h > out_h or col + w > out_w:
        raise ShapeError(
            f"embed2d block {h}x{w} at ({row}, {col}) exceeds canvas {out_h}x{out_w}"
        )
    out = np.zeros((b, c, out_h, out_w), dtype=x.data.dtype)
    out[:, :, row : row + h, col : col + w] = x.data

    def backward_fn(g):
        return (np.ascontiguousarray(g[:, :, row : row + h, col : col + w]),)

    return apply_op("embed2d", out, (x,), backward_fn)


def slice_axis1(x, start, stop):
    """Take ``x[:, start:stop]``; the gradient zero-pads the dropped slots."""
    _as_tensor(x, "x")
    if x.ndim < 2:
        raise ShapeError(f"slice_axis1 input must be at least 2-D, got {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_axis1 range [{start}, {stop}) invalid for axis of {x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return apply_op("slice_axis1", out, (x,), backward_fn)


def bilinear_scores(q, keys):
    """Row-wise dot products: (B, d) x (B, n, d) -> (B, n)."""
    _as_tensor(q, "q"), _as_tensor(keys, "keys")
    if q.ndim != 2 or keys.ndim != 3 or q.shape[0] != keys.shape[0] or q.shape[1] != keys.shape[2]:
        raise ShapeError(f"bilinear_scores mismatch: q {q.shape}, keys {keys.shape}")
    out = np.einsum("bd,bnd->bn", q.data, keys.data)

    def backward_fn(g):
        gq = np.einsum("bn,bnd->bd", g, keys.data) if q.requires_grad else None
        gk = np.einsum("bn,bd->bnd", g, q.data) if keys.requires_grad else None
        return gq, gk

    return apply_op("bilinear_scores", out, (q, keys), backward_fn)


def weighted_sum(weights, stack):
    """Blend a constant prompt stack (B, n, C, H, W) with weights (B, n).

    The stack is plain data by design: gradients flow only into the weights.
    """
    _as_tensor(weights, "weights")
    stack = np.asarray(stack)
    if weights.ndim != 2 or stack.ndim != 5 or stack.shape[:2] != weights.shape:
        raise ShapeError(f"weighted_sum mismatch: weights {weights.shape}, stack {stack.shape}")
    out = np.einsum("bn,bnchw->bchw", weights.data, stack)

    def backward_fn(g):
        return (np.einsum("bchw,bnchw->bn", g, stack),)

    return apply_op("weighted_sum", out, (weights,), backward_fn)
