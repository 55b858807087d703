"""Differentiable neural-network operations on :class:`~metamix.autograd.Tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, as_tensor, get_dtype

BN_EPS = 1e-5


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    return Tensor._from_op(np.clip(x.data, 0.0, 6.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * s,))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = softmax_array(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._from_op(
        out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),)
    )


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    lp = log_softmax(logits, axis=1)
    return -(lp[np.arange(n), labels].sum() * (1.0 / n))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


# -- convolution --------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise ValueError(f"conv2d: channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(
            f"conv2d: weight expects {cg} input channels per group, input has {c // groups}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
        )
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view, strided, then materialised as (N*Ho*Wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c = xp_shape[:2]
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _conv_dense(x, w, stride, padding, ho, wo):
    n = x.shape[0]
    o, c, kh, kw = w.shape
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
        dx = dxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else dxp
        return dx, dw

    return np.ascontiguousarray(out), backward


def _conv_depthwise(x, w, stride, padding, ho, wo):
    # one filter per channel: accumulate the kh*kw shifted taps
    kh, kw = w.shape[2:]
    xp = _pad(x, padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += tap * w[None, :, 0, i, j, None, None]

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                      slice(j, j + stride * wo, stride))
                dw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += g * w[None, :, 0, i, j, None, None]
        dx = dxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else dxp
        return dx, dw

    return out, backward


def _conv_grouped(x, w, stride, padding, groups, ho, wo):
    cg = x.shape[1] // groups
    og = w.shape[0] // groups
    parts = [
        _conv_dense(x[:, g * cg:(g + 1) * cg], w[g * og:(g + 1) * og], stride, padding, ho, wo)
        for g in range(groups)
    ]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def backward(gr):
        dxs, dws = [], []
        for g, (_, bw) in enumerate(parts):
            dx, dw = bw(gr[:, g * og:(g + 1) * og])
            dxs.append(dx)
            dws.append(dw)
        return np.concatenate(dxs, axis=1), np.concatenate(dws, axis=0)

    return out, backward


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weight, no bias.

    Dense convolutions go through im2col and a single matrix product;
    depthwise ones (``groups == channels``, one filter each) use per-tap
    accumulation, other groupings loop over groups.
    """
    ho, wo = _check_conv(x.data, weight.data, stride, padding, groups)
    c = x.shape[1]
    if groups == 1:
        out, bw = _conv_dense(x.data, weight.data, stride, padding, ho, wo)
    elif groups == c and weight.shape[0] == c:
        out, bw = _conv_depthwise(x.data, weight.data, stride, padding, ho, wo)
    else:
        out, bw = _conv_grouped(x.data, weight.data, stride, padding, groups, ho, wo)
    return Tensor._from_op(out, (x, weight), bw)


# -- batch norm -----------------------------------------------------------------


@dataclass
class BNState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_updates: int = 0

    @classmethod
    def create(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels, dtype=get_dtype()), np.ones(channels, dtype=get_dtype()))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    momentum: float = 0.1,
    training: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalisation over all axes but the channel axis (axis 1).

    Training mode normalises with the biased batch variance and updates the
    running statistics as ``(1 - momentum) * running + momentum * batch``,
    using the unbiased variance for the running estimate.
    """
    if not 0.0 < momentum <= 1.0:
        raise ValueError(f"momentum must be in (0, 1], got {momentum}")
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects (N, C) or (N, C, H, W) input, got {x.shape}")
    c = x.shape[1]
    if state.running_mean.shape != (c,) or state.running_var.shape != (c,):
        raise ValueError(f"batch_norm state sized {state.running_mean.shape}, input has {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    m = xd.size // c

    if training:
        if m <= 1:
            raise ValueError(
                f"batch_norm in training mode needs more than one value per channel, got {m}"
            )
        mean = xd.mean(axis=axes)
        xc = xd - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mean
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var * (m / (m - 1))
        state.num_updates += 1
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv.reshape(bshape)

    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gd
        if training:
            dx = inv.reshape(bshape) * (
                gx - gx.mean(axis=axes, keepdims=True)
                - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)
