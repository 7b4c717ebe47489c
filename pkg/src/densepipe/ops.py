"""Differentiable layer primitives (forward + backward) on :class:`Tensor`.

Layout is NCHW for images and (N, F) for feature rows.  All arithmetic is
float64.  Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import DataError, DegenerateBatchError, ParameterError, ShapeError
from .tensor import Rng, Tensor, as_tensor, make_output

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


def _generator(rng):
    if isinstance(rng, Rng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise ParameterError(f"expected Rng or numpy Generator, got {type(rng).__name__}")


# ---------------------------------------------------------------- conv2d


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}", axis="rank")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.shape}", axis="rank")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}", axis="channel")
    if stride < 1 or pad < 0:
        raise ParameterError(f"invalid stride={stride} / pad={pad}")
    if h + 2 * pad < kh:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded height {h + 2 * pad}", axis="height")
    if w + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded width {w + 2 * pad}", axis="width")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)", axis="bias")

    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    # shift-add materializes kh*kw*cout planes of the padded grid, im2col
    # materializes cin*kh*kw planes of the output grid; take the smaller
    if stride == 1 and ((kh == 1 and kw == 1 and not pad) or cout * hp * wp <= cin * ho * wo):
        out_data, back = _conv_shift_add(x.data, weight.data, pad)
    else:
        out_data, back = _conv_im2col(x.data, weight.data, stride, pad)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw = back(g, x.requires_grad, weight.requires_grad)
        if dx is not None:
            x.accumulate(dx, owned=True)
        if dw is not None:
            weight.accumulate(dw, owned=True)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    return make_output(out_data, parents, backward)


def _conv_shift_add(x, w, pad):
    # One GEMM per sample against the stacked kernel taps, then the taps are
    # summed with shifted slices.  Backward reuses the same shifted layout.
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = _kernels.pad_spatial(x, pad) if pad else x
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    xflat = xp.reshape(n, c, hp * wp)
    wall = w.transpose(2, 3, 0, 1).reshape(kh * kw * cout, c)
    pointwise = kh == 1 and kw == 1 and not pad
    z = np.matmul(wall, xflat)
    if pointwise:
        out = z.reshape(n, cout, ho, wo)
    else:
        out = _kernels.tap_sum(z.reshape(n, kh, kw, cout, hp, wp), ho, wo)

    def back(g, need_x, need_w):
        if pointwise:
            dz = g.reshape(n, cout, hp * wp)
        else:
            dz = _kernels.tap_scatter(np.ascontiguousarray(g), kh, kw, hp, wp)
            dz = dz.reshape(n, kh * kw * cout, hp * wp)
        dx = dw = None
        if need_x:
            dxp = np.matmul(wall.T, dz).reshape(n, c, hp, wp)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        if need_w:
            dwall = np.matmul(dz, xflat.transpose(0, 2, 1)).sum(axis=0)
            dw = dwall.reshape(kh, kw, cout, c).transpose(2, 3, 0, 1)
        return dx, dw

    return out, back


def _conv_im2col(x, w, stride, pad):
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = _kernels.pad_spatial(x, pad) if pad else x
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(cout, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g, need_x, need_w):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dx = dw = None
        if need_w:
            dw = (gmat.T @ cols).reshape(cout, c, kh, kw)
        if need_x:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = _kernels.col2im(dcols, c, xp.shape[2], xp.shape[3], kh, kw, stride)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw

    return np.ascontiguousarray(out), back


# ------------------------------------------------------------ batch norm


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )


def batch_norm(x, state, mode="train"):
    """Per-channel batch normalization.

    Returns ``(out, new_state)``.  In train mode ``new_state`` carries the
    updated running statistics (unbiased batch variance, EMA with
    ``state.momentum``); in eval mode it is ``state`` itself.
    """
    return _batch_norm(x, state, mode, relu=False)


def batch_norm_relu(x, state, mode="train"):
    """``relu(batch_norm(x))`` in one fused pass; same return convention."""
    return _batch_norm(x, state, mode, relu=True)


def _batch_norm(x, state, mode, relu):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D, got {x.shape}", axis="rank")
    n, c, h, w = x.shape
    gamma, beta = state.gamma, state.beta
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm expects {c} channels, state has {gamma.shape[0]}", axis="channel")
    if not state.epsilon > 0:
        raise ParameterError("batch_norm epsilon must be positive")
    x3 = x.data.reshape(n, c, h * w)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batch_norm train mode needs at least 2 values per channel, got {m}")
        mean, var = _kernels.channel_moments(x3)
        mom = state.momentum
        new_state = replace(
            state,
            running_mean=mom * state.running_mean + (1 - mom) * mean,
            running_var=mom * state.running_var + (1 - mom) * var * (m / (m - 1)),
        )
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
        new_state = state
    else:
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")

    invstd = 1.0 / np.sqrt(var + state.epsilon)
    scale = gamma.data * invstd
    shift = beta.data - mean * scale
    y3 = _kernels.affine_channels(x3, scale, shift, relu)
    train = mode == "train"

    def backward(g):
        dx, dgamma, dbeta = _kernels.bn_backward(
            x3, g.reshape(n, c, h * w), mean, invstd, gamma.data, beta.data, train, relu,
            x.requires_grad)
        if gamma.requires_grad:
            gamma.accumulate(dgamma, owned=True)
        if beta.requires_grad:
            beta.accumulate(dbeta, owned=True)
        if x.requires_grad:
            x.accumulate(dx.reshape(n, c, h, w), owned=True)

    return make_output(y3.reshape(n, c, h, w), (x, gamma, beta), backward), new_state


# ------------------------------------------------------- pointwise, pools


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x.accumulate(_kernels.relu_mask_grad(x.data, g), owned=True)

    return make_output(out, (x,), backward)


relu.kinks = (0.0,)


def avg_pool(x, size=2, stride=2):
    """Non-overlapping mean pooling; ``size`` must equal ``stride``."""
    x = as_tensor(x)
    if size != stride:
        raise ParameterError("avg_pool supports only size == stride")
    if x.ndim != 4:
        raise ShapeError(f"avg_pool input must be 4-D, got {x.shape}", axis="rank")
    n, c, h, w = x.shape
    if h % size:
        raise ShapeError(f"avg_pool height {h} not divisible by {size}", axis="height")
    if w % size:
        raise ShapeError(f"avg_pool width {w} not divisible by {size}", axis="width")
    ho, wo = h // size, w // size
    out = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        share = np.broadcast_to((g / (size * size))[:, :, :, None, :, None], (n, c, ho, size, wo, size))
        x.accumulate(share.reshape(n, c, h, w))

    return make_output(out, (x,), backward)


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.shape}", axis="rank")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        x.accumulate(np.broadcast_to((g / (h * w))[:, :, None, None], x.shape))

    return make_output(out, (x,), backward)


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for x of shape (N, F)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D x and weight, got {x.shape} and {weight.shape}", axis="rank")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dims disagree: {x.shape[1]} vs {weight.shape[0]}", axis="features")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)", axis="bias")
    out = x.data @ weight.data + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data.T, owned=True)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g, owned=True)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))

    return make_output(out, (x, weight, bias), backward)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = _generator(rng).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    out = x.data * scale

    def backward(g):
        x.accumulate(g * scale)

    return make_output(out, (x,), backward)


def concat_channels(parts):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one part", axis="channel")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise ShapeError(f"part {i} is not 4-D: {p.shape}", axis="rank")
        for ax, name in ((0, "batch"), (2, "height"), (3, "width")):
            if p.shape[ax] != ref[ax]:
                raise ShapeError(
                    f"concat_channels {name} mismatch: part {i} has {p.shape[ax]}, part 0 has {ref[ax]}",
                    axis=name)
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.accumulate(g[:, lo:hi])

    return make_output(out, tuple(parts), backward)


def split_channels(x, sizes):
    """Inverse of :func:`concat_channels` on raw arrays."""
    x = np.asarray(x)
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]}", axis="channel")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


# --------------------------------------------------------- loss functions


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_with_grad(logits, labels, class_weights=None):
    """Class-weighted mean softmax cross-entropy and its exact gradient.

    loss = (1/N) * sum_i w[y_i] * -log softmax(logits_i)[y_i]
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {z.shape}", axis="rank")
    n, c = z.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} != ({n},)", axis="batch")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= c):
        raise DataError(f"labels must be integer class indices in [0, {c})")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise ShapeError(f"class_weights shape {w.shape} != ({c},)", axis="classes")
    if np.any(w <= 0):
        raise ParameterError("class weights must be positive")

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, y]
    wy = w[y]
    loss = float(np.sum(wy * nll) / n)
    grad = softmax(z)
    grad[rows, y] -= 1.0
    grad *= (wy / n)[:, None]
    return loss, grad


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Scalar-loss tensor op wrapping :func:`cross_entropy_with_grad`."""
    logits = as_tensor(logits)
    loss, grad = cross_entropy_with_grad(logits.data, labels, class_weights)

    def backward(g):
        logits.accumulate(g * grad)

    return make_output(np.array(loss), (logits,), backward)
