"""Grad-CAM heatmaps and yellow-to-red overlays."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .imageio import round_half_up, save_rgb
from .model import forward
from .tensor import Tensor

DEFAULT_ALPHA = 0.4


def gradcam_map(activations, gradients):
    """Normalized Grad-CAM map from one layer's (C, H, W) activations and gradients.

    Channel weights are the spatial means of the gradients; the weighted sum
    is rectified and divided by its maximum (an all-zero map stays zero).
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape:
        raise ShapeError(f"activations {a.shape} and gradients {g.shape} differ")
    if a.ndim != 3:
        raise ShapeError(f"Grad-CAM needs a (C, H, W) layer, got shape {a.shape}", axis="rank")
    alpha = g.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    peak = raw.max()
    if not peak > 0:
        return np.zeros_like(raw)
    return raw / peak


def gradcam(model, image, class_index, target_layer=None, batch_size=32):
    """Grad-CAM heatmap(s) at feature-map scale.

    ``image`` is (C, S, S) or a batch (N, C, S, S); ``class_index`` is an
    int or one index per sample.  Returns (H, W) or (N, H, W).
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    n = len(x)
    classes = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (n,))
    num_classes = model.config.num_classes
    if np.any(classes < 0) or np.any(classes >= num_classes):
        raise ParameterError(f"class_index must lie in [0, {num_classes})")
    layer = target_layer or model.default_cam_layer()
    model.node(layer)  # raises LayerNotFoundError
    maps = [_gradcam_chunk(model, x[lo:lo + batch_size], classes[lo:lo + batch_size], layer)
            for lo in range(0, n, batch_size)]
    maps = np.concatenate(maps, axis=0)
    return maps[0] if single else maps


def _gradcam_chunk(model, x, classes, layer):
    inp = Tensor(x, requires_grad=True)
    logits, cache = forward(model, inp, "eval")
    act = cache[layer]
    if act.ndim != 4:
        raise ShapeError(f"layer {layer!r} has no spatial extent (shape {act.shape})", axis="rank")
    # eval-mode samples are independent, so one backward serves the chunk
    seed = np.zeros_like(logits.data)
    seed[np.arange(len(x)), classes] = 1.0
    try:
        logits.backward(seed)
        grads = act.grad if act.grad is not None else np.zeros_like(act.data)
        return np.stack([gradcam_map(act.data[i], grads[i]) for i in range(len(x))])
    finally:
        model.zero_grad()


def upsample_bilinear(h, height, width):
    """Corner-aligned bilinear resize of a 2-D map."""
    h = np.asarray(h, dtype=np.float64)
    if height < 1 or width < 1:
        raise ShapeError(f"target size must be >= 1, got {height}x{width}")
    src_h, src_w = h.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(height, src_h)
    x0, x1, fx = coords(width, src_w)
    top = h[y0][:, x0] * (1 - fx) + h[y0][:, x1] * fx
    bot = h[y1][:, x0] * (1 - fx) + h[y1][:, x1] * fx
    return np.clip(top * (1 - fy)[:, None] + bot * fy[:, None], 0.0, 1.0)


def ramp_color(v):
    """Yellow (low) to red (high): (255, round(255 * (1 - v)), 0)."""
    v = np.asarray(v, dtype=np.float64)
    return np.stack([np.full_like(v, 255.0), round_half_up(255.0 * (1.0 - v)), np.zeros_like(v)], axis=-1)


def colorize_overlay(h, img, alpha=DEFAULT_ALPHA):
    """Blend the ramp color into the grayscale image with weight alpha * v."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (img.height, img.width):
        raise ShapeError(f"heatmap {h.shape} does not match image {img.height}x{img.width}")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    gray = np.repeat(img.pixels.astype(np.float64)[..., None], 3, axis=2)
    k = (alpha * h)[..., None]
    out = (1.0 - k) * gray + k * ramp_color(h)
    return round_half_up(out).clip(0, 255).astype(np.uint8)


def heatmap_rgb(h):
    """The heatmap alone on black: zero stays black, then yellow to red."""
    h = np.asarray(h, dtype=np.float64)
    rgb = ramp_color(h) * h[..., None]
    return round_half_up(rgb).clip(0, 255).astype(np.uint8)


def save_explanation(h, img, path, alpha=DEFAULT_ALPHA, side_by_side=True):
    """Write [heatmap | overlay] (or the overlay alone) and return the written path."""
    if h.shape != (img.height, img.width):
        h = upsample_bilinear(h, img.height, img.width)
    overlay = colorize_overlay(h, img, alpha)
    rgb = np.concatenate([heatmap_rgb(h), overlay], axis=1) if side_by_side else overlay
    return save_rgb(rgb, path)


def box_mass_fraction(h, box):
    """Share of heatmap mass inside an (x, y, w, h) box, counting partially covered pixels."""
    h = np.asarray(h, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return 0.0
    x, y, w, bh = box
    rows, cols = h.shape

    def cover(n, lo, hi):
        edges = np.arange(n)
        return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)

    weight = np.outer(cover(rows, y, y + bh), cover(cols, x, x + w))
    return float((h * weight).sum() / total)


def explain_image(model, x, class_index, size, target_layer=None):
    """Grad-CAM for one preprocessed input, upsampled to size x size."""
    cam = gradcam(model, x, class_index, target_layer)
    return upsample_bilinear(cam, size, size)

