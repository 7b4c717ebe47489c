"""Synthetic radiograph-like images with a class-dependent arch.

Each image is a dark, noisy background with a bright U-shaped arch in the
lower half.  Class 0 ("female") draws a wide, flaring, slender arch and
class 1 ("male") a narrow, heavier one, so the discriminative evidence sits
on the arch and its bounding box doubles as a ground-truth cue for saliency
checks.
"""

from __future__ import annotations

import os

import numpy as np

from .data import DatasetManifest, ManifestEntry, write_manifest
from .errors import DataError
from .imageio import ImageGray, round_half_up, save_pgm
from .tensor import Rng

LABELS = ("female", "male")
WIDE_HALF_WIDTH = (0.26, 0.32)    # fraction of resolution
NARROW_HALF_WIDTH = (0.11, 0.17)
CENTER_JITTER = 0.14
WIDE_STROKE = (0.8, 1.1)          # stroke sigma in units of resolution / 32
NARROW_STROKE = (1.5, 2.0)
CURVE_POINTS = 160


def arch_curve(cx, half_width, top, bottom, flare):
    """Points (x, y) along a U-shaped arch opening upward.

    ``flare`` bends the arms outward near the top.
    """
    t = np.linspace(-1.0, 1.0, CURVE_POINTS)
    x = cx + half_width * t * (1.0 + flare * t * t) / (1.0 + flare)
    y = bottom - (bottom - top) * t * t
    return np.stack([x, y], axis=1)


def _distance_to_polyline(size, pts, y_from):
    """Distance from each pixel center in rows y_from.. to the polyline."""
    ys, xs = np.mgrid[y_from:size, 0:size]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    best = np.full(len(px), np.inf)
    for lo in range(0, len(a), 32):
        sa, sab, sd = a[lo:lo + 32], ab[lo:lo + 32], denom[lo:lo + 32]
        rel = px[:, None, :] - sa[None]
        t = np.clip(np.sum(rel * sab[None], axis=2) / sd[None], 0.0, 1.0)
        d = rel - t[..., None] * sab[None]
        best = np.minimum(best, np.sqrt(np.min(np.sum(d * d, axis=2), axis=1)))
    return best.reshape(size - y_from, size)


def render_sample(resolution, label_index, rng):
    """Draw one image; returns (pixels uint8 (S, S), cue box (x, y, w, h))."""
    s = float(resolution)
    lo, hi = WIDE_HALF_WIDTH if label_index == 0 else NARROW_HALF_WIDTH
    half_width = rng.uniform(lo, hi) * s
    flare = rng.uniform(0.3, 0.6) if label_index == 0 else rng.uniform(-0.15, 0.05)
    cx = s / 2 + rng.uniform(-CENTER_JITTER, CENTER_JITTER) * s
    top = rng.uniform(0.56, 0.64) * s
    bottom = rng.uniform(0.80, 0.88) * s
    thickness = s / 32 * rng.uniform(*(WIDE_STROKE if label_index == 0 else NARROW_STROKE))

    background = rng.uniform(20, 55)
    amplitude = rng.uniform(120, 190)
    noise = rng.uniform(5, 10)

    img = background + noise * rng.standard_normal((resolution, resolution))
    img += rng.uniform(-8, 8) * np.linspace(-1, 1, resolution)[:, None]

    pts = arch_curve(cx, half_width, top, bottom, flare)
    y_from = resolution // 2
    dist = _distance_to_polyline(resolution, pts, y_from)
    stroke = np.exp(-0.5 * (dist / thickness) ** 2)
    img[y_from:] += amplitude * stroke
    pixels = round_half_up(img).clip(0, 255).astype(np.uint8)

    rows, cols = np.nonzero(stroke > 0.25)
    y0 = y_from + int(rows.min())
    y1 = y_from + int(rows.max()) + 1
    x0, x1 = int(cols.min()), int(cols.max()) + 1
    return pixels, (x0, y0, x1 - x0, y1 - y0)


def synth_generate(n, resolution, class_balance=0.5, seed=0, out_dir=".", variant="main",
                   manifest_name="manifest.csv"):
    """Write ``n`` PGM images plus ``manifest.csv`` into ``out_dir``.

    ``round(n * class_balance)`` images are class 0; labels are interleaved
    by a seeded shuffle.  ``variant`` names an independent random stream so a
    second dataset (for example a pretraining source) never repeats images.
    """
    if n < 2:
        raise DataError(f"synthetic dataset needs n >= 2, got {n}")
    if resolution < 32:
        raise DataError(f"synthetic resolution must be >= 32, got {resolution}")
    if not 0.0 <= class_balance <= 1.0:
        raise DataError(f"class_balance must lie in [0, 1], got {class_balance}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "wb"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from None

    root = Rng(seed)
    n_first = int(round_half_up(n * class_balance))
    labels = np.array([0] * n_first + [1] * (n - n_first))
    labels = labels[root.stream(f"synth-labels-{variant}").permutation(n)]

    width = len(str(n - 1))
    entries = []
    for i, lab in enumerate(labels):
        pixels, cue = render_sample(resolution, int(lab), root.stream(f"synth-{variant}", i))
        name = f"{variant}_{i:0{width}d}.pgm"
        save_pgm(ImageGray(resolution, resolution, pixels), os.path.join(out_dir, name))
        entries.append(ManifestEntry(name, LABELS[lab], cue))
    manifest = DatasetManifest(entries, os.path.abspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, manifest_name))
    return manifest
