"""Grayscale image decoding/encoding and the preprocessing chain.

Input: binary PGM (P5, 8- or 16-bit) and PNG (gray, 16-bit gray, palette
or color).  Output: PGM for grayscale, PNG (or PPM without Pillow) for RGB.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ImageDimensionError, ImageFormatError, ImageTruncatedError, ShapeError
from .tensor import Tensor

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_PIXELS = 1 << 28


@dataclass
class ImageGray:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ShapeError(f"pixel array {self.pixels.shape} != ({self.height}, {self.width})")

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _rescale(values, maxval):
    """Map 0..maxval onto 0..255, rounding halves up (exact integer arithmetic)."""
    v = values.astype(np.int64)
    return ((2 * 255 * v + maxval) // (2 * maxval)).astype(np.uint8)


# ---------------------------------------------------------------- decode


def _pgm_header(buf):
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(buf):
            raise ImageTruncatedError("PGM header ends early")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise ImageTruncatedError("PGM header ends inside a comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tok = buf[start:pos]
            if not tok.isdigit():
                raise ImageFormatError(f"bad PGM header token {tok[:16]!r}")
            tokens.append(int(tok))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageTruncatedError("PGM header is not followed by whitespace")
    return tokens, pos + 1


def decode_pgm(buf):
    if buf[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (P5) file")
    (width, height, maxval), start = _pgm_header(buf)
    if width < 1 or height < 1 or width * height > MAX_PIXELS:
        raise ImageDimensionError(f"unsupported PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise ImageFormatError(f"PGM maxval {maxval} outside 1..65535")
    bpp = 1 if maxval < 256 else 2
    need = width * height * bpp
    raster = buf[start:start + need]
    if len(raster) < need:
        raise ImageTruncatedError(f"PGM raster has {len(raster)} bytes, expected {need}")
    values = np.frombuffer(raster, dtype=np.uint8 if bpp == 1 else ">u2").reshape(height, width)
    pixels = values.astype(np.uint8) if maxval == 255 else _rescale(values, maxval)
    return ImageGray(width, height, pixels)


def _luma(rgb):
    rgb = rgb.astype(np.float64)
    return round_half_up(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]).clip(0, 255)


def decode_png(path_or_file):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path_or_file) as im:
            im.load()
            mode = im.mode
            if im.width * im.height > MAX_PIXELS:
                raise ImageDimensionError(f"unsupported PNG dimensions {im.width}x{im.height}")
            if mode == "L":
                pixels = np.asarray(im, dtype=np.uint8)
            elif mode in ("I;16", "I;16B", "I;16L", "I"):
                pixels = _rescale(np.asarray(im).astype(np.int64).clip(0, 65535), 65535)
            elif mode == "1":
                pixels = np.asarray(im, dtype=np.uint8) * 255
            elif mode == "LA":
                pixels = np.asarray(im, dtype=np.uint8)[..., 0]
            else:
                pixels = _luma(np.asarray(im.convert("RGB"))).astype(np.uint8)
    except (UnidentifiedImageError, ValueError) as exc:
        raise ImageFormatError(f"cannot decode PNG: {exc}") from None
    except (OSError, SyntaxError) as exc:
        raise ImageTruncatedError(f"truncated or corrupt PNG: {exc}") from None
    return ImageGray(pixels.shape[1], pixels.shape[0], pixels)


def load_image(path):
    """Decode a grayscale image; color PNGs are luma-converted."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P5":
        return decode_pgm(buf)
    if buf[:8] == PNG_SIGNATURE:
        import io

        return decode_png(io.BytesIO(buf))
    raise ImageFormatError(f"{os.fspath(path)}: unknown image format")


# ---------------------------------------------------------------- encode


def encode_pgm(img):
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def save_pgm(img, path):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def save_rgb(rgb, path):
    """Write an (H, W, 3) uint8 array as PNG, or binary PPM if Pillow is missing.

    Returns the path actually written (the suffix changes to .ppm on fallback).
    """
    rgb = np.asarray(rgb, dtype=np.uint8)
    try:
        from PIL import Image
    except ImportError:
        path = os.path.splitext(path)[0] + ".ppm"
        with open(path, "wb") as fh:
            fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii") + rgb.tobytes())
        return path
    Image.fromarray(rgb, "RGB").save(path)
    return path


# ---------------------------------------------------------- preprocessing


def hist_equalize(img):
    """Global histogram equalization.

    h(v) = round((cdf(v) - cdf_min) / (M*N - cdf_min) * 255) with cdf_min the
    smallest nonzero CDF value.  Single-intensity images come back unchanged.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.int64)
    cdf = np.cumsum(hist)
    total = int(cdf[-1])
    cdf_min = int(cdf[np.nonzero(cdf)[0][0]])
    if total == cdf_min:
        return ImageGray(img.width, img.height, img.pixels.copy())
    denom = total - cdf_min
    num = np.clip(cdf - cdf_min, 0, None) * 255
    lut = ((2 * num + denom) // (2 * denom)).astype(np.uint8)
    return ImageGray(img.width, img.height, lut[img.pixels])


def letterbox_geometry(width, height, size):
    """(content_w, content_h, left, top) for an aspect-preserving fit in size x size."""
    scale = size / max(width, height)
    cw = int(min(size, max(1, round_half_up(width * scale))))
    ch = int(min(size, max(1, round_half_up(height * scale))))
    return cw, ch, (size - cw) // 2, (size - ch) // 2


def _bilinear(pixels, out_h, out_w):
    h, w = pixels.shape
    src = pixels.astype(np.float64)

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return round_half_up(out).clip(0, 255).astype(np.uint8)


def resize_letterbox(img, size):
    """Fit ``img`` into a size x size black canvas, keeping its aspect ratio.

    Odd padding puts the extra row/column after the content.
    """
    if size < 1:
        raise ShapeError(f"letterbox target must be >= 1, got {size}")
    cw, ch, left, top = letterbox_geometry(img.width, img.height, size)
    if (cw, ch) == (img.width, img.height):
        content = img.pixels
    else:
        content = _bilinear(img.pixels, ch, cw)
    canvas = np.zeros((size, size), dtype=np.uint8)
    canvas[top:top + ch, left:left + cw] = content
    return ImageGray(size, size, canvas)


def map_box(box, width, height, size):
    """Carry an (x, y, w, h) pixel box through :func:`resize_letterbox`."""
    cw, ch, left, top = letterbox_geometry(width, height, size)
    sx, sy = cw / width, ch / height
    x, y, w, h = box
    return (left + x * sx, top + y * sy, w * sx, h * sy)


def to_tensor(img, channels=1):
    """Scale intensities to [0, 1]; ``channels=3`` replicates the plane."""
    if img.width != img.height:
        raise ShapeError(f"to_tensor needs a square image, got {img.width}x{img.height}", axis="width")
    if channels not in (1, 3):
        raise ShapeError(f"channels must be 1 or 3, got {channels}", axis="channel")
    plane = img.pixels.astype(np.float64) / 255.0
    return Tensor(np.repeat(plane[None], channels, axis=0))


def preprocess(img, size, equalize=True):
    """Equalize (optionally) then letterbox to size x size."""
    if equalize:
        img = hist_equalize(img)
    return resize_letterbox(img, size)
