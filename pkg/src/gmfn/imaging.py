"""Image I/O, bicubic degradation, colour conversion and patch sampling.

Images are plain numpy arrays in HWC (or HW for grayscale) layout. The dtype
doubles as the domain tag: ``uint8`` arrays hold 8-bit values in [0, 255],
floating arrays hold the [0, 1] training domain.

:func:`resize_bicubic` follows MATLAB ``imresize(..., 'bicubic')``: cubic
kernel with a = -0.5, kernel stretched by the scale when shrinking with
antialiasing, mirror-symmetric boundary, the dimension with the smaller
scale resized first, and 8-bit inputs rounded back to 8 bits after each
dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DatasetError, ImageFormatError, ShapeError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class SrPair:
    hr: np.ndarray
    lr: np.ndarray
    scale: int


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _png_bit_depth(path: Path):
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) < 26 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        return None
    return head[24]


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB image as a uint8 array."""
    path = Path(path)
    try:
        depth = _png_bit_depth(path)
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from None
    if depth is not None and depth > 8:
        raise ImageFormatError(f"{path}: unsupported bit depth {depth}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported image mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from None


def save_image(img: np.ndarray, path) -> None:
    """Write a uint8 HW or HWx3 array as PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"save_image expects uint8 data, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if not (img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 3)):
        raise ImageFormatError(f"cannot save array of shape {img.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(img).save(path, format="PNG")


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and saturate to [0, 255]."""
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

def cubic(x, a: float = -0.5):
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    return (((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
            + (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2)))


def resize_weights(in_len: int, out_len: int, scale: float, antialias: bool = True,
                   boundary: str = "symmetric") -> np.ndarray:
    """Dense ``(out_len, in_len)`` resampling matrix along one axis.

    ``boundary="symmetric"`` mirrors indices as ``[1..n, n..1]`` (MATLAB);
    ``"replicate"`` clamps them to the edge samples.
    """
    shrink = antialias and scale < 1
    width = 4.0 / scale if shrink else 4.0
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    w = scale * cubic(scale * dist) if shrink else cubic(dist)
    w = w / w.sum(axis=1, keepdims=True)
    idx = idx.astype(np.int64) - 1
    if boundary == "symmetric":
        period = 2 * in_len
        m = np.mod(idx, period)
        idx = np.where(m < in_len, m, period - 1 - m)
    elif boundary == "replicate":
        idx = np.clip(idx, 0, in_len - 1)
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True,
                   boundary: str = "symmetric", scale: tuple | None = None) -> np.ndarray:
    """Bicubic resize to ``(out_h, out_w)``.

    ``scale`` overrides the per-axis factors (defaults to out/in), matching a
    scalar factor passed to MATLAB imresize. uint8 input gives uint8 output.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {(out_h, out_w)}")
    img = np.asarray(img)
    is_u8 = img.dtype == np.uint8
    h, w = img.shape[:2]
    sh, sw = scale if scale is not None else (out_h / h, out_w / w)
    out = img.astype(np.float64)
    order = [0, 1] if sh <= sw else [1, 0]
    for dim in order:
        if dim == 0:
            mat = resize_weights(h, out_h, sh, antialias, boundary)
            out = np.tensordot(mat, out, axes=([1], [0]))
        else:
            mat = resize_weights(w, out_w, sw, antialias, boundary)
            out = np.moveaxis(np.tensordot(mat, out, axes=([1], [1])), 0, 1)
        if is_u8:
            out = to_uint8(out).astype(np.float64)
    return out.astype(np.uint8) if is_u8 else out


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[:h - h % scale, :w - w % scale]


def degrade(hr: np.ndarray, scale: int) -> SrPair:
    """Modulo-crop then antialiased bicubic downscale by exactly 1/scale."""
    if scale not in (2, 3, 4):
        raise ShapeError(f"scale must be 2, 3 or 4, got {scale}")
    if hr.shape[0] < scale or hr.shape[1] < scale:
        raise ShapeError(f"image {hr.shape[:2]} smaller than scale {scale}")
    hr = modcrop(hr, scale)
    lr = resize_bicubic(hr, hr.shape[0] // scale, hr.shape[1] // scale, antialias=True,
                        scale=(1 / scale, 1 / scale))
    return SrPair(hr=hr, lr=lr, scale=scale)


def upscale_bicubic(lr: np.ndarray, scale: int) -> np.ndarray:
    return resize_bicubic(lr, lr.shape[0] * scale, lr.shape[1] * scale, scale=(scale, scale))


# ---------------------------------------------------------------------------
# Colour
# ---------------------------------------------------------------------------

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma in [16, 235] as float64.

    uint8 input is scaled to [0, 1] first; float input is taken as [0, 1].
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_y expects an HxWx3 image, got {img.shape}")
    x = img.astype(np.float64)
    if img.dtype == np.uint8:
        x /= 255.0
    return 16.0 + 65.481 * x[..., 0] + 128.553 * x[..., 1] + 24.966 * x[..., 2]


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def sample_patch(pair: SrPair, patch: int, rng):
    """Random aligned LR/HR crop: the HR origin is ``scale`` times the LR origin."""
    h, w = pair.lr.shape[:2]
    if h < patch or w < patch:
        raise ShapeError(f"LR image {h}x{w} smaller than patch {patch}")
    y0 = int(rng.integers(0, h - patch + 1))
    x0 = int(rng.integers(0, w - patch + 1))
    s = pair.scale
    return (pair.lr[y0:y0 + patch, x0:x0 + patch],
            pair.hr[s * y0:s * (y0 + patch), s * x0:s * (x0 + patch)])


def augment(lr: np.ndarray, hr: np.ndarray, rng, flip: bool = True, rotate: bool = True):
    """Apply the same random horizontal flip and 90-degree rotation to both patches."""
    if flip and rng.random() < 0.5:
        lr, hr = lr[:, ::-1], hr[:, ::-1]
    if rotate:
        k = int(rng.integers(4))
        if k:
            lr, hr = np.rot90(lr, k), np.rot90(hr, k)
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".bmp")

# Pre-shrink factors for the optional scale augmentation (1.0 is the original image).
SCALE_AUG_FACTORS = (1.0, 0.8, 0.6)


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images in {directory}")
    return files


def lr_cache_dir(hr_dir, scale: int) -> Path:
    """Sibling ``LR_bicubic/X{scale}`` directory of an HR directory."""
    return Path(hr_dir).parent / "LR_bicubic" / f"X{scale}"


def load_pairs(hr_dir, scale: int, cache: bool = True, scale_aug=()) -> list:
    """``[(name, SrPair), ...]`` for every HR image, sorted by file name.

    LR images are read from the cache directory when present, otherwise
    generated (and written there when ``cache`` is true). ``scale_aug`` adds
    extra pairs from HR images pre-shrunk by each factor (training only).
    """
    out = []
    cache_dir = lr_cache_dir(hr_dir, scale)
    for path in list_images(hr_dir):
        hr = load_image(path)
        if hr.ndim == 2:
            hr = np.repeat(hr[:, :, None], 3, axis=2)
        cached = cache_dir / (path.stem + ".png")
        if cached.exists():
            pair = SrPair(hr=modcrop(hr, scale), lr=load_image(cached), scale=scale)
            if pair.lr.ndim == 2:
                pair = SrPair(pair.hr, np.repeat(pair.lr[:, :, None], 3, axis=2), scale)
            if pair.lr.shape[0] * scale != pair.hr.shape[0] or pair.lr.shape[1] * scale != pair.hr.shape[1]:
                raise DatasetError(f"cached LR {cached} does not match HR {path}")
        else:
            pair = degrade(hr, scale)
            if cache:
                save_image(pair.lr, cached)
        out.append((path.stem, pair))
        for f in scale_aug:
            if f == 1.0:
                continue
            small = resize_bicubic(hr, int(round(hr.shape[0] * f)), int(round(hr.shape[1] * f)))
            out.append((f"{path.stem}@{f}", degrade(small, scale)))
    return out

