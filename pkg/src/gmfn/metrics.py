"""PSNR / SSIM on the luma channel and dataset-level evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DatasetError, ShapeError
from .imaging import load_pairs, rgb_to_y, save_image, to_uint8, upscale_bicubic

COLOR_TRANSFORM = "ycbcr-bt601-studio-y"


def shave_border(img: np.ndarray, s: int) -> np.ndarray:
    """Drop ``s`` pixels from every side."""
    h, w = img.shape[:2]
    if s < 0 or h <= 2 * s or w <= 2 * s:
        raise ShapeError(f"cannot shave {s} pixels from a {h}x{w} image")
    return img[s:h - s, s:w - s] if s else img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(255^2 / MSE) in dB; ``inf`` when the images are identical."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03)."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 11:
        raise ShapeError(f"ssim needs a 2-d image of at least 11x11, got {a.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    win = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


@dataclass
class EvalReport:
    dataset: str
    scale: int
    images: list = field(default_factory=list)
    conventions: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.images]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.images]))

    def to_csv(self) -> str:
        lines = ["name,psnr,ssim"]
        lines += [f"{name},{_fmt(p)},{_fmt(s)}" for name, p, s in self.images]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        conv = " ".join(f"{k}={v}" for k, v in self.conventions.items())
        return (f"{self.dataset} x{self.scale}: PSNR={_fmt(self.mean_psnr)} "
                f"SSIM={_fmt(self.mean_ssim)} n={len(self.images)} {conv}").rstrip()

    def write(self, out_dir, stem: str | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.dataset}_x{self.scale}"
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
        (out_dir / f"{stem}_summary.txt").write_text(self.summary() + "\n")
        return out_dir / f"{stem}.csv"


def score_pair(sr: np.ndarray, hr: np.ndarray, scale: int, shave: int | None = None):
    """PSNR and SSIM of one SR/HR pair under the evaluation conventions.

    ``sr`` is rounded to 8 bits (float input is taken in [0, 255]); both images
    go to studio-swing Y and lose ``shave`` (default ``scale``) border pixels.
    """
    if sr.shape != hr.shape:
        raise ShapeError(f"SR {sr.shape} and HR {hr.shape} differ")
    sr8 = sr if sr.dtype == np.uint8 else to_uint8(sr)
    s = scale if shave is None else shave
    y_sr = shave_border(rgb_to_y(sr8), s)
    y_hr = shave_border(rgb_to_y(hr), s)
    return psnr(y_sr, y_hr), ssim(y_sr, y_hr)


def evaluate(upscaler, hr_dir, scale: int, dataset: str | None = None, sr_dir=None,
             shave: int | None = None) -> EvalReport:
    """Score an upscaler (or precomputed SR images) on a directory of HR images.

    ``upscaler`` is either a callable mapping a uint8 LR image to an SR image
    or a mapping from image name to SR image. Images are visited in sorted
    file-name order. When ``sr_dir`` is given the rounded SR images are saved.
    """
    pairs = load_pairs(hr_dir, scale, cache=False)
    report = EvalReport(dataset=dataset or Path(hr_dir).name, scale=scale,
                        conventions={"shave": scale if shave is None else shave,
                                     "color": COLOR_TRANSFORM, "rounding": "uint8"})
    for name, pair in pairs:
        if callable(upscaler):
            sr = upscaler(pair.lr)
        else:
            if name not in upscaler:
                raise DatasetError(f"no SR image for {name}")
            sr = upscaler[name]
        sr8 = sr if sr.dtype == np.uint8 else to_uint8(sr)
        if sr_dir is not None:
            save_image(sr8, Path(sr_dir) / f"{name}.png")
        p, s = score_pair(sr8, pair.hr, scale, shave)
        report.images.append((name, p, s))
    return report


def bicubic_upscaler(scale: int):
    return lambda lr: upscale_bicubic(lr, scale)
