"""One-axis ablation sweeps with cached points, CSV and SVG output."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import ConfigError
from .imaging import load_pairs, sample_patch, SrPair, upscale_bicubic
from .inference import frozen, super_resolve
from .metrics import score_pair
from .train import train_loop

AXES = ("N", "M", "Mbar", "T", "gate")


def point_config(base: RunConfig, axis: str, value) -> RunConfig:
    """Base configuration with one axis set.

    ``Mbar`` switches to anti-feedback with every RDB from ``B`` downward
    refined once (``N = B``) and sources ``1..value``.
    """
    if axis == "N":
        return base.with_overrides(mode="feedback", N=int(value))
    if axis == "M":
        return base.with_overrides(mode="feedback", M=int(value))
    if axis == "Mbar":
        return base.with_overrides(mode="anti_feedback", M=int(value), N=base.B)
    if axis == "T":
        return base.with_overrides(T=int(value))
    if axis == "gate":
        return base.with_overrides(gate=bool(value))
    raise ConfigError(f"invalid ablation axis {axis!r} (choose from {', '.join(AXES)})")


def parse_values(axis: str, text: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"invalid ablation axis {axis!r} (choose from {', '.join(AXES)})")
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if axis == "gate":
            low = tok.lower()
            if low not in ("on", "off", "true", "false", "1", "0"):
                raise ConfigError(f"gate value must be on/off, got {tok!r}")
            out.append(low in ("on", "true", "1"))
        elif "-" in tok:
            a, b = tok.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(tok))
    if not out:
        raise ConfigError("empty value list")
    return sorted(set(out))


def heldout_patches(hr_dir, scale: int, patch: int = 32, per_image: int = 4, seed: int = 2024) -> list:
    """Fixed LR/HR patch pairs cut from every held-out image.

    The LR side is ``patch``, or the short side of an LR image smaller than that.
    """
    rng = np.random.default_rng(seed)
    out = []
    for name, pair in load_pairs(hr_dir, scale, cache=False):
        side = min(patch, *pair.lr.shape[:2])
        for k in range(per_image):
            lr, hr = sample_patch(pair, side, rng)
            out.append((f"{name}#{k}", SrPair(hr=hr, lr=lr, scale=scale)))
    return out


def score_patches(upscale, patches) -> tuple:
    scores = [score_pair(upscale(p.lr), p.hr, p.scale) for _, p in patches]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def _dir_digest(directory) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class SweepPoint:
    value: object
    psnr: float
    ssim: float
    bicubic_psnr: float
    bicubic_ssim: float
    final_loss: float


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return str(v)


def run_point(cfg: RunConfig, train_dir, patches, cache_dir, data_key: str, log=print) -> dict:
    """Train one configuration (or reuse a cached result) and score it."""
    key = hashlib.sha256((cfg.dumps() + data_key).encode()).hexdigest()[:16]
    cache_dir = Path(cache_dir)
    result_path = cache_dir / f"{key}.json"
    if result_path.exists():
        log(f"  cached {key}")
        return json.loads(result_path.read_text())
    pairs = [p for _, p in load_pairs(train_dir, cfg.scale, cache=False)]
    model_cfg, topo = cfg.model_config(), cfg.topology()
    res = train_loop(cfg.train_config(), model_cfg, topo, pairs, cfg.adam_hyper(),
                     log_path=cache_dir / f"{key}_log.csv")
    checkpoint.save(cache_dir / f"{key}.gmfn", cfg, res.params, cfg.iterations)
    fixed = frozen(res.params)
    psnr, ssim = score_patches(lambda lr: super_resolve(fixed, model_cfg, topo, lr), patches)
    tail = [r[2] for r in res.log[-100:]]
    out = {"key": key, "psnr": psnr, "ssim": ssim,
           "final_loss": float(np.mean(tail)) if tail else math.nan}
    result_path.write_text(json.dumps(out, sort_keys=True) + "\n")
    return out


def run_sweep(base: RunConfig, axis: str, values, train_dir, heldout_dir, out_dir,
              log=print) -> list:
    """Evaluate every axis value; writes ``ablation_<axis>.csv`` and ``.svg`` to ``out_dir``."""
    out_dir = Path(out_dir)
    cache_dir = out_dir / "points"
    cache_dir.mkdir(parents=True, exist_ok=True)
    values = sorted(values)
    patches = heldout_patches(heldout_dir, base.scale)
    bic_psnr, bic_ssim = score_patches(lambda lr: upscale_bicubic(lr, base.scale), patches)
    data_key = _dir_digest(train_dir) + _dir_digest(heldout_dir)
    points = []
    for v in values:
        cfg = point_config(base, axis, v)
        log(f"{axis}={_fmt_value(v)}: {cfg.iterations} iterations")
        r = run_point(cfg, train_dir, patches, cache_dir, data_key, log)
        log(f"  psnr={r['psnr']:.4f} ssim={r['ssim']:.4f} (bicubic {bic_psnr:.4f})")
        points.append(SweepPoint(v, r["psnr"], r["ssim"], bic_psnr, bic_ssim, r["final_loss"]))
    write_csv(out_dir / f"ablation_{axis}.csv", axis, points, base.iterations, len(patches))
    write_svg(out_dir / f"ablation_{axis}.svg", axis, points)
    return points


def write_csv(path, axis: str, points, budget: int, n_patches: int) -> Path:
    lines = [f"# axis={axis} iterations={budget} heldout_patches={n_patches} "
             f"bicubic_psnr={points[0].bicubic_psnr:.6f} bicubic_ssim={points[0].bicubic_ssim:.6f}"
             if points else f"# axis={axis} iterations={budget}",
             "axis_value,psnr,ssim"]
    lines += [f"{_fmt_value(p.value)},{p.psnr:.6f},{p.ssim:.6f}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_csv(path) -> tuple:
    """``(header_fields, rows)`` of an ablation CSV."""
    text = Path(path).read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in text[0].lstrip("# ").split())
    if text[1] != "axis_value,psnr,ssim":
        raise ConfigError(f"{path}: unexpected column header {text[1]!r}")
    rows = [(a, float(b), float(c)) for a, b, c in (line.split(",") for line in text[2:])]
    return meta, rows


def write_svg(path, axis: str, points, width: int = 480, height: int = 320) -> Path:
    """PSNR against axis value as a polyline, with the bicubic level dashed."""
    ml, mr, mt, mb = 60, 20, 30, 45
    xs = list(range(len(points)))
    ys = [p.psnr for p in points]
    ref = points[0].bicubic_psnr if points else None
    lo = min(ys + ([ref] if ref is not None else []))
    hi = max(ys + ([ref] if ref is not None else []))
    pad = max(0.05, 0.1 * (hi - lo))
    lo, hi = lo - pad, hi + pad
    pw, ph = width - ml - mr, height - mt - mb

    def px(i):
        return ml + (pw * (i + 0.5) / max(len(xs), 1))

    def py(v):
        return mt + ph * (hi - v) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        parts.append(f'<line x1="{ml - 4}" y1="{py(v):.2f}" x2="{ml}" y2="{py(v):.2f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 6}" y="{py(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>')
    for i, p in zip(xs, points):
        parts.append(f'<text x="{px(i):.2f}" y="{mt + ph + 16}" text-anchor="middle">'
                     f'{escape(_fmt_value(p.value))}</text>')
    if ref is not None:
        parts.append(f'<line x1="{ml}" y1="{py(ref):.2f}" x2="{ml + pw}" y2="{py(ref):.2f}" '
                     f'stroke="gray" stroke-dasharray="4,3"/>')
        parts.append(f'<text x="{ml + pw}" y="{py(ref) - 4:.2f}" text-anchor="end" fill="gray">bicubic</text>')
    coords = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in zip(xs, ys))
    parts.append(f'<polyline points="{coords}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for i, v in zip(xs, ys):
        parts.append(f'<circle cx="{px(i):.2f}" cy="{py(v):.2f}" r="3" fill="steelblue"/>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(axis)}</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">PSNR (dB)</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)
