"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``.

Data:
  * Set5 HR images are read from ``$GMFN_SET5`` (default ``data/Set5``).
  * Training and held-out images for the overfit and ablation criteria are
    copied from the images bundled with scikit-image.
  * Ablation points are cached under ``$GMFN_ABLATION_DIR`` (default
    ``artifacts/ablation``), keyed by the full configuration and the
    bytes of both image sets; delete the directory to retrain.
"""
import itertools
import math
import os
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from gmfn import checkpoint  # noqa: E402
from gmfn.ablate import read_csv  # noqa: E402
from gmfn.cli import main as cli_main  # noqa: E402
from gmfn.config import preset_config  # noqa: E402
from gmfn.gradcheck import check_gradients  # noqa: E402
from gmfn.imaging import SrPair, degrade, load_image, save_image  # noqa: E402
from gmfn.model import (  # noqa: E402
    FeedbackTopology, ModelConfig, build_params, feedback_edges, forward_unroll, gfm_param_count,
    param_count,
)
from gmfn.tensor import (  # noqa: E402
    Tensor, backward, bilinear_resize, concat_channels, conv2d, conv_transpose2d, l1_loss, precision,
    prelu, sub,
)
from gmfn.train import AdamHyper, TrainConfig, he_init, loss_multi_step, train_loop  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
SET5 = Path(os.environ.get("GMFN_SET5", ROOT / "data" / "Set5"))
ABLATION_DIR = Path(os.environ.get("GMFN_ABLATION_DIR", ROOT / "artifacts" / "ablation"))

# Bicubic rows of the benchmark table: scale -> (PSNR dB, SSIM)
SET5_BICUBIC = {2: (33.66, 0.9299), 3: (30.39, 0.8682), 4: (28.42, 0.8104)}
PSNR_TOL, SSIM_TOL = 0.05, 0.002
GRAD_TOL = 1e-4
CONV_TOL = 1e-5
OVERFIT_L1 = 0.02
ABLATION_MARGIN_DB = 0.1

TRAIN_IMAGES = ("astronaut.png", "chelsea.png", "coffee.png", "rocket.jpg")
HELDOUT_IMAGES = ("motorcycle_left.png", "camera.png", "ihc.png", "hubble_deep_field.jpg")


_capture = None


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    global _capture
    _capture = capsys
    yield
    _capture = None


def report(n, ok, detail, seconds):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}"
    if _capture is not None:
        with _capture.disabled():
            print("\n" + line)
    else:
        print(line)
    return line


def skimage_dir():
    skdata = pytest.importorskip("skimage.data")
    return Path(skdata.__file__).parent


def materialize(names, dest: Path) -> Path:
    dest.mkdir(parents=True, exist_ok=True)
    src = skimage_dir()
    for name in names:
        out = dest / (Path(name).stem + ".png")
        if not out.exists():
            save_image(load_image(src / name), out)
    return dest


# ---------------------------------------------------------------------------

def test_criterion_1_set5_bicubic():
    t0 = time.time()
    if not (SET5.is_dir() and any(SET5.iterdir())):
        line = report(1, False, f"Set5 HR images not found at {SET5} (set GMFN_SET5)", time.time() - t0)
        pytest.fail(line)
    rows, ok = [], True
    for scale, (ref_p, ref_s) in SET5_BICUBIC.items():
        out = ABLATION_DIR.parent / "set5_eval"
        code = cli_main(["eval", "--baseline", "bicubic", "--dataset", str(SET5), "--scale", str(scale),
                         "--out", str(out)])
        assert code == 0
        csv = (out / f"{SET5.name}_x{scale}_bicubic.csv").read_text().splitlines()[1:]
        p = float(np.mean([float(l.split(",")[1]) for l in csv]))
        s = float(np.mean([float(l.split(",")[2]) for l in csv]))
        good = abs(p - ref_p) <= PSNR_TOL and abs(s - ref_s) <= SSIM_TOL
        ok &= good
        rows.append(f"x{scale} {p:.2f}/{s:.4f} vs {ref_p}/{ref_s}")
    line = report(1, ok and time.time() - t0 < 60, "; ".join(rows), time.time() - t0)
    assert ok, line
    assert time.time() - t0 < 60, line


def test_criterion_2_gradients():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = {}
    with precision("double"):
        def leaf(*shape):
            return Tensor(rng.standard_normal(shape), requires_grad=True)

        x, w, b = leaf(2, 2, 5, 4), leaf(3, 2, 3, 3), leaf(3)
        wt = leaf(2, 3, 4, 4)
        a = Tensor(rng.uniform(0.1, 0.4, 2), requires_grad=True)
        z = leaf(2, 2, 5, 4)
        r = Tensor(rng.standard_normal((2, 3, 3, 3)))
        cases = {
            "conv2d": (lambda: conv2d(x, w, b, stride=2, padding=1), [x, w, b]),
            "conv_transpose2d": (lambda: conv_transpose2d(x, wt, b, stride=2, padding=1), [x, wt, b]),
            "prelu": (lambda: prelu(x, a), [x, a]),
            "concat": (lambda: concat_channels([x, z]), [x, z]),
            "bilinear": (lambda: bilinear_resize(x, 2), [x]),
            "sub": (lambda: sub(x, z), [x, z]),
        }
        for name, (op, leaves) in cases.items():
            def f(op=op):
                y = op()
                proj = Tensor(np.cos(np.arange(y.numel).reshape(y.shape)))
                return l1_loss(y, proj)
            errs = check_gradients(f, leaves, eps=1e-6)
            worst[name] = max(errs.values())

        cfg = ModelConfig(B=2, T=2, C0=4, C=4, scale=2)
        topo = FeedbackTopology(B=2, M=1, N=1, T=2)
        params = he_init(build_params(cfg, topo), 1)
        for k, t in params.items():
            if k.endswith(".bias"):
                t.data[...] = 0.05 * rng.standard_normal(t.shape)
        lr = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
        hr = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))

        def net():
            srs = forward_unroll(params, topo, cfg, lr)
            return loss_multi_step(srs, [hr] * len(srs))
        errs = check_gradients(net, [lr] + list(params.values()), eps=1e-6, max_probes=12, seed=2)
        worst["mini_gmfn"] = max(errs.values())
    ok = all(v < GRAD_TOL for v in worst.values())
    dt = time.time() - t0
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    line = report(2, ok and dt < 60, f"max rel err {detail} (< {GRAD_TOL})", dt)
    assert ok and dt < 60, line


def symbolic_edges(B, M, N, mode):
    if mode == "feedback":
        return {(j, b) for b in range(1, M + 1) for j in range(max(b, N), B + 1)}
    return {(j, b) for b in range(N, B + 1) for j in range(1, M + 1)}


def test_criterion_3_topology():
    t0 = time.time()
    bad = []
    cases = [("feedback", m, n) for m in range(1, 8) for n in range(1, 8)]
    cases += [("anti_feedback", m, 7) for m in range(1, 8)]
    lr = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 3, 3)))
    for mode, M, N in cases:
        cfg = ModelConfig(B=7, T=2, C0=2, C=2, scale=2, rdb_layers=1)
        topo = FeedbackTopology(B=7, M=M, N=N, T=2, mode=mode)
        taps = {}
        forward_unroll(build_params(cfg, topo), topo, cfg, lr, taps=taps)
        if feedback_edges(taps, 7) != symbolic_edges(7, M, N, mode):
            bad.append((mode, M, N))
    cfg = ModelConfig(B=7, T=2, C0=4, C=3, scale=2, rdb_layers=2)
    topo = FeedbackTopology(B=7, M=3, N=4, T=2)
    params = he_init(build_params(cfg, topo), 0)
    srs = forward_unroll(params, topo, cfg, lr)
    grads = backward(l1_loss(srs[0], Tensor(np.zeros(srs[0].shape))))
    gfm = [t for k, t in params.items() if k.startswith("gfm.")]
    nonzero = [t.name for t in gfm if t in grads and np.any(grads[t])]
    ok = not bad and not nonzero and gfm
    dt = time.time() - t0
    line = report(3, ok and dt < 60, f"{len(cases) - len(bad)}/{len(cases)} edge sets match; "
                  f"{len(gfm) - len(nonzero)}/{len(gfm)} GFM grads zero after t=1 loss", dt)
    assert ok and dt < 60, line


def test_criterion_4_parameter_sharing(tmp_path):
    t0 = time.time()
    base = preset_config("study")
    counts, sizes = {}, {}
    for T in (2, 4):
        cfg = base.with_overrides(T=T)
        params = build_params(cfg.model_config(), cfg.topology())
        counts[T] = param_count(params)
        sizes[T] = checkpoint.save(tmp_path / f"T{T}.gmfn", cfg, params).stat().st_size
    closed_ok = True
    for mode, M, N, gate in [("feedback", 1, 4, True), ("feedback", 1, 4, False), ("feedback", 3, 2, True),
                             ("feedback", 7, 1, True), ("anti_feedback", 4, 6, True)]:
        C = 32
        cfg = ModelConfig(B=7, C0=128, C=C, gate=gate)
        topo = FeedbackTopology(B=7, M=M, N=N, mode=mode)
        params = build_params(cfg, topo)
        counted = sum(t.numel for k, t in params.items() if k.startswith("gfm."))
        by_shape = 0
        for b in topo.gfm_indices():
            g = len(range(max(b, N), 8)) if mode == "feedback" else M
            if gate:
                by_shape += (g * C * C + C + C) + (2 * C * C + C + C)
            else:
                by_shape += (g + 1) * C * C + C + C
        closed_ok &= counted == by_shape == gfm_param_count(topo, C, gate)
    ok = counts[2] == counts[4] and sizes[2] == sizes[4] and closed_ok
    line = report(4, ok, f"param_count T2={counts[2]} T4={counts[4]}; checkpoint bytes "
                  f"T2={sizes[2]} T4={sizes[4]}; GFM closed form {'ok' if closed_ok else 'MISMATCH'}",
                  time.time() - t0)
    assert ok, line


def overfit_pair():
    hr = load_image(skimage_dir() / "astronaut.png")[100:196, 180:276]
    pair = degrade(hr, 2)
    assert pair.lr.shape == (48, 48, 3)
    return pair


def test_criterion_5_overfit(tmp_path):
    t0 = time.time()
    cfg = preset_config("tiny")
    pair = overfit_pair()
    model_cfg, topo, tc = cfg.model_config(), cfg.topology(), cfg.train_config()
    res = train_loop(tc, model_cfg, topo, [pair], cfg.adam_hyper())
    lr = Tensor(pair.lr.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255))
    hr = Tensor(pair.hr.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255))
    srs = forward_unroll(res.params, topo, model_cfg, lr)
    final = loss_multi_step(srs, [hr] * len(srs)).item()
    short = train_loop(TrainConfig(**{**tc.__dict__, "iterations": 25}), model_cfg, topo, [pair],
                       cfg.adam_hyper())
    deterministic = short.log == res.log[:25]
    dt = time.time() - t0
    ok = final < OVERFIT_L1 and deterministic and dt < 300
    line = report(5, ok, f"L1 after {tc.iterations} iterations = {final:.4f} (< {OVERFIT_L1}), "
                  f"first loss {res.log[0][2]:.4f}, rerun prefix identical={deterministic}", dt)
    assert ok, line


def test_criterion_6_conv_oracles():
    t0 = time.time()
    rng = np.random.default_rng(6)
    worst, cases = 0.0, 0
    for ci, co, h, w_, k, s in itertools.product([1, 2, 3], [1, 2, 3], range(1, 8), range(1, 8), [1, 3], [1, 2]):
        for p in sorted({0, k // 2}):
            x = rng.standard_normal((1, ci, h, w_)).astype(np.float32)
            wc = rng.standard_normal((co, ci, k, k)).astype(np.float32)
            bc = rng.standard_normal(co).astype(np.float32)
            if h + 2 * p >= k and w_ + 2 * p >= k:
                got = conv2d(Tensor(x), Tensor(wc), Tensor(bc), stride=s, padding=p).data
                worst = max(worst, float(np.abs(got - oracles.direct_conv2d(x, wc, bc, s, p)).max()))
                cases += 1
            if (h - 1) * s + k - 2 * p >= 1 and (w_ - 1) * s + k - 2 * p >= 1:
                wt = rng.standard_normal((ci, co, k, k)).astype(np.float32)
                got = conv_transpose2d(Tensor(x), Tensor(wt), Tensor(bc), stride=s, padding=p).data
                ref = oracles.direct_conv_transpose2d(x, wt, bc, s, p)
                worst = max(worst, float(np.abs(got - ref).max()))
                cases += 1
    ok = worst < CONV_TOL
    line = report(6, ok, f"{cases} shape cases, max abs err {worst:.2e} (< {CONV_TOL}, float32)", time.time() - t0)
    assert ok, line


def test_criterion_7_ablation():
    t0 = time.time()
    data = ABLATION_DIR.parent / "data"
    train_dir = materialize(TRAIN_IMAGES, data / "train")
    held_dir = materialize(HELDOUT_IMAGES, data / "heldout")
    details, ok = [], True
    for axis, values in (("N", "4,7"), ("gate", "on,off")):
        code = cli_main(["ablate", "--preset", "tiny-ablate", "--axis", axis, "--values", values,
                         "--dataset", str(train_dir), "--heldout", str(held_dir), "--out", str(ABLATION_DIR)])
        csv_path = ABLATION_DIR / f"ablation_{axis}.csv"
        svg_path = ABLATION_DIR / f"ablation_{axis}.svg"
        meta, rows = read_csv(csv_path)
        svg = ET.parse(svg_path).getroot()
        well_formed = (code == 0 and len(rows) == 2 and meta["iterations"] == "10000"
                       and svg.tag.endswith("svg") and all(math.isfinite(r[1]) for r in rows))
        bic = float(meta["bicubic_psnr"])
        for value, p, _ in rows:
            beat = p - bic >= ABLATION_MARGIN_DB
            ok &= beat
            details.append(f"{axis}={value}:{p - bic:+.3f}dB")
        ok &= well_formed
    line = report(7, ok, f"vs bicubic {bic:.3f} dB on held-out patches: " + " ".join(details)
                  + f" (need >= +{ABLATION_MARGIN_DB})", time.time() - t0)
    assert ok, line


def test_criterion_8_determinism(tmp_path):
    t0 = time.time()
    src = tmp_path / "hr"
    rng = np.random.default_rng(8)
    for name in ("a", "b"):
        save_image(np.kron(rng.integers(0, 256, (6, 6, 3)), np.ones((6, 6, 1))).astype(np.uint8), src / f"{name}.png")
    small = ["--set", "B=2", "--set", "C0=4", "--set", "C=3", "--set", "rdb_layers=2", "--set", "N=2",
             "--set", "scale=2", "--set", "batch=2", "--set", "patch=8"]
    outs = []
    for tag in ("r1", "r2"):
        cli_main(["train", "--dataset", str(src), "--out", str(tmp_path / tag), "--iterations", "5",
                  "--seed", "3", *small])
        outs.append(tmp_path / tag)
    same_log = (outs[0] / "train_log.csv").read_bytes() == (outs[1] / "train_log.csv").read_bytes()
    same_ck = (outs[0] / "model.gmfn").read_bytes() == (outs[1] / "model.gmfn").read_bytes()
    ck = checkpoint.load(outs[0] / "model.gmfn")
    rewritten = checkpoint.save(tmp_path / "again.gmfn", ck.config, ck.tensors, ck.iteration)
    stable = rewritten.read_bytes() == (outs[0] / "model.gmfn").read_bytes()
    data = bytearray((outs[0] / "model.gmfn").read_bytes())
    data[len(data) // 3] ^= 0x10
    try:
        checkpoint.from_bytes(bytes(data))
        rejected = False
    except Exception as exc:
        rejected = type(exc).__name__ == "CheckpointError" and "checksum" in str(exc)
    ok = same_log and same_ck and stable and rejected
    line = report(8, ok, f"log identical={same_log} checkpoint identical={same_ck} "
                  f"write-read-write stable={stable} corruption rejected={rejected}", time.time() - t0)
    assert ok, line


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
