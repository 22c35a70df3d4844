"""Command line entry point: ``python -m gmfn <verb> ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import ablate as ablation
from . import checkpoint
from .config import PRESETS, RunConfig, coerce_value, load, preset_config
from .errors import ConfigError, DatasetError, GMFNError
from .imaging import SCALE_AUG_FACTORS, load_image, load_pairs, save_image
from .inference import DEFAULT_TAPS, feature_maps, model_upscaler
from .metrics import bicubic_upscaler, evaluate
from .model import build_params, param_count
from .train import train_loop


def _run_config(args) -> RunConfig:
    preset = getattr(args, "preset", None)
    if getattr(args, "config", None):
        cfg = load(args.config, preset)
    elif preset:
        cfg = preset_config(preset)
    else:
        cfg = RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = coerce_value(key.strip(), raw)
    for flag, key in (("seed", "seed"), ("scale", "scale"), ("iterations", "iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_dir = args.dataset or cfg.train_dir
    if not train_dir:
        raise DatasetError("no training set: pass --dataset or set train_dir")
    scale_aug = SCALE_AUG_FACTORS if cfg.aug_scale else ()
    pairs = [p for _, p in load_pairs(train_dir, cfg.scale, cache=True, scale_aug=scale_aug)]
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())

    def on_checkpoint(params, it):
        checkpoint.save(out / f"ckpt_{it:07d}.gmfn", cfg, params, it)

    res = train_loop(cfg.train_config(), cfg.model_config(), cfg.topology(), pairs, cfg.adam_hyper(),
                     log_path=out / "train_log.csv", on_checkpoint=on_checkpoint)
    final = checkpoint.save(out / "model.gmfn", cfg, res.params, cfg.iterations)
    last = res.log[-1][2] if res.log else float("nan")
    print(f"trained {cfg.iterations} iterations, final loss {last:.6f}; checkpoint {final}")
    return 0


def cmd_eval(args) -> int:
    if not args.dataset:
        raise DatasetError("eval needs --dataset <HR directory>")
    if args.baseline:
        if args.scale is None:
            raise ConfigError("--baseline bicubic needs --scale")
        scale, upscaler, tag = args.scale, bicubic_upscaler(args.scale), "bicubic"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --baseline bicubic")
        ck = checkpoint.load(args.checkpoint)
        scale = ck.config.scale
        if args.scale is not None and args.scale != scale:
            raise ConfigError(f"scale mismatch: checkpoint is x{scale}, --scale {args.scale}")
        upscaler = model_upscaler(ck.params(), ck.config.model_config(), ck.config.topology())
        tag = "gmfn"
    out = Path(args.out or "eval")
    name = Path(args.dataset).name
    report = evaluate(upscaler, args.dataset, scale, dataset=name, sr_dir=out / f"{name}_x{scale}_{tag}")
    report.conventions["method"] = tag
    report.write(out, stem=f"{name}_x{scale}_{tag}")
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    values = ablation.parse_values(args.axis, args.values)
    train_dir = args.dataset or cfg.train_dir
    heldout = args.heldout or cfg.eval_dir
    if not train_dir or not heldout:
        raise DatasetError("ablate needs --dataset (training HR) and --heldout (held-out HR)")
    out = Path(args.out or cfg.out_dir)
    points = ablation.run_sweep(cfg, args.axis, values, train_dir, heldout, out)
    for p in points:
        print(f"{args.axis}={ablation._fmt_value(p.value)} psnr={p.psnr:.4f} "
              f"bicubic={p.bicubic_psnr:.4f} delta={p.psnr - p.bicubic_psnr:+.4f}")
    return 0


def cmd_dump_features(args) -> int:
    if not args.checkpoint or not args.image:
        raise ConfigError("dump-features needs --checkpoint and --image")
    ck = checkpoint.load(args.checkpoint)
    names = [n.strip() for n in args.taps.split(",") if n.strip()] if args.taps else list(DEFAULT_TAPS)
    maps = feature_maps(ck.params(requires_grad=False), ck.config.model_config(), ck.config.topology(),
                        load_image(args.image), names)
    out = Path(args.out or "features")
    for name, img in maps.items():
        save_image(img, out / f"{name}.png")
        print(f"{name}: {img.shape[1]}x{img.shape[0]} -> {out / (name + '.png')}")
    return 0


def module_breakdown(params) -> dict:
    """Parameter count per top-level module (``lfeb``, ``gfm.<b>``, ``rdb.<b>``, ``recon``)."""
    out = {}
    for name, t in params.items():
        parts = name.split(".")
        key = parts[0] if parts[0] in ("lfeb", "recon") else ".".join(parts[:2])
        out[key] = out.get(key, 0) + t.numel
    return out


def cmd_info(args) -> int:
    if args.checkpoint:
        ck = checkpoint.load(args.checkpoint)
        cfg, params = ck.config, ck.params(requires_grad=False)
        print(f"checkpoint: {args.checkpoint} (iteration {ck.iteration})")
    else:
        cfg = _run_config(args)
        params = build_params(cfg.model_config(), cfg.topology())
    print(cfg.dumps(), end="")
    print(f"param_count = {param_count(params)}")
    for key, n in module_breakdown(params).items():
        print(f"  {key:<10} {n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmfn", description="Gated multiple feedback SR network")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
            p.add_argument("--preset", choices=sorted(PRESETS))
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--scale", type=int, choices=(2, 3, 4))
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--dataset", help="directory of HR training images")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or the bicubic baseline")
    common(p, config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="directory of HR test images")
    p.add_argument("--baseline", choices=("bicubic",))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one topology axis")
    common(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ablation.AXES)}")
    p.add_argument("--values", required=True, help="comma list or ranges, e.g. 1-7 or on,off")
    p.add_argument("--dataset", help="directory of HR training images")
    p.add_argument("--heldout", help="directory of held-out HR images")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="save channel-mean feature maps")
    common(p, config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="LR input image")
    p.add_argument("--taps", help=f"comma list, default {','.join(DEFAULT_TAPS)}")
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("info", help="describe a checkpoint or configuration")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GMFNError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
