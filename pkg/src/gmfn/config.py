"""Flat ``key = value`` run configuration and named presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import FeedbackTopology, ModelConfig
from .train import AdamHyper, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    B: int = 7
    T: int = 2
    C0: int = 256
    C: int = 64
    Cout: int = 3
    scale: int = 4
    rdb_layers: int = 8
    growth: int = 0
    residual_scale: float = 0.2
    gate: bool = True
    # topology
    mode: str = "feedback"
    M: int = 1
    N: int = 4
    # training
    batch: int = 16
    patch: int = 48
    iterations: int = 10000
    seed: int = 0
    loss_mode: str = "all_steps"
    aug_flip: bool = True
    aug_rot: bool = True
    aug_scale: bool = False
    detach_feedback: bool = False
    checkpoint_every: int = 1000
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int = 200_000
    # paths
    train_dir: str = ""
    eval_dir: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        # construct the typed sub-configs once to surface invalid combinations
        self.model_config()
        self.topology()
        self.train_config()
        self.adam_hyper()

    def model_config(self) -> ModelConfig:
        return ModelConfig(B=self.B, T=self.T, C0=self.C0, C=self.C, Cout=self.Cout, scale=self.scale,
                           rdb_layers=self.rdb_layers, growth=self.growth or None,
                           residual_scale=self.residual_scale, gate=self.gate)

    def topology(self) -> FeedbackTopology:
        return FeedbackTopology(B=self.B, M=self.M, N=self.N, T=self.T, mode=self.mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch=self.batch, patch=self.patch, iterations=self.iterations, seed=self.seed,
                           loss_mode=self.loss_mode, aug_flip=self.aug_flip, aug_rot=self.aug_rot,
                           aug_scale=self.aug_scale, detach_feedback=self.detach_feedback,
                           checkpoint_every=self.checkpoint_every)

    def adam_hyper(self) -> AdamHyper:
        return AdamHyper(lr0=self.lr0, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         halve_every=self.halve_every)

    def with_overrides(self, **kw) -> "RunConfig":
        _check_keys(kw)
        return replace(self, **kw)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


PRESETS = {
    # configuration used for the benchmark comparison
    "final": dict(B=7, T=2, C0=256, C=64, M=1, N=4, mode="feedback", scale=4),
    # width used for the feedback-variant studies
    "study": dict(B=7, T=2, C0=128, C=32, M=1, N=4, mode="feedback", scale=4),
    # only the deepest output goes back, to several shallow blocks
    "sm-baseline": dict(B=7, T=2, C0=128, C=32, M=2, N=7, mode="feedback", scale=4),
    # overfit harness
    "tiny": dict(B=3, T=2, C0=16, C=8, M=1, N=2, mode="feedback", scale=2, batch=1, patch=48,
                 iterations=500, aug_flip=False, aug_rot=False, checkpoint_every=500),
    # desk-scale ablation base
    "tiny-ablate": dict(B=7, T=2, C0=16, C=8, M=1, N=4, mode="feedback", scale=2, batch=1, patch=16,
                        iterations=10000, checkpoint_every=10000),
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _check_keys(kw) -> None:
    unknown = sorted(set(kw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_overrides(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def loads(text: str, preset: str | None = None) -> RunConfig:
    base = preset_config(preset) if preset else RunConfig()
    return base.with_overrides(**parse_overrides(text))


def load(path, preset: str | None = None) -> RunConfig:
    return loads(Path(path).read_text(), preset)


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})")
    return RunConfig(**PRESETS[name])


def coerce_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return _coerce(key, raw)


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
