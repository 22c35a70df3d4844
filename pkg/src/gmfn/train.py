"""Initialisation, loss, Adam and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DatasetError, NonFiniteLossError, ShapeError
from .imaging import augment, sample_patch
from .model import FeedbackTopology, ModelConfig, ParamStore, build_params, forward_unroll
from .tensor import Tensor, add, backward, get_dtype, l1_loss, mul_scalar

LOSS_MODES = ("all_steps", "last_step_only")


@dataclass(frozen=True)
class AdamHyper:
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int = 200_000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if self.lr0 <= 0 or self.halve_every < 1:
            raise ConfigError("lr0 must be positive and halve_every >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    patch: int = 48
    iterations: int = 1000
    seed: int = 0
    loss_mode: str = "all_steps"
    aug_flip: bool = True
    aug_rot: bool = True
    aug_scale: bool = False
    detach_feedback: bool = False
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.batch < 1 or self.patch < 1 or self.iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch, patch and checkpoint_every must be positive, iterations >= 0")


def he_init(params: ParamStore, seed: int) -> ParamStore:
    """He-normal weights, zero biases, PReLU slopes 0.25 (in place).

    ``fan_in`` is ``shape[1] * kh * kw`` for both conv and deconv layouts.
    Entries are drawn in store order from one generator, so a seed fixes
    the whole store.
    """
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith(".weight"):
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            t.data[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=t.shape)
        elif name.endswith(".bias"):
            t.data[...] = 0.0
        elif name.endswith(".alpha"):
            t.data[...] = 0.25
    return params


def init_params(model_cfg: ModelConfig, topo: FeedbackTopology, seed: int) -> ParamStore:
    return he_init(build_params(model_cfg, topo), seed)


def loss_multi_step(srs, hrs, mode: str = "all_steps") -> Tensor:
    """Mean over steps of the per-step L1 loss, or the last step only."""
    if len(srs) != len(hrs) or not srs:
        raise ShapeError(f"got {len(srs)} SR outputs for {len(hrs)} targets")
    if mode == "last_step_only":
        return l1_loss(srs[-1], hrs[-1])
    if mode != "all_steps":
        raise ConfigError(f"unknown loss mode {mode!r}")
    total = l1_loss(srs[0], hrs[0])
    for sr, hr in zip(srs[1:], hrs[1:]):
        total = add(total, l1_loss(sr, hr))
    return mul_scalar(total, 1.0 / len(srs))


def lr_schedule(iteration: int, hyper: AdamHyper) -> float:
    return hyper.lr0 * 0.5 ** (iteration // hyper.halve_every)


def named_grads(params: ParamStore, grads: dict) -> dict:
    """Re-key a backward() result by parameter name."""
    return {name: grads[t] for name, t in params.items() if t in grads}


def adam_step(params: ParamStore, grads: dict, state: AdamState, hyper: AdamHyper,
              iteration: int) -> None:
    """Bias-corrected Adam update of every parameter, in place.

    ``grads`` maps parameter names to arrays. A parameter without an entry
    is updated as if its gradient were zero.
    """
    state.step += 1
    lr = lr_schedule(iteration, hyper)
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)).astype(p.data.dtype)


def _to_nchw(batch):
    return np.ascontiguousarray(np.stack(batch).transpose(0, 3, 1, 2), dtype=get_dtype()) / get_dtype()(255.0)


def draw_batch(pairs, train_cfg: TrainConfig, rng):
    """Sample, augment and stack one batch; returns (lr, hr) NCHW in [0, 1]."""
    lrs, hrs = [], []
    for _ in range(train_cfg.batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        lr, hr = sample_patch(pair, train_cfg.patch, rng)
        lr, hr = augment(lr, hr, rng, flip=train_cfg.aug_flip, rotate=train_cfg.aug_rot)
        lrs.append(lr)
        hrs.append(hr)
    return Tensor(_to_nchw(lrs)), Tensor(_to_nchw(hrs))


@dataclass
class TrainResult:
    params: ParamStore
    log: list
    state: AdamState


def train_loop(train_cfg: TrainConfig, model_cfg: ModelConfig, topo: FeedbackTopology, pairs,
               hyper: AdamHyper | None = None, params: ParamStore | None = None,
               log_path=None, on_checkpoint=None) -> TrainResult:
    """Optimise the unrolled network on random patches of ``pairs``.

    Each record in the returned log is ``(iteration, lr, loss)`` where the
    loss is measured before that iteration's update. ``on_checkpoint`` is
    called as ``on_checkpoint(params, iteration)`` every
    ``train_cfg.checkpoint_every`` iterations and after the last one.
    """
    if not pairs:
        raise DatasetError("training set is empty")
    hyper = hyper or AdamHyper()
    if params is None:
        params = init_params(model_cfg, topo, train_cfg.seed)
    rng = np.random.default_rng([train_cfg.seed, 1])
    state = AdamState()
    log = []
    fh = open(log_path, "w", newline="") if log_path is not None else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(["iter", "lr", "loss"])
    try:
        for it in range(train_cfg.iterations):
            lr_img, hr_img = draw_batch(pairs, train_cfg, rng)
            srs = forward_unroll(params, topo, model_cfg, lr_img, detach_feedback=train_cfg.detach_feedback)
            loss = loss_multi_step(srs, [hr_img] * len(srs), train_cfg.loss_mode)
            rate = lr_schedule(it, hyper)
            value = loss.item()
            log.append((it, rate, value))
            if writer:
                writer.writerow([it, repr(rate), repr(value)])
            if not math.isfinite(value):
                raise NonFiniteLossError(it, rate, value)
            adam_step(params, named_grads(params, backward(loss)), state, hyper, it)
            if on_checkpoint and ((it + 1) % train_cfg.checkpoint_every == 0 or it + 1 == train_cfg.iterations):
                on_checkpoint(params, it + 1)
    finally:
        if fh:
            fh.close()
    return TrainResult(params, log, state)
