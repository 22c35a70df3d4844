"""Running a trained network on whole images and reading out features."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import to_uint8
from .model import FeedbackTopology, ModelConfig, ParamStore, forward_unroll
from .tensor import Tensor, get_dtype


def frozen(params: ParamStore) -> ParamStore:
    """Copy of ``params`` that does not record a graph."""
    return ParamStore.from_arrays(params.arrays(), requires_grad=False)


def image_to_batch(img: np.ndarray) -> Tensor:
    """uint8 HxWx3 image -> (1, 3, H, W) tensor in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {img.shape}")
    x = img.astype(get_dtype()) / get_dtype()(255.0)
    return Tensor(np.ascontiguousarray(x.transpose(2, 0, 1)[None]))


def batch_to_image(x: Tensor) -> np.ndarray:
    """(1, 3, H, W) tensor in [0, 1] -> float64 HxWx3 image in [0, 255]."""
    return x.data[0].transpose(1, 2, 0).astype(np.float64) * 255.0


def super_resolve(params: ParamStore, model_cfg: ModelConfig, topo: FeedbackTopology,
                  lr: np.ndarray, step: int | None = None) -> np.ndarray:
    """SR estimate of one uint8 LR image after the last (or ``step``-th) time step.

    Returns a uint8 image.
    """
    outs = forward_unroll(params, topo, model_cfg, image_to_batch(lr))
    k = len(outs) if step is None else step
    if not 1 <= k <= len(outs):
        raise ConfigError(f"step {step} outside 1..{len(outs)}")
    return to_uint8(batch_to_image(outs[k - 1]))


def model_upscaler(params: ParamStore, model_cfg: ModelConfig, topo: FeedbackTopology):
    """Callable ``lr -> sr`` suitable for :func:`gmfn.metrics.evaluate`."""
    fixed = frozen(params)
    return lambda lr: super_resolve(fixed, model_cfg, topo, lr)


def channel_mean(feature: np.ndarray) -> np.ndarray:
    """(N, C, h, w) -> (N, 1, h, w)."""
    feature = np.asarray(feature)
    if feature.ndim != 4:
        raise ShapeError(f"expected an (N, C, h, w) feature, got {feature.shape}")
    return feature.mean(axis=1, keepdims=True)


def normalize_to_uint8(x: np.ndarray) -> np.ndarray:
    """Min-max stretch to [0, 255]; a constant map becomes 128 everywhere."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    return to_uint8((x - lo) / (hi - lo) * 255.0)


DEFAULT_TAPS = ("F_L0_t2", "feedback_1_t2", "F_H1_t2", "refined_1_t2")


def feature_maps(params: ParamStore, model_cfg: ModelConfig, topo: FeedbackTopology,
                 lr: np.ndarray, names) -> dict:
    """Grayscale uint8 (h, w) channel-mean maps of the named taps."""
    taps = {}
    forward_unroll(params, topo, model_cfg, image_to_batch(lr), taps=taps)
    unknown = [n for n in names if n not in taps]
    if unknown:
        raise ConfigError(f"unknown tap(s) {', '.join(unknown)}; available: {', '.join(sorted(taps))}")
    return {n: normalize_to_uint8(channel_mean(taps[n].data)[0, 0]) for n in names}
