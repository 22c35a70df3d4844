"""Gated multiple feedback network.

The sub-network at every time step is

    LR -> LFEB -> [GFM_b ->] RDB_b (b = 1..B) -> reconstruction -> SR_t

with one parameter set shared by all steps. Step ``t > 1`` receives the
outputs of a chosen set of RDBs from step ``t - 1`` through a
:class:`FeedbackBuffer`. Which RDBs are refined and which outputs are
rerouted is described by a :class:`FeedbackTopology`.

Parameter names are hierarchical, for example ``lfeb.conv1.weight``,
``rdb.3.conv.5.weight``, ``gfm.1.gate.weight`` or ``recon.deconv.weight``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TopologyError
from .tensor import (
    ConvGeometry, Tensor, add, bilinear_resize, concat_channels, conv2d, conv_transpose2d,
    mul_scalar, prelu,
)

MODES = ("none", "feedback", "anti_feedback")

# Transposed-convolution settings per upscale factor.
DECONV_GEOMETRY = {
    2: ConvGeometry((6, 6), stride=2, padding=2),
    3: ConvGeometry((7, 7), stride=3, padding=2),
    4: ConvGeometry((8, 8), stride=4, padding=2),
}


@dataclass(frozen=True)
class ModelConfig:
    B: int = 7
    T: int = 2
    C0: int = 256
    C: int = 64
    Cout: int = 3
    scale: int = 4
    rdb_layers: int = 8
    growth: int | None = None
    residual_scale: float = 0.2
    gate: bool = True

    def __post_init__(self):
        if self.B < 1 or self.T < 1:
            raise ConfigError(f"B and T must be >= 1 (B={self.B}, T={self.T})")
        if self.scale not in DECONV_GEOMETRY:
            raise ConfigError(f"scale must be one of 2, 3, 4 (got {self.scale})")
        if self.Cout != 3:
            raise ConfigError(f"Cout must be 3 for RGB output (got {self.Cout})")
        if not 0 < self.residual_scale <= 1:
            raise ConfigError(f"residual_scale must lie in (0, 1] (got {self.residual_scale})")
        if min(self.C0, self.C, self.rdb_layers, self.growth_rate) < 1:
            raise ConfigError("channel counts and rdb_layers must be positive")

    @property
    def growth_rate(self) -> int:
        return self.C if self.growth is None else self.growth


@dataclass(frozen=True)
class FeedbackTopology:
    """Routing of features between consecutive time steps.

    ``feedback``: GFM ``b`` sits before RDB ``b`` for ``b <= M`` and reads the
    previous-step outputs of RDBs ``max(b, N) .. B``.

    ``anti_feedback``: ``M`` and ``N`` play the roles of the barred indices;
    a GFM sits before each RDB ``b >= N`` and reads the previous-step outputs
    of RDBs ``1 .. M``.

    ``none``: no GFMs, every step is independent.
    """

    B: int
    M: int = 1
    N: int = 1
    T: int = 2
    mode: str = "feedback"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown feedback mode {self.mode!r}")
        if self.B < 1 or self.T < 1:
            raise ConfigError(f"B and T must be >= 1 (B={self.B}, T={self.T})")
        if self.mode != "none":
            if not 1 <= self.M <= self.B:
                raise ConfigError(f"M={self.M} outside [1, B={self.B}]")
            if not 1 <= self.N <= self.B:
                raise ConfigError(f"N={self.N} outside [1, B={self.B}]")

    @property
    def S_M(self) -> tuple:
        return tuple(range(1, self.M + 1))

    @property
    def D_N(self) -> tuple:
        return tuple(range(self.N, self.B + 1))

    def gfm_indices(self) -> tuple:
        """RDB indices preceded by a GFM at steps t > 1."""
        if self.mode == "feedback":
            return self.S_M
        if self.mode == "anti_feedback":
            return tuple(range(self.N, self.B + 1))
        return ()

    def sources(self, b: int) -> tuple:
        """Previous-step RDB outputs concatenated into GFM ``b``."""
        if b not in self.gfm_indices():
            raise TopologyError(f"no GFM before RDB {b} in {self}")
        if self.mode == "feedback":
            return tuple(range(max(b, self.N), self.B + 1))
        return tuple(range(1, self.M + 1))

    def group_size(self, b: int) -> int:
        return len(self.sources(b))

    def source_set(self) -> tuple:
        """RDB outputs that must be kept in the feedback buffer."""
        if self.mode == "feedback":
            return self.D_N
        if self.mode == "anti_feedback":
            return tuple(range(1, self.M + 1))
        return ()


def topology_new(B: int, M: int, N: int, T: int, mode: str = "feedback") -> FeedbackTopology:
    return FeedbackTopology(B=B, M=M, N=N, T=T, mode=mode)


class FeedbackBuffer(dict):
    """Maps RDB index ``b`` to its output from the previous time step."""

    @property
    def empty(self) -> bool:
        return not self


class ParamStore:
    """Ordered name -> Tensor registry.

    A store holds one entry per learnable tensor. Unrolled time steps all
    read the same entries.
    """

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t.name = name
        self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def scope(self, prefix: str) -> "ParamStore":
        """View of the entries under ``prefix.`` with the prefix stripped."""
        sub = ParamStore()
        head = prefix + "."
        for name, t in self._tensors.items():
            if name.startswith(head):
                sub._tensors[name[len(head):]] = t
        return sub

    def numel(self) -> int:
        return sum(t.numel for t in self._tensors.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._tensors.items())

    @classmethod
    def from_arrays(cls, arrays, requires_grad: bool = True) -> "ParamStore":
        return cls({k: Tensor(np.array(v), requires_grad=requires_grad) for k, v in arrays.items()})


def _conv_entry(store, name, out_c, in_c, k):
    store[f"{name}.weight"] = Tensor(np.zeros((out_c, in_c, k, k)), requires_grad=True)
    store[f"{name}.bias"] = Tensor(np.zeros(out_c), requires_grad=True)


def _act_entry(store, name, channels):
    store[f"{name}.alpha"] = Tensor(np.full(channels, 0.25), requires_grad=True)


def build_params(config: ModelConfig, topo: FeedbackTopology) -> ParamStore:
    """Allocate every learnable tensor (zero weights, PReLU slopes 0.25)."""
    if topo.B != config.B:
        raise ConfigError(f"topology B={topo.B} != model B={config.B}")
    C, G = config.C, config.growth_rate
    p = ParamStore()
    _conv_entry(p, "lfeb.conv1", config.C0, 3, 3)
    _act_entry(p, "lfeb.act1", config.C0)
    _conv_entry(p, "lfeb.conv2", C, config.C0, 1)
    _act_entry(p, "lfeb.act2", C)
    for b in range(1, config.B + 1):
        if b in topo.gfm_indices():
            group = topo.group_size(b)
            if config.gate:
                _conv_entry(p, f"gfm.{b}.gate", C, group * C, 1)
                _act_entry(p, f"gfm.{b}.gate_act", C)
                _conv_entry(p, f"gfm.{b}.refine", C, 2 * C, 1)
            else:
                _conv_entry(p, f"gfm.{b}.refine", C, group * C + C, 1)
            _act_entry(p, f"gfm.{b}.refine_act", C)
        for k in range(1, config.rdb_layers + 1):
            _conv_entry(p, f"rdb.{b}.conv.{k}", G, C + (k - 1) * G, 3)
            _act_entry(p, f"rdb.{b}.act.{k}", G)
        _conv_entry(p, f"rdb.{b}.fuse", C, C + config.rdb_layers * G, 1)
    geom = DECONV_GEOMETRY[config.scale]
    p["recon.deconv.weight"] = Tensor(np.zeros((C, C) + geom.kernel), requires_grad=True)
    p["recon.deconv.bias"] = Tensor(np.zeros(C), requires_grad=True)
    _act_entry(p, "recon.deconv_act", C)
    _conv_entry(p, "recon.conv", config.Cout, C, 3)
    return p


def param_count(params: ParamStore) -> int:
    return params.numel()


def gfm_param_count(topo: FeedbackTopology, C: int, gate: bool = True) -> int:
    """Closed-form number of GFM parameters (weights, biases, PReLU slopes)."""
    total = 0
    for b in topo.gfm_indices():
        g = topo.group_size(b)
        if gate:
            total += g * C * C + 2 * C        # gate 1x1 conv + bias, slopes
            total += 2 * C * C + 2 * C        # refinement
        else:
            total += (g + 1) * C * C + 2 * C
    return total


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def _conv(p, name, x, padding=0):
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, padding=padding)


def lfeb_forward(params: ParamStore, lr: Tensor) -> Tensor:
    """3x3 conv (C0) + PReLU, then 1x1 conv (C) + PReLU."""
    p = params.scope("lfeb")
    h = prelu(_conv(p, "conv1", lr, padding=1), p["act1.alpha"])
    return prelu(_conv(p, "conv2", h), p["act2.alpha"])


def rdb_forward(params_b: ParamStore, x: Tensor, residual_scale: float = 0.2) -> Tensor:
    """Residual dense block on a ``rdb.<b>`` scope.

    Each dense 3x3 conv sees the concatenation of the block input and all
    earlier dense outputs; a 1x1 fusion conv (no activation) maps the full
    concatenation back to the input width and is added with ``residual_scale``.
    """
    feats = [x]
    k = 1
    while f"conv.{k}.weight" in params_b:
        inp = feats[0] if len(feats) == 1 else concat_channels(feats)
        feats.append(prelu(_conv(params_b, f"conv.{k}", inp, padding=1), params_b[f"act.{k}.alpha"]))
        k += 1
    fused = _conv(params_b, "fuse", concat_channels(feats))
    return add(x, mul_scalar(fused, residual_scale))


def gfm_forward(params: ParamStore, buffer: FeedbackBuffer, topo: FeedbackTopology, b: int,
                low: Tensor, taps: dict | None = None, t: int | None = None) -> Tensor:
    """Gate unit over the rerouted features, then refinement of ``low``.

    Without gate parameters (gate study) the refinement unit consumes the raw
    concatenation of the rerouted features and ``low``.
    """
    sources = topo.sources(b)
    missing = [j for j in sources if j not in buffer]
    if missing:
        raise TopologyError(f"GFM {b}: feedback buffer lacks RDB outputs {missing}")
    p = params.scope(f"gfm.{b}")
    group = concat_channels([buffer[j] for j in sources])
    if "gate.weight" in p:
        high = prelu(_conv(p, "gate", group), p["gate_act.alpha"])
        refine_in = concat_channels([high, low])
    else:
        high = None
        refine_in = concat_channels([group, low])
    refined = prelu(_conv(p, "refine", refine_in), p["refine_act.alpha"])
    if taps is not None:
        taps[f"feedback_{b}_t{t}"] = group
        if high is not None:
            taps[f"F_H{b}_t{t}"] = high
        taps[f"refined_{b}_t{t}"] = refined
    return refined


def reconstruct(params: ParamStore, feature: Tensor, lr: Tensor, scale: int) -> Tensor:
    """Deconv + PReLU, 3x3 conv to RGB, plus the bilinearly upsampled input."""
    p = params.scope("recon")
    geom = DECONV_GEOMETRY[scale]
    if p["deconv.weight"].shape[2:] != geom.kernel:
        raise ConfigError(f"deconv kernel {p['deconv.weight'].shape[2:]} does not match scale {scale}")
    up = conv_transpose2d(feature, p["deconv.weight"], p["deconv.bias"], geom.stride, geom.padding)
    up = prelu(up, p["deconv_act.alpha"])
    residual = _conv(p, "conv", up, padding=1)
    return add(residual, bilinear_resize(lr, scale))


def forward_step(params: ParamStore, topo: FeedbackTopology, config: ModelConfig, lr: Tensor,
                 buffer: FeedbackBuffer, t: int, taps: dict | None = None,
                 detach_feedback: bool = False):
    """One time step; returns ``(sr, next_buffer)``."""
    if (t == 1) != buffer.empty and topo.mode != "none":
        raise TopologyError(f"buffer must be empty exactly at t=1 (t={t}, entries={sorted(buffer)})")
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ConfigError(f"expected an (N, 3, h, w) LR batch, got {lr.shape}")
    refine_at = set(topo.gfm_indices()) if t > 1 else set()
    feat = lfeb_forward(params, lr)
    if taps is not None:
        taps[f"F_L0_t{t}"] = feat
    outputs = {}
    for b in range(1, config.B + 1):
        if b in refine_at:
            feat = gfm_forward(params, buffer, topo, b, feat, taps, t)
        feat = rdb_forward(params.scope(f"rdb.{b}"), feat, config.residual_scale)
        outputs[b] = feat
        if taps is not None:
            taps[f"F_L{b}_t{t}"] = feat
    sr = reconstruct(params, feat, lr, config.scale)
    if taps is not None:
        taps[f"SR_t{t}"] = sr
    nxt = FeedbackBuffer()
    for j in topo.source_set():
        nxt[j] = outputs[j].detach() if detach_feedback else outputs[j]
    return sr, nxt


def forward_unroll(params: ParamStore, topo: FeedbackTopology, config: ModelConfig, lr: Tensor,
                   taps: dict | None = None, detach_feedback: bool = False,
                   steps: int | None = None) -> list:
    """Run ``config.T`` (or ``steps``) time steps and return every SR output."""
    if topo.T != config.T:
        raise ConfigError(f"topology T={topo.T} != model T={config.T}")
    buffer = FeedbackBuffer()
    outs = []
    for t in range(1, (steps or config.T) + 1):
        sr, buffer = forward_step(params, topo, config, lr, buffer, t, taps, detach_feedback)
        outs.append(sr)
    return outs


def feedback_edges(taps: dict, B: int, t: int = 2) -> set:
    """Cross-step edges ``(j, b)`` realised in a recorded graph.

    For every feedback group tapped at step ``t`` the graph is walked back
    from the group tensor; each previous-step RDB output reached (without
    passing through another tapped feature) yields an edge ``j -> b``.
    """
    prev = {id(taps[f"F_L{j}_t{t - 1}"]): j for j in range(1, B + 1) if f"F_L{j}_t{t - 1}" in taps}
    stop = {id(v) for v in taps.values()}
    edges = set()
    for name, group in taps.items():
        if not (name.startswith("feedback_") and name.endswith(f"_t{t}")):
            continue
        b = int(name.split("_")[1])
        stack, seen = [group], set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if id(node) in prev:
                edges.add((prev[id(node)], b))
                continue
            if node is not group and id(node) in stop:
                continue
            stack.extend(node._parents)
    return edges
