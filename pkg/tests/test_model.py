import numpy as np
import pytest

import oracles
from gmfn.errors import ConfigError, TopologyError
from gmfn.model import (
    DECONV_GEOMETRY, FeedbackBuffer, FeedbackTopology, ModelConfig, ParamStore, build_params,
    feedback_edges, forward_step, forward_unroll, gfm_param_count, param_count,
)
from gmfn.tensor import Tensor, backward, l1_loss, precision
from gmfn.train import he_init


def small(B=3, T=2, C0=4, C=3, scale=2, layers=2, gate=True, M=1, N=2, mode="feedback"):
    cfg = ModelConfig(B=B, T=T, C0=C0, C=C, scale=scale, rdb_layers=layers, gate=gate)
    topo = FeedbackTopology(B=B, M=M, N=N, T=T, mode=mode)
    return cfg, topo


def randomized(cfg, topo, seed=0):
    p = he_init(build_params(cfg, topo), seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in p.items():
        if name.endswith(".bias"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
        if name.endswith(".alpha"):
            t.data[...] = rng.uniform(0.05, 0.5, t.shape)
    return p


def lr_batch(h=5, w=6, seed=1):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (1, 3, h, w)))


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_output_shapes(scale):
    cfg, topo = small(scale=scale, T=3)
    outs = forward_unroll(build_params(cfg, topo), topo, cfg, lr_batch())
    assert len(outs) == 3
    assert all(o.shape == (1, 3, 5 * scale, 6 * scale) for o in outs)


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_zero_parameters_give_bilinear_upscale(scale):
    cfg, topo = small(scale=scale)
    with precision("double"):
        lr = lr_batch()
        outs = forward_unroll(build_params(cfg, topo), topo, cfg, lr)
        ref = oracles.bilinear_up(lr.data, scale)
        for o in outs:
            np.testing.assert_allclose(o.data, ref, atol=1e-12)


@pytest.mark.parametrize("gate", [True, False])
@pytest.mark.parametrize("mode,M,N", [("feedback", 1, 2), ("feedback", 2, 1), ("anti_feedback", 2, 2)])
def test_unrolled_network_matches_composed_oracle(gate, mode, M, N):
    with precision("double"):
        cfg, topo = small(gate=gate, mode=mode, M=M, N=N)
        p = randomized(cfg, topo)
        lr = lr_batch()
        outs = forward_unroll(p, topo, cfg, lr)
        if mode == "feedback":
            sources = {b: list(range(max(b, N), 4)) for b in range(1, M + 1)}
        else:
            sources = {b: list(range(1, M + 1)) for b in range(N, 4)}
        ref = oracles.unroll(p, lr.data, 3, 2, 2, 2, sources, gate)
        for o, r in zip(outs, ref):
            np.testing.assert_allclose(o.data, r, rtol=1e-10, atol=1e-10)


def test_mode_none_steps_are_identical():
    cfg, topo = small(mode="none")
    with precision("double"):
        p = randomized(cfg, topo)
        s1, s2 = forward_unroll(p, topo, cfg, lr_batch())
        np.testing.assert_array_equal(s1.data, s2.data)
    assert not any(k.startswith("gfm.") for k in p)


def symbolic_edges(B, M, N, mode):
    if mode == "feedback":
        return {(j, b) for b in range(1, M + 1) for j in range(N, B + 1) if j >= b}
    return {(j, b) for b in range(N, B + 1) for j in range(1, M + 1)}


def test_feedback_edges_all_pairs():
    mismatches = []
    for mode, pairs in [("feedback", [(m, n) for m in range(1, 8) for n in range(1, 8)]),
                        ("anti_feedback", [(m, 7) for m in range(1, 8)])]:
        for M, N in pairs:
            cfg, topo = small(B=7, C0=2, C=2, layers=1, M=M, N=N, mode=mode)
            taps = {}
            forward_unroll(build_params(cfg, topo), topo, cfg, lr_batch(3, 3), taps=taps)
            if feedback_edges(taps, 7) != symbolic_edges(7, M, N, mode):
                mismatches.append((mode, M, N))
    assert mismatches == []


def test_detached_feedback_has_no_cross_step_edges():
    cfg, topo = small()
    taps = {}
    forward_unroll(randomized(cfg, topo), topo, cfg, lr_batch(), taps=taps, detach_feedback=True)
    assert feedback_edges(taps, 3) == set()


def test_first_step_loss_leaves_gfm_gradients_zero():
    cfg, topo = small(M=2, N=1)
    p = randomized(cfg, topo)
    lr = lr_batch()
    hr = Tensor(np.random.default_rng(5).uniform(0, 1, (1, 3, 10, 12)))
    srs = forward_unroll(p, topo, cfg, lr)
    g1 = backward(l1_loss(srs[0], hr))
    gfm = [t for k, t in p.items() if k.startswith("gfm.")]
    assert gfm
    for t in gfm:
        assert t not in g1 or not np.any(g1[t])
    g2 = backward(l1_loss(srs[1], hr))
    assert all(np.any(g2[t]) for t in gfm if t.name.endswith(".weight"))


def test_parameter_count_independent_of_T():
    counts = set()
    for T in (1, 2, 4):
        cfg, topo = small(B=7, T=T, C0=8, C=4, N=4)
        counts.add(param_count(build_params(cfg, topo)))
    assert len(counts) == 1


@pytest.mark.parametrize("gate", [True, False])
@pytest.mark.parametrize("mode,M,N", [("feedback", 1, 4), ("feedback", 3, 2), ("feedback", 7, 7),
                                      ("anti_feedback", 3, 7), ("anti_feedback", 1, 5)])
def test_gfm_count_matches_closed_form(gate, mode, M, N):
    cfg, topo = small(B=7, C=5, gate=gate, M=M, N=N, mode=mode)
    p = build_params(cfg, topo)
    counted = sum(t.numel for k, t in p.items() if k.startswith("gfm."))
    assert counted == gfm_param_count(topo, 5, gate)


def test_final_configuration_size():
    cfg = ModelConfig()
    topo = FeedbackTopology(B=7, M=1, N=4, T=2)
    p = build_params(cfg, topo)
    # one GFM reading RDBs 4..7: gate 256->64, refine 128->64
    assert gfm_param_count(topo, 64) == 4 * 64 * 64 + 2 * 64 + 2 * 64 * 64 + 2 * 64
    # an RDB: 8 dense 3x3 convs (growth 64) plus 1x1 fusion of 9*64 channels
    rdb = sum((64 + k * 64) * 64 * 9 + 64 + 64 for k in range(8)) + 9 * 64 * 64 + 64
    assert sum(t.numel for k, t in p.items() if k.startswith("rdb.1.")) == rdb


def test_deconv_geometry_doubles_triples_quadruples():
    for s, g in DECONV_GEOMETRY.items():
        assert g.transposed_out_size(12, 7) == (12 * s, 7 * s)


def test_buffer_must_be_empty_exactly_at_first_step():
    cfg, topo = small()
    p = build_params(cfg, topo)
    lr = lr_batch()
    with pytest.raises(TopologyError):
        forward_step(p, topo, cfg, lr, FeedbackBuffer(), t=2)
    _, buf = forward_step(p, topo, cfg, lr, FeedbackBuffer(), t=1)
    assert sorted(buf) == [2, 3]
    with pytest.raises(TopologyError):
        forward_step(p, topo, cfg, lr, buf, t=1)
    del buf[3]
    with pytest.raises(TopologyError):
        forward_step(p, topo, cfg, lr, buf, t=2)


@pytest.mark.parametrize("kw", [dict(M=0), dict(N=8), dict(M=8), dict(mode="sideways")])
def test_topology_rejects_bad_indices(kw):
    with pytest.raises(ConfigError):
        FeedbackTopology(**{"B": 7, **kw})


@pytest.mark.parametrize("kw", [dict(scale=5), dict(B=0), dict(T=0), dict(Cout=1), dict(residual_scale=0)])
def test_model_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_mismatched_B_and_T_rejected():
    cfg, topo = small(B=3)
    with pytest.raises(ConfigError):
        build_params(cfg, FeedbackTopology(B=4))
    with pytest.raises(ConfigError):
        forward_unroll(build_params(cfg, topo), FeedbackTopology(B=3, N=2, T=3), cfg, lr_batch())


def test_param_store_rejects_duplicates_and_names_tensors():
    s = ParamStore()
    s["a.weight"] = Tensor(np.zeros(2))
    assert s["a.weight"].name == "a.weight"
    with pytest.raises(KeyError):
        s["a.weight"] = Tensor(np.zeros(2))
    assert list(s.scope("a")) == ["weight"]


def test_time_steps_share_one_parameter_set():
    cfg, topo = small()
    p = randomized(cfg, topo)
    taps = {}
    srs = forward_unroll(p, topo, cfg, lr_batch(), taps=taps)
    assert taps["F_L0_t1"] is not taps["F_L0_t2"]
    hr = Tensor(np.zeros(srs[0].shape))
    g = backward(l1_loss(srs[1], hr))
    # every gradient key is one of the store tensors, none are per-step copies
    ids = {id(t) for t in p.values()}
    assert all(id(t) in ids for t in g)
