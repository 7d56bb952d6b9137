import json
import math

import numpy as np
import pytest

from sbs import autodiff as ad
from sbs.config import CompressionConfig, ConfigMismatchError, LayerConfig, LayerSpec
from sbs.costmodel import discrete_cost, gated_cost, search_space_size, telescoped_bits
from sbs.fixtures import chain3_specs, mlp_specs, resnet18_specs
from sbs.gates import GateState, GateThresholds, LayerStats, extract_config, step_gate
from sbs.quantizer import BitLadder

L = BitLadder((2, 4, 8))


def _gates(specs, prune=1.0, w=(1.0, 1.0), x=(1.0, 1.0)):
    out = []
    for s in specs:
        gp = np.full(s.groups, prune) if s.prunable else None
        out.append(GateState(gp, np.array(w, float), np.array(x, float)))
    return out


def test_telescoped_bits():
    assert telescoped_bits([1, 1], L) == 8
    assert telescoped_bits([1, 0], L) == 4
    assert telescoped_bits([0, 1], L) == 2


def test_all_open_equals_top_rung():
    specs = chain3_specs()
    R = gated_cost(specs, _gates(specs), L)
    assert R == pytest.approx(sum(s.macs * 64 for s in specs), rel=1e-12)
    top = discrete_cost(specs, CompressionConfig.uniform(specs, 8), in_coupling=False).bops
    assert abs(R - top) / top <= 1e-9


def test_all_bit_gates_closed_is_base_rung():
    specs = chain3_specs()
    R = gated_cost(specs, _gates(specs, w=(0, 0), x=(0, 0)), L)
    assert R == pytest.approx(sum(s.macs * 4 for s in specs))


def test_hand_example_800():
    spec = LayerSpec("l", 1, 2, macs=100, weight_count=2, group_size=1)
    lad = BitLadder((2, 4))
    # activations pinned to 4 bits through an always-open activation gate
    R = gated_cost([spec], [GateState(np.array([1.0, 0.0]), np.array([1.0]), np.array([1.0]))], lad)
    assert R == 800


def test_empty_and_mismatched_inputs():
    with pytest.raises(ValueError):
        gated_cost([], [], L)
    with pytest.raises(ValueError):
        gated_cost(chain3_specs(), [], L)


def _flip_positions(specs):
    pos = []
    for li, s in enumerate(specs):
        if s.prunable:
            pos += [(li, "g_prune", c) for c in range(s.groups)]
        pos += [(li, "g_bits_w", j) for j in range(2)] + [(li, "g_bits_x", j) for j in range(2)]
    return pos


def test_single_flip_never_increases_cost():
    specs = chain3_specs()
    positions = _flip_positions(specs)
    # all-open, all-closed, and random patterns; every single 1 -> 0 flip of each
    rng = np.random.default_rng(11)
    patterns = [np.ones(len(positions)), np.zeros(len(positions))]
    patterns += list(rng.integers(0, 2, (2000, len(positions))).astype(float))
    for bits in patterns:
        gates = _gates(specs)
        for (li, field, idx), b in zip(positions, bits):
            getattr(gates[li], field)[idx] = b
        base = gated_cost(specs, gates, L)
        for (li, field, idx), b in zip(positions, bits):
            if b == 1.0:
                getattr(gates[li], field)[idx] = 0.0
                assert gated_cost(specs, gates, L) <= base + 1e-9
                getattr(gates[li], field)[idx] = 1.0


def test_threshold_gradient_of_cost_is_non_positive(rng):
    specs = chain3_specs()
    for _ in range(20):
        alphas = [ad.parameter(rng.normal(0, 1, 2)) for _ in specs]
        metrics = [rng.uniform(0, 1, 2) for _ in specs]
        gates = [GateState(None if not s.prunable else np.ones(s.groups), step_gate(m, a), np.ones(2))
                 for s, m, a in zip(specs, metrics, alphas)]
        R = gated_cost(specs, gates, L)
        for g in ad.grad(R, alphas):
            assert np.all(g <= 0)


def test_uniform_4bit_ratio_is_64():
    for specs in (resnet18_specs(), mlp_specs([8, 32, 4]), chain3_specs()):
        rep = discrete_cost(specs, CompressionConfig.uniform(specs, 4))
        assert rep.bop_ratio == 64.0


def test_uncompressed_ratio_is_one():
    specs = resnet18_specs()
    rep = discrete_cost(specs, CompressionConfig.uncompressed(specs))
    assert rep.bop_ratio == 1.0 and rep.memory_ratio == 1.0
    assert all(r.pruning_rate == 0 for r in rep.per_layer)


def test_fixed_first_last_lowers_ratio():
    specs = mlp_specs([8, 32, 32, 4], fixed_first_last=8)
    rep = discrete_cost(specs, CompressionConfig.uniform(specs, 4))
    assert 1 < rep.bop_ratio < 64


def test_halving_outputs_quarters_downstream_layers():
    specs = mlp_specs([8, 16, 16, 16], group_size=4, prune_last=True)
    half = CompressionConfig(tuple(LayerConfig(s.name, 8, 8, tuple(range(s.groups // 2))) for s in specs))
    full = discrete_cost(specs, CompressionConfig.uniform(specs, 8))
    cut = discrete_cost(specs, half)
    ratios = [c.bops / f.bops for c, f in zip(cut.per_layer, full.per_layer)]
    # the first layer reads the unpruned input
    assert ratios == [0.5, 0.25, 0.25]


def test_discrete_matches_hard_gated_cost(rng):
    specs = chain3_specs()
    for _ in range(50):
        th = {s.name: GateThresholds(rng.uniform(0, 1), rng.uniform(0, 0.3, 2), rng.uniform(0, 0.3, 2))
              for s in specs}
        stats = {s.name: LayerStats(rng.uniform(0, 0.3, 2), rng.uniform(0, 0.3, 2),
                                    rng.uniform(0, 1, s.groups) if s.prunable else np.zeros(0)) for s in specs}
        cfg = extract_config(specs, th, stats, L)
        hard = []
        for s in specs:
            st, t = stats[s.name], th[s.name]
            gp = None
            if s.prunable:
                gp = np.zeros(s.groups)
                gp[list(cfg[s.name].kept_groups)] = 1.0
            hard.append(GateState(gp, (st.w_bit_metrics >= t.alpha_bits_w).astype(float),
                                  (st.x_bit_metrics >= t.alpha_bits_x).astype(float)))
        R = gated_cost(specs, hard, L)
        D = discrete_cost(specs, cfg, in_coupling=False).bops
        assert abs(R - D) <= 1e-9 * D


def test_config_mismatch_rejected():
    specs = chain3_specs()
    cfg = CompressionConfig.uniform(mlp_specs([8, 16, 4]), 4)
    with pytest.raises(ConfigMismatchError):
        discrete_cost(specs, cfg)
    rest = CompressionConfig.uniform(specs, 4).layers[1:]
    with pytest.raises(ConfigMismatchError):
        discrete_cost(specs, CompressionConfig((LayerConfig("a", 4, 4, (7,)),) + rest))


def test_report_json_fields():
    specs = chain3_specs()
    d = json.loads(discrete_cost(specs, CompressionConfig.uniform(specs, 4)).to_json())
    assert set(d) == {"bops", "memory_kb", "bop_ratio", "memory_ratio", "per_layer"}
    assert len(d["per_layer"]) == 3


def test_search_space_sizes():
    assert search_space_size([LayerSpec.linear("a", 3, 4, prunable=False)], BitLadder((2,))) == 1
    two = mlp_specs([8, 16, 16], group_size=4, prune_last=True)
    assert search_space_size(two, BitLadder((2, 4))) == 256
    size = search_space_size(resnet18_specs(16), L)
    assert f"{float(size):.1e}" == "4.3e+34"


def test_config_roundtrip_and_validation():
    specs = chain3_specs()
    cfg = CompressionConfig.uniform(specs, 4)
    assert CompressionConfig.from_json(cfg.to_json()) == cfg
    assert cfg.summary().startswith("a:w4a4k3")
    with pytest.raises(ValueError):
        LayerConfig("a", 4, 4, ())
    with pytest.raises(ValueError):
        LayerSpec("z", 1, 1, macs=0, weight_count=1)
    assert math.ceil(10 / 4) == specs[0].groups
