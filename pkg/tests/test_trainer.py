import math

import numpy as np
import pytest
from golden_fixture import CFG as GOLDEN_CFG
from golden_fixture import GOLDEN_DIR, golden_files, golden_run

from sbs import autodiff as ad
from sbs.config import CompressionConfig, ConfigMismatchError, LayerConfig
from sbs.costmodel import discrete_cost, gated_cost
from sbs.data import make_blobs
from sbs.gates import GateState
from sbs.model import NonFiniteError, SBSNet
from sbs.quantizer import BitLadder, discretize, normalize_wt, step_size
from sbs.trainer import (
    SGD,
    SearchRunConfig,
    build_model,
    finetune,
    load_checkpoint,
    objective,
    phase_params,
    pretrain,
    save_checkpoint,
    search,
    search_loss,
    search_step,
    trace_to_csv,
    train_fixed,
)

# -- objective -------------------------------------------------------------------


def test_objective_examples():
    assert objective(0.7, 123.0, 0.0) == 0.7
    assert objective(1.0, math.e, 2.0) == pytest.approx(3.0)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            objective(1.0, bad, 0.1)


def test_cost_term_gradient_matches_finite_differences(rng):
    specs = build_model(make_blobs(8, 8, seed=1), SearchRunConfig(), (8,)).specs
    lad, lam = BitLadder((2, 4, 8)), 0.3
    sizes = [s.groups if s.prunable else 0 for s in specs]
    n = sum(sizes) + 4 * len(specs)
    x0 = rng.normal(0, 1, n)

    def f(v):
        # gates are sigmoids of free parameters: a smooth surrogate of the hard gates
        g, out = ad.sigmoid(v), []
        i = 0
        for s, k in zip(specs, sizes):
            gp = ad.getitem(g, np.arange(i, i + k)) if k else None
            i += k
            gw, gx = ad.getitem(g, np.arange(i, i + 2)), ad.getitem(g, np.arange(i + 2, i + 4))
            i += 4
            out.append(GateState(gp, gw, gx))
        return objective(0.0, gated_cost(specs, out, lad), lam)

    v = ad.parameter(x0)
    g = ad.grad(f(v), [v])[0]
    num = ad.numerical_grad(lambda a: float(f(ad.constant(a)).value), x0)
    np.testing.assert_allclose(g, num, atol=1e-6)


def test_run_config_validation():
    with pytest.raises(ValueError, match="lam"):
        SearchRunConfig(lam=-0.1)
    with pytest.raises(ValueError, match="epochs_search"):
        SearchRunConfig(epochs_search=0)
    with pytest.raises(ValueError):
        SearchRunConfig(ladder=(2, 3))


# -- alternation -----------------------------------------------------------------


@pytest.mark.parametrize("phase, dead", [("search-w", ("alpha_x",)),
                                         ("search-x", ("alpha_prune", "alpha_w"))])
def test_alternation_masks_inactive_family(pretrained, blobs, phase, dead):
    model = pretrained.clone()
    model.reset_thresholds(0.1)
    before = {k: v.copy() for k, v in model.params.items()}
    grads, _, _ = search_step(model, blobs.x_train[:64], blobs.y_train[:64], 0.1, phase, SGD(),
                              0.02, 0.02)
    for k in model.names(dead):
        assert np.all(grads[k] == 0.0)
        np.testing.assert_array_equal(model.params[k], before[k])
    live = [k for k in phase_params(model, phase)[0] if k.rsplit(".", 1)[1].startswith("alpha")]
    assert any(np.any(grads[k] != 0) for k in live)


def test_unknown_phase(pretrained):
    with pytest.raises(ValueError):
        phase_params(pretrained, "search-z")


def test_lambda_zero_cost_has_no_gradient(pretrained, blobs):
    model = pretrained.clone()
    p = model.leaves(model.names(("alpha_w", "alpha_x", "alpha_prune")))
    loss, ce, _ = search_loss(model, blobs.x_train[:32], blobs.y_train[:32], 0.0, p)
    assert loss is ce


# -- search ----------------------------------------------------------------------


def test_search_is_deterministic(pretrained, blobs, quick_cfg):
    a = search(pretrained.clone(), blobs, quick_cfg)
    b = search(pretrained.clone(), blobs, quick_cfg)
    assert a.config == b.config
    assert trace_to_csv(a.trace) == trace_to_csv(b.trace)
    assert [r.phase for r in a.trace[:2]] == ["search-w", "search-x"]
    assert len(a.trace) == 2 * quick_cfg.epochs_search


def test_golden_fixture_is_reproduced():
    for name, text in golden_files().items():
        assert (GOLDEN_DIR / name).read_bytes() == text.encode(), name


def test_golden_finetune_recovers_accuracy():
    data, res = golden_run()
    before = res.model.accuracy(data.x_test, data.y_test, "fixed", res.config)
    _, after = finetune(res.model.clone(), res.config, data, GOLDEN_CFG)
    assert after >= before


def test_huge_lambda_collapses_cost(blobs, quick_cfg):
    bops = {}
    for lam in (0.0, 1000.0):
        cfg = quick_cfg.replace(lam=lam)
        model = pretrain(build_model(blobs, cfg, (16,)), blobs, cfg)
        bops[lam] = discrete_cost(model.specs, search(model, blobs, cfg).config).bops
    assert bops[1000.0] < bops[0.0]


def test_lambda_sweep_is_monotone():
    data = make_blobs(seed=0)
    bops = []
    for lam in (0.0, 0.01, 0.1, 1.0):
        cfg = SearchRunConfig(lam=lam)
        model = pretrain(build_model(data, cfg, (32,)), data, cfg)
        bops.append(discrete_cost(model.specs, search(model, data, cfg).config).bops)
    assert all(a >= b for a, b in zip(bops, bops[1:])), bops
    assert bops[-1] < bops[0]


def test_non_finite_weight_is_reported_with_layer(pretrained, blobs):
    model = pretrained.clone()
    model.params["fc1.W"] = np.full_like(model.params["fc1.W"], np.nan)
    with pytest.raises(NonFiniteError, match="fc1"):
        search_step(model, blobs.x_train[:8], blobs.y_train[:8], 0.1, "search-w", SGD(), 0.1, 0.1)


def test_weight_normalization_keeps_grid(blobs):
    cfg = SearchRunConfig(weight_normalization=True, epochs_pretrain=2, epochs_search=1)
    model = pretrain(build_model(blobs, cfg, (8,)), blobs, cfg)
    w = model._weight_source_np(model.params["fc0.W"])
    assert abs(w.mean()) < 1e-12 and abs(w.std() - 1) < 1e-9
    res = search(model, blobs, cfg)
    assert np.isfinite(res.trace[-1].ce_loss)
    # grid membership of the quantized, normalized weights
    z = discretize(normalize_wt(w, model.params["fc0.v_w"]), step_size(4))
    n = np.asarray(z) * 15
    np.testing.assert_allclose(n, np.round(n), atol=1e-12)


# -- finetune --------------------------------------------------------------------


def test_uniform_top_rung_finetune_equals_direct_qat(pretrained, blobs, quick_cfg):
    comp = CompressionConfig.uniform(pretrained.specs, 8)
    a, _ = finetune(pretrained.clone(), comp, blobs, quick_cfg)
    b = pretrained.clone()
    train_fixed(b, blobs, mode="fixed", config=comp, lr=quick_cfg.lr_finetune,
                steps=quick_cfg.epochs_finetune * 4, batch_size=quick_cfg.batch_size,
                momentum=quick_cfg.momentum, nesterov=quick_cfg.nesterov,
                rng=np.random.default_rng(quick_cfg.seed + 3))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes(), k


def test_all_open_search_forward_equals_top_rung(pretrained, blobs):
    model = pretrained.clone()
    model.reset_thresholds(-1e9)
    s = model.forward(blobs.x_test, "search").logits.value
    f = model.forward(blobs.x_test, "fixed", CompressionConfig.uniform(model.specs, 8)).logits.value
    np.testing.assert_allclose(s, f, atol=1e-12)


def test_uncompressed_finetune_is_plain_training(pretrained, blobs, quick_cfg):
    _, acc = finetune(pretrained.clone(), CompressionConfig.uncompressed(pretrained.specs), blobs, quick_cfg)
    plain = pretrained.clone()
    train_fixed(plain, blobs, mode="float", config=None, lr=quick_cfg.lr_finetune,
                steps=quick_cfg.epochs_finetune * 4, batch_size=quick_cfg.batch_size,
                momentum=quick_cfg.momentum, nesterov=quick_cfg.nesterov,
                rng=np.random.default_rng(quick_cfg.seed + 3))
    assert abs(acc - plain.accuracy(blobs.x_test, blobs.y_test)) <= 0.02


def test_finetune_keeps_pruned_groups_zero(pretrained, blobs, quick_cfg):
    specs = pretrained.specs
    comp = CompressionConfig((LayerConfig("fc0", 4, 4, (0, 2)), LayerConfig("fc1", 4, 4, (0,))))
    model, _ = finetune(pretrained.clone(), comp, blobs, quick_cfg)
    W, b = model.params["fc0.W"], model.params["fc0.b"]
    for g in (1, 3):
        lo, hi = specs[0].group_bounds(g)
        assert np.all(W[lo:hi] == 0) and np.all(b[lo:hi] == 0)
    assert np.any(W[0:4] != 0)


def test_finetune_rejects_unknown_layers(pretrained, blobs, quick_cfg):
    comp = CompressionConfig((LayerConfig("conv9", 4, 4, (0,)), LayerConfig("fc1", 4, 4, (0,))))
    with pytest.raises(ConfigMismatchError):
        finetune(pretrained.clone(), comp, blobs, quick_cfg)


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, pretrained, blobs):
    comp = CompressionConfig.uniform(pretrained.specs, 4)
    jp, bp = save_checkpoint(pretrained, tmp_path / "ck", comp)
    assert bp.stat().st_size == 8 * sum(v.size for v in pretrained.params.values())
    model, cfg = load_checkpoint(jp)
    assert cfg == comp
    for k, v in pretrained.params.items():
        assert model.params[k].shape == v.shape and model.params[k].tobytes() == v.tobytes()
    np.testing.assert_array_equal(model.forward(blobs.x_test, "fixed", comp).logits.value,
                                  pretrained.forward(blobs.x_test, "fixed", comp).logits.value)


def test_checkpoint_keeps_fixed_bits(tmp_path):
    model = SBSNet([4, 8, 8, 2], fixed_first_last=8)
    loaded, cfg = load_checkpoint(save_checkpoint(model, tmp_path / "m")[0])
    assert cfg is None
    assert [s.fixed_bits for s in loaded.specs] == [s.fixed_bits for s in model.specs]
