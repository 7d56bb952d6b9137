"""A small fully connected network whose layers carry the bit-sharing gates.

Parameters live in a flat ``dict[str, ndarray]`` and are wrapped in fresh graph
leaves on every forward pass.  Three forward modes:

``float``
    plain network, used for pre-training;
``search``
    activations and weights go through the gated decomposition; every
    prunable layer scales its output groups by pruning gates;
``fixed``
    a :class:`~sbs.config.CompressionConfig` fixes the bitwidths and the kept
    groups (fine-tuning and evaluation of extracted configs).
"""
from __future__ import annotations

import copy
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .config import CompressionConfig, LayerSpec
from .decomposition import decompose
from .fixtures import mlp_specs
from .gates import (
    GateState,
    GateThresholds,
    LayerStats,
    bit_metrics,
    group_index,
    nest,
    prune_metrics,
    step_gate,
)
from .quantizer import (
    BitLadder,
    denormalize_wt,
    normalize_act,
    normalize_wt,
    quantize_act,
    quantize_wt,
)

__all__ = ["SBSNet", "ForwardResult", "NonFiniteError", "WEIGHT_PARAMS", "INTERVAL_PARAMS",
           "W_THRESHOLDS", "X_THRESHOLDS"]

WEIGHT_PARAMS = ("W", "b")
INTERVAL_PARAMS = ("v_w", "v_x")
W_THRESHOLDS = ("alpha_prune", "alpha_w")
X_THRESHOLDS = ("alpha_x",)


class NonFiniteError(FloatingPointError):
    """A forward or loss value became NaN/Inf; names the layer and op."""

    def __init__(self, where: str, op: str):
        self.where, self.op = where, op
        super().__init__(f"non-finite value in {where} ({op})")


@dataclass
class ForwardResult:
    logits: Var
    gates: list[GateState] = field(default_factory=list)
    stats: dict[str, LayerStats] = field(default_factory=dict)


def _check(v: Var, where: str, op: str) -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NonFiniteError(where, op)
    return v


def _expand_rows(row_gates: Var, n_in: int) -> Var:
    """(out,) -> (out, n_in) by an outer product with ones."""
    col = ad.reshape(row_gates, (row_gates.shape[0], 1))
    return ad.matmul(col, np.ones((1, n_in)))


class SBSNet:
    def __init__(self, sizes: list[int], ladder: BitLadder | None = None, group_size: int = 4,
                 seed: int = 0, weight_normalization: bool = False, prune_last: bool = False,
                 fixed_first_last: int | None = None, init_v_x: float = 1.0):
        self.sizes = list(sizes)
        self.ladder = ladder or BitLadder()
        self.group_size = group_size
        self.weight_normalization = weight_normalization
        self.init_v_x = init_v_x
        self.specs: list[LayerSpec] = mlp_specs(self.sizes, group_size, prune_last, fixed_first_last)
        rng = np.random.default_rng(seed)
        K = len(self.ladder.bits)
        self.params: dict[str, np.ndarray] = {}
        for spec in self.specs:
            n = spec.name
            bound = np.sqrt(6.0 / (spec.in_channels + spec.out_channels))
            self.params[f"{n}.W"] = rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels))
            self.params[f"{n}.b"] = np.zeros(spec.out_channels)
            self.params[f"{n}.alpha_prune"] = np.zeros(())
            self.params[f"{n}.alpha_w"] = np.zeros(K - 1)
            self.params[f"{n}.alpha_x"] = np.zeros(K - 1)
        self.reset_intervals()

    # -- parameter bookkeeping -------------------------------------------------

    def clone(self) -> SBSNet:
        return copy.deepcopy(self)

    def names(self, kinds: Iterable[str]) -> list[str]:
        kinds = tuple(kinds)
        return [k for k in self.params if k.rsplit(".", 1)[1] in kinds]

    def reset_intervals(self) -> None:
        """``v_w = max|w|`` (after weight normalization, if on); ``v_x = init_v_x``."""
        for spec in self.specs:
            w = self._weight_source_np(self.params[f"{spec.name}.W"])
            self.params[f"{spec.name}.v_w"] = np.asarray(float(np.max(np.abs(w))) or 1.0)
            self.params[f"{spec.name}.v_x"] = np.asarray(float(self.init_v_x))

    def reset_thresholds(self, value: float = 0.0) -> None:
        for k in self.names(W_THRESHOLDS + X_THRESHOLDS):
            self.params[k] = np.full_like(self.params[k], value)

    def thresholds(self) -> dict[str, GateThresholds]:
        return {s.name: GateThresholds(float(self.params[f"{s.name}.alpha_prune"]),
                                       self.params[f"{s.name}.alpha_w"].copy(),
                                       self.params[f"{s.name}.alpha_x"].copy())
                for s in self.specs}

    def set_thresholds(self, th: Mapping[str, GateThresholds]) -> None:
        for name, t in th.items():
            self.params[f"{name}.alpha_prune"] = np.asarray(float(t.alpha_prune))
            self.params[f"{name}.alpha_w"] = np.asarray(t.alpha_bits_w, dtype=np.float64).copy()
            self.params[f"{name}.alpha_x"] = np.asarray(t.alpha_bits_x, dtype=np.float64).copy()

    def leaves(self, trainable: Iterable[str] = ()) -> dict[str, Var]:
        trainable = set(trainable)
        return {k: Var(v, requires_grad=k in trainable, name=k) for k, v in self.params.items()}

    def apply_config_masks(self, config: CompressionConfig) -> None:
        """Zero the stored weights and biases of pruned groups."""
        config.check_against(self.specs)
        for spec, lc in zip(self.specs, config.layers):
            keep = self._row_mask(spec, lc.kept_groups)
            self.params[f"{spec.name}.W"] = self.params[f"{spec.name}.W"] * keep[:, None]
            self.params[f"{spec.name}.b"] = self.params[f"{spec.name}.b"] * keep

    # -- forward ---------------------------------------------------------------

    def _weight_source_np(self, w: np.ndarray) -> np.ndarray:
        if not self.weight_normalization:
            return w
        c = w - w.mean()
        return c / np.sqrt(np.mean(c * c) + 1e-12)

    def _weight_source(self, w: Var) -> Var:
        if not self.weight_normalization:
            return w
        c = ad.sub(w, ad.mean(w))
        return ad.div(c, ad.sqrt(ad.add(ad.mean(ad.square(c)), 1e-12)))

    def _row_mask(self, spec: LayerSpec, kept_groups) -> np.ndarray:
        if not spec.prunable:
            return np.ones(spec.out_channels)
        gid = group_index(spec.out_channels, spec.group_size)
        return np.isin(gid, np.asarray(kept_groups)).astype(np.float64)

    def forward(self, x, mode: str = "float", config: CompressionConfig | None = None,
                params: Mapping[str, Var] | None = None,
                gate_fn: Callable = step_gate, check_finite: bool = True) -> ForwardResult:
        if mode not in ("float", "search", "fixed"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "fixed":
            if config is None:
                raise ValueError("fixed mode needs a CompressionConfig")
            config.check_against(self.specs)
        p = params if params is not None else self.leaves()
        h = ad.as_var(x)
        result = ForwardResult(h)
        last = len(self.specs) - 1
        for i, spec in enumerate(self.specs):
            n = spec.name
            W, b = p[f"{n}.W"], p[f"{n}.b"]
            if mode == "float":
                xq, wq = h, self._weight_source(W)
            elif mode == "fixed":
                lc = config.layers[i]
                xq = quantize_act(h, p[f"{n}.v_x"], lc.a_bits)
                wq = quantize_wt(self._weight_source(W), p[f"{n}.v_w"], lc.w_bits)
                if spec.prunable:
                    mask = self._row_mask(spec, lc.kept_groups)
                    wq = ad.mul(wq, np.repeat(mask[:, None], spec.in_channels, axis=1))
                    b = ad.mul(b, mask)
            else:
                xq, wq, b, state, stats = self._search_layer(spec, h, W, b, p, gate_fn)
                result.gates.append(state)
                result.stats[n] = stats
            out = ad.add_rowwise(ad.matmul(xq, ad.transpose(wq)), b)
            if check_finite:
                _check(out, n, "linear")
            h = ad.relu(out) if i < last else out
        result.logits = h
        return result

    def _search_layer(self, spec: LayerSpec, h: Var, W: Var, b: Var, p, gate_fn):
        n = spec.name
        v_x, v_w = p[f"{n}.v_x"], p[f"{n}.v_w"]
        empty = np.zeros(0)
        if spec.fixed_bits:
            xq = quantize_act(h, v_x, spec.fixed_bits)
            wq = quantize_wt(self._weight_source(W), v_w, spec.fixed_bits)
            gx = gw = None
            mx = mw = empty
        else:
            zx = normalize_act(h, v_x)
            dx = decompose(zx, self.ladder)
            mx = bit_metrics(zx, dx)
            gx = gate_fn(mx, p[f"{n}.alpha_x"])
            xq = ad.mul(v_x, nest(dx.base, list(dx.offsets), gx))

            zw = normalize_wt(self._weight_source(W), v_w)
            dw = decompose(zw, self.ladder)
            mw = bit_metrics(zw, dw)
            gw = gate_fn(mw, p[f"{n}.alpha_w"])
            wq = denormalize_wt(nest(dw.base, list(dw.offsets), gw), v_w)
        if spec.prunable:
            mp = prune_metrics(W, spec.group_size)
            gp = gate_fn(mp, p[f"{n}.alpha_prune"])
            rows = ad.getitem(gp, group_index(spec.out_channels, spec.group_size))
            wq = ad.mul(wq, _expand_rows(rows, spec.in_channels))
            b = ad.mul(b, rows)
        else:
            gp, mp = None, empty
        return xq, wq, b, GateState(gp, gw, gx), LayerStats(mw, mx, mp)

    def predict(self, x, mode: str = "float", config: CompressionConfig | None = None) -> np.ndarray:
        return self.forward(x, mode, config).logits.value.argmax(axis=1)

    def accuracy(self, x, y, mode: str = "float", config: CompressionConfig | None = None) -> float:
        return float(np.mean(self.predict(x, mode, config) == np.asarray(y)))
