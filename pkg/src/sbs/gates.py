"""Binary gates over the decomposition: bit gates per layer, pruning gates per group.

A gate is ``H(metric - alpha)`` with ``H(0) = 1``.  Its backward pass uses the
sigmoid derivative: ``-S(A)(1 - S(A))`` towards the threshold and the positive
counterpart towards the metric, where ``A = metric - alpha``.

Metrics:

* bit gate ``j`` (``j >= 2``): mean absolute quantization error
  ``mean|z - z_{b_{j-1}}|`` over the layer tensor (normalized domain);
* pruning gate of group ``c``: mean absolute pre-quantization weight of the group.

Both are treated as constants in backward; the threshold is the only path.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, _sigmoid
from .config import CompressionConfig, LayerConfig, LayerSpec
from .decomposition import BitDecomposition
from .quantizer import BitLadder

__all__ = [
    "GateThresholds", "GateState", "LayerStats", "step_gate", "heaviside", "nest",
    "bit_metrics", "prune_metrics", "gated_weight", "gated_activation",
    "effective_bits", "extract_config", "group_index",
]

GateFn = Callable[[object, object], Var]


def heaviside(a) -> np.ndarray:
    """1 where ``a >= 0``, else 0."""
    return (np.asarray(a, dtype=np.float64) >= 0).astype(np.float64)


def _gate_forward(metric, alpha):
    return heaviside(metric - alpha)


def _gate_backward(inputs, g):
    metric, alpha = inputs
    s = _sigmoid(np.asarray(metric - alpha, dtype=np.float64))
    d = s * (1.0 - s) * g
    return d, -d


_step_gate = ad.register_custom_grad(_gate_forward, _gate_backward, name="step_gate")


def step_gate(metric, alpha) -> Var:
    """Hard 0/1 gate with the sigmoid straight-through gradient.

    ``metric`` may be a vector (one gate per entry) sharing a scalar ``alpha``.
    """
    return _step_gate(metric, alpha)


@dataclass
class GateThresholds:
    """Learnable thresholds of one layer; all start at zero (every gate open)."""

    alpha_prune: float = 0.0
    alpha_bits_w: np.ndarray = field(default_factory=lambda: np.zeros(2))
    alpha_bits_x: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def zeros(cls, K: int) -> GateThresholds:
        return cls(0.0, np.zeros(K - 1), np.zeros(K - 1))

    @classmethod
    def constant(cls, K: int, value: float) -> GateThresholds:
        return cls(value, np.full(K - 1, value), np.full(K - 1, value))

    def to_dict(self) -> dict:
        return {"alpha_prune": float(self.alpha_prune),
                "alpha_bits_w": [float(a) for a in self.alpha_bits_w],
                "alpha_bits_x": [float(a) for a in self.alpha_bits_x]}

    @classmethod
    def from_dict(cls, d: Mapping) -> GateThresholds:
        return cls(float(d["alpha_prune"]), np.asarray(d["alpha_bits_w"], dtype=np.float64),
                   np.asarray(d["alpha_bits_x"], dtype=np.float64))


@dataclass
class GateState:
    """Gate outputs of one layer (arrays or ``Var``s)."""

    g_prune: object
    g_bits_w: object
    g_bits_x: object

    def hard(self) -> GateState:
        v = lambda x: np.asarray(x.value if isinstance(x, Var) else x, dtype=np.float64)
        return GateState(v(self.g_prune), v(self.g_bits_w), v(self.g_bits_x))


@dataclass
class LayerStats:
    """Gate metrics recorded by a forward pass, used for config extraction."""

    w_bit_metrics: np.ndarray
    x_bit_metrics: np.ndarray
    prune_metrics: np.ndarray


def _gate_list(gates) -> list:
    if isinstance(gates, Var):
        return [gates[j] for j in range(gates.shape[0])]
    return list(gates)


def nest(base, offsets: Sequence, gates) -> object:
    """``base + g_2 (r_2 + g_3 (r_3 + ... + g_K r_K))``.

    Evaluated inside-out so an inactive gate hides every deeper offset, both in
    value and in gradient.
    """
    gates = _gate_list(gates)
    if len(gates) != len(offsets):
        raise ValueError(f"nest: {len(offsets)} offsets but {len(gates)} gates")
    if not offsets:
        return base
    use_graph = any(isinstance(x, Var) for x in [base, *offsets, *gates])
    if not use_graph:
        inner = 0.0
        for r, g in zip(reversed(offsets), reversed(gates)):
            inner = g * (r + inner)
        return base + inner
    inner = None
    for r, g in zip(reversed(offsets), reversed(gates)):
        inner = ad.mul(g, r if inner is None else ad.add(r, inner))
    return ad.add(base, inner)


def bit_metrics(z, decomp: BitDecomposition) -> np.ndarray:
    """``mean|z - z_{b_{j-1}}|`` for ``j = 2..K``."""
    zv = z.value if isinstance(z, Var) else np.asarray(z)
    sums = decomp.prefix_sums()[:-1]
    return np.array([np.mean(np.abs(zv - (p.value if isinstance(p, Var) else p))) for p in sums])


def group_index(n_rows: int, group_size: int) -> np.ndarray:
    """Group id of each output row."""
    return np.arange(n_rows) // group_size


def prune_metrics(w, group_size: int) -> np.ndarray:
    """Mean absolute weight of each output-row group."""
    wv = np.asarray(w.value if isinstance(w, Var) else w)
    rows = np.abs(wv.reshape(wv.shape[0], -1))
    gid = group_index(wv.shape[0], group_size)
    sums = np.bincount(gid, weights=rows.sum(axis=1))
    counts = np.bincount(gid) * rows.shape[1]
    return sums / counts


def gated_weight(z, decomp: BitDecomposition, thresholds: GateThresholds, group_index_c: int,
                 w, group_size: int, gate_fn: GateFn = step_gate):
    """Gated normalized code of output group ``c``.

    Returns ``g_prune_c * (z_{b_1} + g_{b_2}(r_{b_2} + ...))`` restricted to the
    rows of group ``c``.  Bit gates are layer-wise (metrics over the whole
    tensor), the pruning gate uses the group's mean absolute weight ``w``.
    """
    n_rows = (z.shape if isinstance(z, Var) else np.shape(z))[0]
    n_groups = -(-n_rows // group_size)
    if not 0 <= group_index_c < n_groups:
        raise IndexError(f"group index {group_index_c} out of range [0, {n_groups})")
    lo, hi = group_index_c * group_size, min((group_index_c + 1) * group_size, n_rows)
    g_bits = gate_fn(bit_metrics(z, decomp), thresholds.alpha_bits_w)
    g_prune = gate_fn(prune_metrics(w, group_size)[group_index_c], thresholds.alpha_prune)
    sl = slice(lo, hi)
    base = ad.getitem(ad.as_var(decomp.base), sl)
    offsets = [ad.getitem(ad.as_var(r), sl) for r in decomp.offsets]
    return ad.mul(g_prune, nest(base, offsets, g_bits))


def gated_activation(z, decomp: BitDecomposition, thresholds: GateThresholds,
                     gate_fn: GateFn = step_gate):
    """Gated activation code; activations carry bit gates only, never pruning."""
    g_bits = gate_fn(bit_metrics(z, decomp), thresholds.alpha_bits_x)
    return nest(decomp.base, list(decomp.offsets), g_bits)


def effective_bits(gates, ladder: BitLadder) -> int:
    """``b_1`` extended through the longest prefix of active bit gates."""
    g = np.asarray(gates.value if isinstance(gates, Var) else gates).reshape(-1)
    bits = ladder.bits[0]
    for j, on in enumerate(g, start=1):
        if on < 0.5:
            break
        bits = ladder.bits[j]
    return bits


def extract_config(specs: Sequence[LayerSpec], thresholds: Mapping[str, GateThresholds],
                   stats: Mapping[str, LayerStats], ladder: BitLadder) -> CompressionConfig:
    """Read the discrete configuration off the hard gates.

    A layer whose every pruning gate is closed keeps its group with the largest
    metric, so the network never loses a whole layer.
    """
    out = []
    for spec in specs:
        th, st = thresholds[spec.name], stats[spec.name]
        if spec.fixed_bits:
            w_bits = a_bits = spec.fixed_bits
        else:
            w_bits = effective_bits(heaviside(st.w_bit_metrics - th.alpha_bits_w), ladder)
            a_bits = effective_bits(heaviside(st.x_bit_metrics - th.alpha_bits_x), ladder)
        if spec.prunable:
            metrics = np.asarray(st.prune_metrics)
            kept = np.flatnonzero(heaviside(metrics - th.alpha_prune))
            if kept.size == 0:
                kept = np.array([int(np.argmax(metrics))])
        else:
            kept = np.arange(spec.groups)
        out.append(LayerConfig(spec.name, int(w_bits), int(a_bits), tuple(int(c) for c in kept)))
    return CompressionConfig(tuple(out))
