"""Bit-operation cost: differentiable gated cost, discrete accounting, search-space size.

BOPs of a layer are ``MACs * b_w * b_a``.  The gated cost telescopes the
ladder increments behind the bit gates and scales every output group by its
pruning gate; weight-side and activation-side telescopes multiply because
BOPs are a product of the two bitwidths.
"""
from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .config import CompressionConfig, LayerSpec
from .gates import GateState, _gate_list
from .quantizer import BitLadder

__all__ = ["CostReport", "LayerCost", "gated_cost", "telescoped_bits", "discrete_cost",
           "search_space_size", "REFERENCE_BITS"]

REFERENCE_BITS = 32


def telescoped_bits(gates, ladder: BitLadder):
    """``b_1 + g_2 (b_2 - b_1 + g_3 (b_3 - b_2 + ...))``."""
    gates = _gate_list(gates)
    bits = ladder.bits
    if not any(isinstance(g, Var) for g in gates):
        inner = 0.0
        for j in range(len(gates), 0, -1):
            inner = float(np.asarray(gates[j - 1])) * (bits[j] - bits[j - 1] + inner)
        return bits[0] + inner
    inner = None
    for j in range(len(gates), 0, -1):
        step = float(bits[j] - bits[j - 1])
        inner = ad.mul(gates[j - 1], step if inner is None else ad.add(step, inner))
    return ad.add(float(bits[0]), inner)


def _group_fractions(spec: LayerSpec) -> np.ndarray:
    return np.array([spec.group_channels(c) for c in range(spec.groups)], dtype=np.float64) \
        / spec.out_channels


def gated_cost(layers: Sequence[LayerSpec], gates: Sequence[GateState], ladder: BitLadder):
    """Differentiable cost ``R``; returns a ``Var`` when any gate is a ``Var``.

    Each output group carries ``MACs * |group| / C`` of the layer's work.  Layers
    with ``fixed_bits`` use that width on both sides; non-prunable layers have
    an implicit always-open pruning gate.
    """
    if not layers:
        raise ValueError("gated_cost: empty layer list")
    if len(layers) != len(gates):
        raise ValueError(f"gated_cost: {len(layers)} layers but {len(gates)} gate states")
    total = None
    for spec, st in zip(layers, gates):
        if spec.fixed_bits:
            wb = ab = float(spec.fixed_bits)
        else:
            wb = telescoped_bits(st.g_bits_w, ladder)
            ab = telescoped_bits(st.g_bits_x, ladder)
        if spec.prunable and st.g_prune is not None:
            frac = _group_fractions(spec)
            kept = ad.sum(ad.mul(st.g_prune, frac)) if isinstance(st.g_prune, Var) \
                else float(np.dot(np.asarray(st.g_prune, dtype=np.float64), frac))
        else:
            kept = 1.0
        term = _prod(float(spec.macs), kept, wb, ab)
        total = term if total is None else (ad.add(total, term) if _is_var(total, term) else total + term)
    return total


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _prod(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = ad.mul(out, x) if _is_var(out, x) else out * x
    return out


@dataclass
class LayerCost:
    name: str
    w_bits: int
    a_bits: int
    kept_out: float
    kept_in: float
    bops: float
    memory_kb: float

    @property
    def pruning_rate(self) -> float:
        return 1.0 - self.kept_out


@dataclass
class CostReport:
    bops: float
    memory_kb: float
    bop_ratio: float
    memory_ratio: float
    per_layer: list[LayerCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"bops": self.bops, "memory_kb": self.memory_kb, "bop_ratio": self.bop_ratio,
                "memory_ratio": self.memory_ratio,
                "per_layer": [dict(asdict(lc), pruning_rate=lc.pruning_rate) for lc in self.per_layer]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _kept_fraction(spec: LayerSpec, kept_groups) -> float:
    return sum(spec.group_channels(c) for c in kept_groups) / spec.out_channels


def _account(layers, config, in_coupling):
    rows = []
    prev_spec, prev_kept = None, 1.0
    for spec, lc in zip(layers, config.layers):
        kept_out = _kept_fraction(spec, lc.kept_groups)
        feeds = prev_spec is not None and prev_spec.out_channels == spec.in_channels
        kept_in = prev_kept if (in_coupling and feeds) else 1.0
        bops = kept_out * kept_in * spec.macs * lc.w_bits * lc.a_bits
        mem_bits = spec.weight_count * kept_out * kept_in * lc.w_bits \
            + spec.output_elements * kept_out * lc.a_bits
        rows.append(LayerCost(spec.name, lc.w_bits, lc.a_bits, kept_out, kept_in, bops,
                              mem_bits / 8 / 1024))
        prev_spec, prev_kept = spec, kept_out
    return rows


def discrete_cost(layers: Sequence[LayerSpec], config: CompressionConfig,
                  in_coupling: bool = True) -> CostReport:
    """BOPs and memory of a fixed configuration, with ratios against 32-bit dense.

    With ``in_coupling`` a layer fed by a pruned predecessor (matching channel
    count) also loses the corresponding input fraction.
    """
    config.check_against(layers)
    rows = _account(layers, config, in_coupling)
    ref = _account(layers, CompressionConfig.uncompressed(layers), in_coupling)
    bops = sum(r.bops for r in rows)
    mem = sum(r.memory_kb for r in rows)
    ref_bops = sum(r.bops for r in ref)
    ref_mem = sum(r.memory_kb for r in ref)
    return CostReport(bops, mem, ref_bops / bops if bops else math.inf,
                      ref_mem / mem if mem else math.inf, rows)


def search_space_size(layers: Sequence[LayerSpec], ladder: BitLadder, group_size: int | None = None) -> int:
    """``prod_l (K^2 * G_l)``; fixed-bit layers contribute one quantization choice.

    ``group_size`` overrides each spec's own ``B`` when given.
    """
    K = len(ladder.bits)
    size = 1
    for spec in layers:
        B = group_size or spec.group_size
        G = math.ceil(spec.out_channels / B) if spec.prunable else 1
        size *= (1 if spec.fixed_bits else K * K) * G
    return size
