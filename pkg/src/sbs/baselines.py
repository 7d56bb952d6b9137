"""Comparison machinery: multi-path mixing, the quantized-regression harness, brute force.

The multi-path scheme keeps one quantized copy of a shared weight per
candidate bitwidth and mixes the path outputs with softmax probabilities.  The
single-path scheme composes one quantized weight from the gated offsets.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import CompressionConfig, LayerConfig, LayerSpec
from .costmodel import discrete_cost, search_space_size
from .data import Dataset
from .decomposition import decompose
from .gates import bit_metrics, nest, prune_metrics, step_gate
from .model import SBSNet
from .quantizer import (
    BitLadder,
    count_discretizations,
    denormalize_wt,
    normalize_wt,
    quantize_wt,
)
from .trainer import SGD, SearchResult, SearchRunConfig, finetune, objective, search

__all__ = [
    "RegressionTask", "multipath_quantized_weight", "single_path_weight", "Prop1Record",
    "run_prop1_experiment", "OracleEntry", "enumerate_configs", "evaluate_config",
    "brute_force_configs", "rank_of", "OracleBudgetError", "ORACLE_LIMIT", "sequential_search",
    "oracle_to_csv",
]

ORACLE_LIMIT = 100_000


# ---------------------------------------------------------------------------
# multi-path / single-path weights


def multipath_quantized_weight(w, ladder: BitLadder, path_logits, v_w=1.0):
    """``sum_i softmax(logits)_i * Q_{b_i}(w)`` over a shared weight ``w``."""
    p = ad.softmax(ad.as_var(path_logits))
    out = None
    for i, b in enumerate(ladder.bits):
        term = ad.mul(p[i], quantize_wt(ad.as_var(w), v_w, b))
        out = term if out is None else ad.add(out, term)
    return out


def single_path_weight(w, ladder: BitLadder, alphas, v_w=1.0, gate_fn=step_gate):
    """Gated decomposition of a shared weight with layer-wise bit thresholds."""
    z = normalize_wt(ad.as_var(w), v_w)
    d = decompose(z, ladder)
    g = gate_fn(bit_metrics(z, d), alphas)
    return denormalize_wt(nest(d.base, list(d.offsets), g), v_w)


# ---------------------------------------------------------------------------
# quantized linear regression


@dataclass(frozen=True)
class RegressionTask:
    """``y = w* . x + noise`` with ``x ~ N(0, sigma^2 I)`` and ``w* ~ U[0, 1]^d``."""

    n: int = 10_000
    d: int = 10
    sigma: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    w_star: tuple[float, ...] | None = None     # fixed true weights instead of a draw

    def __post_init__(self):
        if self.n <= 0 or self.d <= 0:
            raise ValueError("n and d must be positive")
        if self.w_star is not None and len(self.w_star) != self.d:
            raise ValueError("w_star must have length d")

    def generate(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        w_star = rng.uniform(0.0, 1.0, size=self.d)
        if self.w_star is not None:
            w_star = np.asarray(self.w_star, dtype=np.float64)
        x = rng.normal(0.0, self.sigma, size=(self.n, self.d))
        y = x @ w_star + rng.normal(0.0, self.noise_std, size=self.n)
        return x, y, w_star


@dataclass
class Prop1Record:
    seeds: list[int]
    single_losses: np.ndarray      # (seeds, steps + 1) expected squared loss trajectories
    multi_losses: np.ndarray
    counts: dict[str, dict[str, int]]
    params: dict[str, int]
    K: int

    @property
    def final_single(self) -> np.ndarray:
        return self.single_losses[:, -1]

    @property
    def final_multi(self) -> np.ndarray:
        return self.multi_losses[:, -1]

    @property
    def relative_gap(self) -> np.ndarray:
        return np.abs(self.final_single - self.final_multi) / np.minimum(self.final_single, self.final_multi)

    @property
    def residual_to_full_ratio(self) -> float:
        """Single-path residual discretizations over multi-path full discretizations per step."""
        return self.counts["single"]["residual_discretizations"] / self.counts["multi"]["full_discretizations"]

    @property
    def path_reduction(self) -> float:
        """Fraction of path evaluations saved by the single path: ``(K - 1) / K``."""
        m = self.counts["multi"]["path_evaluations"]
        return (m - self.counts["single"]["path_evaluations"]) / m

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["step", "single_path_loss", "multi_path_loss"])
        s, m = self.single_losses.mean(axis=0), self.multi_losses.mean(axis=0)
        for t in range(s.size):
            w.writerow([t, format(s[t], ".12g"), format(m[t], ".12g")])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "seeds": self.seeds, "K": self.K,
            "final_single": self.final_single.tolist(), "final_multi": self.final_multi.tolist(),
            "relative_gap": self.relative_gap.tolist(), "counts_per_step": self.counts,
            "parameters": self.params, "residual_to_full_ratio": self.residual_to_full_ratio,
            "path_reduction": self.path_reduction,
        }


def _expected_loss(x, y, w) -> float:
    r = y - x @ w
    return float(np.mean(r * r))


def _train_regression(x, y, scheme: str, ladder: BitLadder, steps: int, lr: float,
                      lr_gate: float, batch_size: int, rng: np.random.Generator, w0: np.ndarray):
    """Minibatch SGD on one scheme; returns (loss trajectory, counts of one step, parameter count)."""
    K = len(ladder.bits)
    w = w0.copy()
    gate = np.zeros(K - 1) if scheme == "single" else np.zeros(K)
    opt = SGD(momentum=0.9)
    params = {"w": w, "gate": gate}
    traj = []
    n = len(y)

    def quantized(pw, pg):
        if scheme == "single":
            return [single_path_weight(pw, ladder, pg)]
        return [quantize_wt(pw, 1.0, b) for b in ladder.bits], ad.softmax(pg)

    def eval_weight():
        pw, pg = ad.constant(params["w"]), ad.constant(params["gate"])
        if scheme == "single":
            return quantized(pw, pg)[0].value
        paths, p = quantized(pw, pg)
        return sum(p.value[i] * q.value for i, q in enumerate(paths))

    traj.append(_expected_loss(x, y, eval_weight()))
    counts = None
    for _ in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        xb, yb = x[idx], y[idx]
        pw, pg = ad.parameter(params["w"]), ad.parameter(params["gate"])
        with count_discretizations() as tally:
            if scheme == "single":
                outs = [ad.matmul(xb, ad.reshape(quantized(pw, pg)[0], (-1, 1)))]
                pred = outs[0]
            else:
                paths, p = quantized(pw, pg)
                # one forward per path, mixed by the path probabilities
                outs = [ad.matmul(xb, ad.reshape(q, (-1, 1))) for q in paths]
                pred = None
                for i, o in enumerate(outs):
                    term = ad.mul(p[i], o)
                    pred = term if pred is None else ad.add(pred, term)
        step_counts = {"full_discretizations": tally["full"], "residual_discretizations": tally["residual"],
                       "path_evaluations": len(outs)}
        if counts is not None and counts != step_counts:
            raise AssertionError("discretization counts changed between steps")
        counts = step_counts
        resid = ad.sub(ad.reshape(pred, (-1,)), yb)
        loss = ad.mean(ad.square(resid))
        gw, gg = ad.grad(loss, [pw, pg])
        opt.step(params, {"w": gw, "gate": gg}, {"w": lr, "gate": lr_gate})
        traj.append(_expected_loss(x, y, eval_weight()))
    return np.array(traj), counts, w0.size + gate.size


def run_prop1_experiment(task: RegressionTask = RegressionTask(), steps: int = 400,
                         seeds: Sequence[int] = (0, 1, 2, 3, 4), ladder: BitLadder | None = None,
                         lr: float = 0.01, lr_gate: float = 0.01, batch_size: int = 256) -> Prop1Record:
    """Train single-path and multi-path quantized regressors from the same start.

    Each seed regenerates the task (``task.seed + seed``) and the shared initial
    weight; losses are full-dataset mean squared errors after every step.
    """
    ladder = ladder or BitLadder()
    singles, multis = [], []
    counts, nparams = {}, {}
    for seed in seeds:
        t = dataclasses.replace(task, seed=task.seed + seed)
        x, y, _ = t.generate()
        init_rng = np.random.default_rng(10_000 + seed)
        w0 = init_rng.uniform(-0.5, 0.5, size=t.d)
        for scheme, store in (("single", singles), ("multi", multis)):
            traj, c, n = _train_regression(x, y, scheme, ladder, steps, lr, lr_gate, batch_size,
                                           np.random.default_rng(20_000 + seed), w0)
            store.append(traj)
            counts[scheme], nparams[scheme] = c, n
    return Prop1Record(list(seeds), np.array(singles), np.array(multis), counts, nparams, len(ladder.bits))


# ---------------------------------------------------------------------------
# brute-force oracle


class OracleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class OracleEntry:
    config: CompressionConfig
    objective: float
    ce_loss: float
    bops: float

    def sort_key(self):
        return (self.objective, self.bops, self.config.key())


def _kept_options(spec: LayerSpec, w: np.ndarray) -> list[tuple[int, ...]]:
    """Keep the ``n`` groups with the largest mean |w|, for ``n = 1..G``."""
    if not spec.prunable:
        return [tuple(range(spec.groups))]
    metric = prune_metrics(w, spec.group_size)
    order = sorted(range(spec.groups), key=lambda c: (-metric[c], c))
    return [tuple(sorted(order[:n])) for n in range(1, spec.groups + 1)]


def enumerate_configs(model: SBSNet) -> list[CompressionConfig]:
    """Every (w_bits, a_bits, kept count) per layer; counts match :func:`search_space_size`."""
    per_layer = []
    for spec in model.specs:
        bits = [(spec.fixed_bits, spec.fixed_bits)] if spec.fixed_bits else \
            list(itertools.product(model.ladder.bits, repeat=2))
        kept = _kept_options(spec, model.params[f"{spec.name}.W"])
        per_layer.append([LayerConfig(spec.name, wb, ab, k) for (wb, ab), k in itertools.product(bits, kept)])
    return [CompressionConfig(tuple(combo)) for combo in itertools.product(*per_layer)]


def evaluate_config(model: SBSNet, config: CompressionConfig, data: Dataset, lam: float,
                    cfg: SearchRunConfig, steps: int = 50) -> OracleEntry:
    """Fine-tune a copy of ``model`` for ``steps`` steps and score ``CE + lam * log R``.

    ``R`` is the gated-cost value of the configuration (own-output pruning only);
    CE is measured on the full training set.
    """
    m = model.clone()
    if steps > 0:
        finetune(m, config, data, cfg, steps=steps)
    else:
        m.apply_config_masks(config)
    logits = m.forward(data.x_train, "fixed", config).logits
    ce = float(ad.cross_entropy(logits, data.y_train).value)
    bops = discrete_cost(m.specs, config, in_coupling=False).bops
    return OracleEntry(config, float(objective(ce, bops, lam)), ce, bops)


def _eval_chunk(args):
    model, configs, data, lam, cfg, steps = args
    return [evaluate_config(model, c, data, lam, cfg, steps) for c in configs]


def brute_force_configs(model: SBSNet, data: Dataset, lam: float, cfg: SearchRunConfig,
                        steps: int = 50, limit: int = ORACLE_LIMIT, jobs: int = 1) -> list[OracleEntry]:
    """Score every configuration of ``model`` and rank them (best first).

    Ties break on lower BOPs, then on the lexicographic configuration key.
    """
    total = search_space_size(model.specs, model.ladder)
    if total > limit:
        raise OracleBudgetError(
            f"{total} configurations exceed the oracle budget of {limit}; shrink the network")
    configs = enumerate_configs(model)
    assert len(configs) == total
    if jobs > 1:
        chunks = [configs[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            entries = [e for part in ex.map(_eval_chunk, [(model, c, data, lam, cfg, steps) for c in chunks])
                       for e in part]
    else:
        entries = _eval_chunk((model, configs, data, lam, cfg, steps))
    return sorted(entries, key=OracleEntry.sort_key)


def rank_of(entry: OracleEntry, ranking: Sequence[OracleEntry]) -> int:
    """1-based position ``entry`` would take in ``ranking`` (ties resolved like the ranking)."""
    key = entry.sort_key()
    return 1 + sum(1 for e in ranking if e.sort_key() < key)


def oracle_to_csv(ranking: Sequence[OracleEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["rank", "objective", "ce_loss", "bops", "config"])
    for i, e in enumerate(ranking, start=1):
        w.writerow([i, format(e.objective, ".12g"), format(e.ce_loss, ".12g"), format(e.bops, ".12g"),
                    e.config.summary()])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# two-stage baseline


def sequential_search(model: SBSNet, data: Dataset, cfg: SearchRunConfig) -> SearchResult:
    """Prune first, then quantize: two searches with the other gate family frozen.

    Stage one moves only the pruning thresholds (bit thresholds stay at zero,
    so every layer keeps the top rung).  Its kept groups are then fixed, the
    pruned rows are zeroed, and stage two moves only the bit thresholds.  The
    returned config combines stage-one groups with stage-two bitwidths.
    """
    bit_names = model.names(("alpha_w", "alpha_x"))
    stage1 = search(model, data, cfg, frozen=bit_names)
    pruned = stage1.config
    model.apply_config_masks(pruned)
    stage2 = search(model, data, cfg, frozen=model.names(("alpha_prune",)))
    layers = tuple(LayerConfig(b.name, b.w_bits, b.a_bits, p.kept_groups)
                   for p, b in zip(pruned.layers, stage2.config.layers))
    return SearchResult(model.thresholds(), CompressionConfig(layers), stage1.trace + stage2.trace, model)
