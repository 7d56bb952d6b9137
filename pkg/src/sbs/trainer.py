"""Pre-training, alternating gate search, and fixed-configuration fine-tuning.

Search objective: ``CE + lambda * log R`` with ``R`` the gated BOP cost.  Each
search epoch runs two passes over the data: the first updates the weights,
the quantization intervals and the weight-side thresholds (pruning and weight
bits); the second updates the weights, the intervals and the activation
thresholds.  The other threshold family's gradients are zeroed in each pass.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .config import CompressionConfig
from .costmodel import discrete_cost, gated_cost
from .data import Dataset
from .gates import GateThresholds, extract_config, step_gate
from .model import (
    INTERVAL_PARAMS,
    W_THRESHOLDS,
    WEIGHT_PARAMS,
    X_THRESHOLDS,
    NonFiniteError,
    SBSNet,
)
from .quantizer import BitLadder

log = logging.getLogger(__name__)

__all__ = [
    "SearchRunConfig", "SearchResult", "TraceRow", "SGD", "objective", "pretrain", "search",
    "search_step", "finetune", "train_fixed", "batches", "trace_to_csv", "save_checkpoint",
    "load_checkpoint", "build_model", "phase_params",
]

TRACE_COLUMNS = ("epoch", "phase", "ce_loss", "R", "bops", "gates")


@dataclass(frozen=True)
class SearchRunConfig:
    lam: float = 0.1
    epochs_pretrain: int = 30
    epochs_search: int = 10
    epochs_finetune: int = 10
    lr_pretrain: float = 0.1
    lr_search: float = 0.02
    lr_threshold: float = 0.02
    lr_finetune: float = 0.02
    momentum: float = 0.9
    nesterov: bool = False
    batch_size: int = 64
    seed: int = 0
    ladder: tuple[int, ...] = (2, 4, 8)
    group_size: int = 4
    weight_normalization: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(int(b) for b in self.ladder))
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name in ("epochs_search", "epochs_finetune"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs_pretrain < 0:
            raise ValueError("epochs_pretrain must be >= 0")
        if self.batch_size < 1 or self.group_size < 1:
            raise ValueError("batch_size and group_size must be >= 1")
        BitLadder(self.ladder)

    @property
    def bit_ladder(self) -> BitLadder:
        return BitLadder(self.ladder)

    def replace(self, **kw) -> SearchRunConfig:
        d = asdict(self)
        d.update(kw)
        return SearchRunConfig(**d)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------------------
# optimization primitives


class SGD:
    """SGD with (optionally Nesterov) momentum over a name -> array dict."""

    def __init__(self, momentum: float = 0.9, nesterov: bool = False):
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        for name, g in grads.items():
            v = self.momentum * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            d = g + self.momentum * v if self.nesterov else v
            params[name] = params[name] - lrs[name] * d


def objective(ce_loss, R, lam: float):
    """``ce_loss + lam * log(R)``."""
    Rv = R.value if isinstance(R, Var) else np.asarray(R)
    if not np.all(Rv > 0):
        raise ValueError(f"cost R must be positive for log, got {Rv}")
    if lam == 0:
        return ce_loss
    if isinstance(ce_loss, Var) or isinstance(R, Var):
        return ad.add(ce_loss, ad.mul(lam, ad.log(R)))
    return float(ce_loss) + lam * math.log(float(R))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of shuffled index batches; reshuffles every pass."""
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo: lo + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _clamp_intervals(model: SBSNet) -> None:
    for k in model.names(INTERVAL_PARAMS):
        model.params[k] = np.maximum(model.params[k], 1e-3)


def build_model(data: Dataset, cfg: SearchRunConfig, hidden: Sequence[int] = (32,),
                fixed_first_last: int | None = None) -> SBSNet:
    sizes = [data.n_features, *hidden, data.n_classes]
    return SBSNet(sizes, cfg.bit_ladder, cfg.group_size, seed=cfg.seed,
                  weight_normalization=cfg.weight_normalization, fixed_first_last=fixed_first_last)


# ---------------------------------------------------------------------------
# plain and fixed-configuration training


def train_fixed(model: SBSNet, data: Dataset, *, mode: str, config: CompressionConfig | None,
                lr: float, steps: int, batch_size: int, momentum: float, nesterov: bool,
                rng: np.random.Generator) -> list[float]:
    """Train W, b and the intervals for ``steps`` minibatch steps; returns batch losses."""
    names = model.names(WEIGHT_PARAMS + (INTERVAL_PARAMS if mode == "fixed" else ()))
    opt = SGD(momentum, nesterov)
    losses = []
    stream = batches(len(data.y_train), batch_size, rng)
    for _ in range(steps):
        idx = next(stream)
        p = model.leaves(names)
        loss = ad.cross_entropy(model.forward(data.x_train[idx], mode, config, p).logits,
                                data.y_train[idx])
        if not np.isfinite(loss.value):
            raise NonFiniteError("loss", "cross_entropy")
        g = ad.backward(loss, [p[k] for k in names])
        opt.step(model.params, {k: g[p[k]] for k in names}, {k: lr for k in names})
        _clamp_intervals(model)
        losses.append(float(loss.value))
    return losses


def pretrain(model: SBSNet, data: Dataset, cfg: SearchRunConfig) -> SBSNet:
    """Full-precision training producing the starting point of the search."""
    rng = np.random.default_rng(cfg.seed + 1)
    steps = cfg.epochs_pretrain * steps_per_epoch(len(data.y_train), cfg.batch_size)
    train_fixed(model, data, mode="float", config=None, lr=cfg.lr_pretrain, steps=steps,
                batch_size=cfg.batch_size, momentum=cfg.momentum, nesterov=cfg.nesterov, rng=rng)
    model.reset_intervals()
    model.reset_thresholds(0.0)
    return model


def finetune(model: SBSNet, config: CompressionConfig, data: Dataset, cfg: SearchRunConfig,
             steps: int | None = None) -> tuple[SBSNet, float]:
    """Quantization-aware training at the fixed config; returns (model, test accuracy).

    Pruned groups are zeroed and stay zero (their gradients are masked).
    """
    config.check_against(model.specs)
    model.apply_config_masks(config)
    rng = np.random.default_rng(cfg.seed + 3)
    if steps is None:
        steps = cfg.epochs_finetune * steps_per_epoch(len(data.y_train), cfg.batch_size)
    train_fixed(model, data, mode="fixed", config=config, lr=cfg.lr_finetune, steps=steps,
                batch_size=cfg.batch_size, momentum=cfg.momentum, nesterov=cfg.nesterov, rng=rng)
    return model, model.accuracy(data.x_test, data.y_test, "fixed", config)


# ---------------------------------------------------------------------------
# search


@dataclass
class TraceRow:
    epoch: int
    phase: str
    ce_loss: float
    R: float
    bops: float
    gates: str


@dataclass
class SearchResult:
    thresholds: dict[str, GateThresholds]
    config: CompressionConfig
    trace: list[TraceRow] = field(default_factory=list)
    model: SBSNet | None = None


def phase_params(model: SBSNet, phase: str) -> tuple[list[str], list[str]]:
    """(parameters updated, threshold parameters masked) for a search half-step."""
    base = WEIGHT_PARAMS + INTERVAL_PARAMS
    if phase == "search-w":
        return model.names(base + W_THRESHOLDS), model.names(X_THRESHOLDS)
    if phase == "search-x":
        return model.names(base + X_THRESHOLDS), model.names(W_THRESHOLDS)
    if phase == "search-joint":
        return model.names(base + W_THRESHOLDS + X_THRESHOLDS), []
    raise ValueError(f"unknown phase {phase!r}")


def search_loss(model: SBSNet, x, y, lam: float, params, gate_fn: Callable = step_gate):
    """(objective, ce, R) for one batch in search mode."""
    res = model.forward(x, "search", params=params, gate_fn=gate_fn)
    ce = ad.cross_entropy(res.logits, y)
    R = gated_cost(model.specs, res.gates, model.ladder)
    if not np.isfinite(ce.value):
        raise NonFiniteError("loss", "cross_entropy")
    return objective(ce, R, lam), ce, R


def search_step(model: SBSNet, x, y, lam: float, phase: str, opt: SGD,
                lr: float, lr_threshold: float,
                frozen: Sequence[str] = ()) -> tuple[dict[str, np.ndarray], float, float]:
    """One minibatch update of a search half-step.

    Gradients are taken for every threshold; the inactive family (and anything
    in ``frozen``) is zeroed before the update.  Returns the applied gradients
    with the batch cross-entropy and cost.
    """
    update, masked = phase_params(model, phase)
    every = update + masked
    p = model.leaves(every)
    loss, ce, R = search_loss(model, x, y, lam, p)
    if not np.isfinite(loss.value):
        raise NonFiniteError("loss", "objective")
    g = ad.backward(loss, [p[k] for k in every])
    grads = {k: g[p[k]] for k in every}
    for k in list(masked) + [k for k in frozen if k in grads]:
        grads[k] = np.zeros_like(grads[k])
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(k, "backward")
    lrs = {k: (lr_threshold if k.rsplit(".", 1)[1].startswith("alpha") else lr) for k in grads}
    opt.step(model.params, grads, lrs)
    _clamp_intervals(model)
    return grads, float(ce.value), float(R.value)


def snapshot(model: SBSNet, data: Dataset) -> tuple[CompressionConfig, float]:
    """Extract the current config from a full-training-set forward; also returns hard ``R``."""
    res = model.forward(data.x_train, "search")
    cfg = extract_config(model.specs, model.thresholds(), res.stats, model.ladder)
    R = float(gated_cost(model.specs, [s.hard() for s in res.gates], model.ladder))
    return cfg, R


def search(model: SBSNet, data: Dataset, cfg: SearchRunConfig, *,
           phases: Sequence[str] = ("search-w", "search-x"),
           frozen: Sequence[str] = ()) -> SearchResult:
    """Alternating search from a pre-trained model (modified in place).

    ``phases`` lists the half-steps run in every epoch; ``frozen`` names
    parameters that never move (used for pruning-only or bits-only searches).
    """
    rng = np.random.default_rng(cfg.seed + 2)
    opt = SGD(cfg.momentum, cfg.nesterov)
    stream = batches(len(data.y_train), cfg.batch_size, rng)
    per_epoch = steps_per_epoch(len(data.y_train), cfg.batch_size)
    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs_search + 1):
        for phase in phases:
            ces = []
            for _ in range(per_epoch):
                idx = next(stream)
                _, ce, _ = search_step(model, data.x_train[idx], data.y_train[idx], cfg.lam,
                                       phase, opt, cfg.lr_search, cfg.lr_threshold, frozen)
                ces.append(ce)
            conf, R = snapshot(model, data)
            bops = discrete_cost(model.specs, conf).bops
            trace.append(TraceRow(epoch, phase, float(np.mean(ces)), R, bops, conf.summary()))
            log.debug("epoch %d %s ce=%.4f R=%.4g %s", epoch, phase, trace[-1].ce_loss, R, conf.summary())
    conf, _ = snapshot(model, data)
    return SearchResult(model.thresholds(), conf, trace, model)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    return format(v, ".12g") if isinstance(v, float) else str(v)


def trace_to_csv(trace: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def save_checkpoint(model: SBSNet, path_stem, config: CompressionConfig | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (little-endian float64 blob)."""
    stem = Path(path_stem)
    entries, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": "sbs-checkpoint-1",
        "sizes": model.sizes,
        "ladder": list(model.ladder.bits),
        "group_size": model.group_size,
        "weight_normalization": model.weight_normalization,
        "fixed_bits": {s.name: s.fixed_bits for s in model.specs if s.fixed_bits},
        "thresholds": {k: v.to_dict() for k, v in model.thresholds().items()},
        "config": config.to_dict() if config is not None else None,
        "tensors": entries,
        "blob": stem.name + ".bin",
    }
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return json_path, bin_path


def load_checkpoint(json_path) -> tuple[SBSNet, CompressionConfig | None]:
    json_path = Path(json_path)
    m = json.loads(json_path.read_text())
    fixed = set(m.get("fixed_bits", {}).values())
    model = SBSNet(m["sizes"], BitLadder(tuple(m["ladder"])), m["group_size"],
                   weight_normalization=m["weight_normalization"],
                   fixed_first_last=next(iter(fixed)) if fixed else None)
    blob = np.frombuffer((json_path.parent / m["blob"]).read_bytes(), dtype="<f8")
    for e in m["tensors"]:
        model.params[e["name"]] = blob[e["offset"]: e["offset"] + e["count"]].reshape(tuple(e["shape"])).astype(np.float64)
    cfg = CompressionConfig.from_dict(m["config"]) if m.get("config") else None
    return model, cfg
