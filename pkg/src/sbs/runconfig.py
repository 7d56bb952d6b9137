"""YAML run configuration with line-anchored validation errors.

Layout (every section and key optional)::

    seed: 0
    data:   {kind: blobs, n_train: 512, n_test: 512, classes: 4, dim: 8, spread: 1.0}
    model:  {hidden: [32], fixed_first_last: null}
    search: {lam: 0.1, epochs_search: 10, ...}      # SearchRunConfig fields
    oracle: {steps: 50, hidden: 32, group_size: 2, ladder: [2, 4], epochs_search: 80, lr_threshold: 0.01}
    prop1:  {n: 10000, d: 10, noise_std: 1.0, steps: 400, seeds: [0, 1, 2, 3, 4]}
    sweep:  {lambdas: [0, 0.01, 0.1, 1]}
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import Dataset, make_blobs, read_image_grid
from .trainer import SearchRunConfig

__all__ = ["ConfigError", "RunConfig", "load_run_config", "parse_run_config"]


class ConfigError(ValueError):
    """Invalid run configuration; ``str()`` is ``file:line: field: reason``."""

    def __init__(self, source: str, line: int | None, field_name: str, reason: str):
        self.source, self.line, self.field, self.reason = source, line, field_name, reason
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {field_name}: {reason}")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"
    n_train: int = 512
    n_test: int = 512
    classes: int = 4
    dim: int = 8
    spread: float = 1.0
    path: str | None = None
    test_fraction: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    fixed_first_last: int | None = None


@dataclass(frozen=True)
class OracleConfig:
    steps: int = 50
    hidden: int = 32
    group_size: int = 2
    ladder: tuple[int, ...] = (2, 4)
    n_train: int = 256
    n_test: int = 256
    epochs_pretrain: int = 20
    epochs_search: int = 80
    lr_threshold: float = 0.01


@dataclass(frozen=True)
class Prop1Config:
    n: int = 10_000
    d: int = 10
    noise_std: float = 1.0
    steps: int = 400
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lr: float = 0.01


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = (0.0, 0.01, 0.1, 1.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchRunConfig = field(default_factory=SearchRunConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    prop1: Prop1Config = field(default_factory=Prop1Config)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def with_seed(self, seed: int) -> RunConfig:
        return RunConfig(seed, self.data, self.model, self.search.replace(seed=seed), self.oracle,
                         self.prop1, self.sweep)

    def to_dict(self) -> dict:
        def dc(obj):
            return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
        return {"seed": self.seed, "data": dc(self.data), "model": dc(self.model), "search": dc(self.search),
                "oracle": dc(self.oracle), "prop1": dc(self.prop1), "sweep": dc(self.sweep)}

    def dataset(self) -> Dataset:
        d = self.data
        if d.kind == "blobs":
            return make_blobs(d.n_train, d.n_test, d.classes, d.dim, d.spread, seed=self.seed)
        return read_image_grid(d.path, d.test_fraction)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


# ---------------------------------------------------------------------------
# parsing


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "search": SearchRunConfig,
             "oracle": OracleConfig, "prop1": Prop1Config, "sweep": SweepConfig}



def _line(node) -> int | None:
    return node.start_mark.line + 1 if node is not None else None


def _mapping_nodes(node) -> dict[str, tuple[Any, Any]]:
    """key -> (key node, value node) for a YAML mapping node."""
    return {k.value: (k, v) for k, v in node.value}


def _coerce(source, node, name: str, value, default):
    line = _line(node)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ConfigError(source, line, name, "expected a non-empty list")
        kind = float if any(isinstance(d, float) for d in default) else int
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
                raise ConfigError(source, line, name, f"expected {kind.__name__} items, got {v!r}")
            out.append(kind(v))
        return tuple(out)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(source, line, name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or (default is None and name == "fixed_first_last"):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(source, line, name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(source, line, name, f"expected a number, got {value!r}")
        return float(value)
    if value is not None and not isinstance(value, str):
        raise ConfigError(source, line, name, f"expected a string, got {value!r}")
    return value


def _build(source, cls, section: str, node, raw: dict):
    nodes = _mapping_nodes(node)
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, value in raw.items():
        knode, vnode = nodes[key]
        dotted = f"{section}.{key}"
        if key not in known:
            raise ConfigError(source, _line(knode), dotted, "unknown field")
        kw[key] = _coerce(source, vnode, dotted.split(".")[-1], value, getattr(defaults, key))
    try:
        obj = cls(**kw)
    except ValueError as e:
        # blame the field the message names, else the section
        msg = str(e)
        culprit = next((k for k in kw if msg.startswith(k) or f" {k} " in f" {msg} "), None)
        if culprit is None and kw:
            culprit = next((k for k in kw if k in msg), None)
        line = _line(nodes[culprit][0]) if culprit else _line(node)
        raise ConfigError(source, line, f"{section}.{culprit}" if culprit else section, msg) from None
    return obj


def _validate_extra(source, cfg: RunConfig, nodes):
    def fail(section, key, reason):
        sec = nodes.get(section)
        line = None
        if sec is not None:
            sub = _mapping_nodes(sec[1])
            line = _line(sub[key][0]) if key in sub else _line(sec[0])
        raise ConfigError(source, line, f"{section}.{key}", reason)

    d = cfg.data
    if d.kind not in ("blobs", "image_grid"):
        fail("data", "kind", "must be 'blobs' or 'image_grid'")
    if d.kind == "image_grid" and not d.path:
        fail("data", "path", "required when kind is image_grid")
    for k in ("n_train", "n_test", "classes", "dim"):
        if getattr(d, k) < 1:
            fail("data", k, "must be >= 1")
    if any(h < 1 for h in cfg.model.hidden):
        fail("model", "hidden", "layer widths must be >= 1")
    if cfg.oracle.steps < 0:
        fail("oracle", "steps", "must be >= 0")
    if cfg.prop1.steps < 1:
        fail("prop1", "steps", "must be >= 1")
    if any(l < 0 for l in cfg.sweep.lambdas):
        fail("sweep", "lambdas", "lambda values must be >= 0")


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(source, mark.line + 1 if mark else None, "<yaml>", str(getattr(e, "problem", e))) from None
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError(source, _line(root), "<root>", "expected a mapping")
    nodes = _mapping_nodes(root)
    kw: dict[str, Any] = {}
    for key, value in raw.items():
        knode, vnode = nodes[key]
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(source, _line(vnode), "seed", f"expected a non-negative integer, got {value!r}")
            kw["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(source, _line(vnode), key, "expected a mapping")
            kw[key] = _build(source, _SECTIONS[key], key, vnode, value)
        else:
            raise ConfigError(source, _line(knode), key, "unknown field")
    # the top-level seed wins over search.seed
    search = kw.get("search", SearchRunConfig())
    seed = kw.get("seed", search.seed)
    kw["search"] = search.replace(seed=seed)
    kw["seed"] = seed
    cfg = RunConfig(**kw)
    _validate_extra(source, cfg, nodes)
    return cfg


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(str(p), None, "--config", e.strerror or str(e)) from None
    return parse_run_config(text, str(p))
