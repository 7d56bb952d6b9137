"""Discrete compression configurations and the static layer description."""
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

__all__ = ["LayerSpec", "LayerConfig", "CompressionConfig", "ConfigMismatchError"]


class ConfigMismatchError(ValueError):
    """A compression config does not line up with the layer specs it is applied to."""


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one compressible layer.

    ``macs`` counts multiply-accumulates per inference; ``act_elements`` is the
    output-activation element count for the reference input used in memory
    accounting (defaults to ``out_channels``).
    """

    name: str
    in_channels: int
    out_channels: int
    macs: int
    weight_count: int
    group_size: int = 4
    fixed_bits: int | None = None
    prunable: bool = True
    act_elements: int | None = None

    def __post_init__(self):
        if self.macs <= 0:
            raise ValueError(f"{self.name}: macs must be positive")
        if self.out_channels <= 0 or self.in_channels <= 0 or self.group_size <= 0:
            raise ValueError(f"{self.name}: channel counts and group size must be positive")

    @classmethod
    def linear(cls, name: str, fan_in: int, fan_out: int, **kw) -> LayerSpec:
        return cls(name, fan_in, fan_out, macs=fan_in * fan_out, weight_count=fan_in * fan_out, **kw)

    @classmethod
    def conv(cls, name: str, c_in: int, c_out: int, kernel: int, out_hw: int, **kw) -> LayerSpec:
        weights = c_in * c_out * kernel * kernel
        kw.setdefault("act_elements", c_out * out_hw * out_hw)
        return cls(name, c_in, c_out, macs=weights * out_hw * out_hw, weight_count=weights, **kw)

    @property
    def groups(self) -> int:
        """``ceil(C / B)`` for prunable layers, a single group otherwise."""
        return math.ceil(self.out_channels / self.group_size) if self.prunable else 1

    def group_bounds(self, c: int) -> tuple[int, int]:
        if not 0 <= c < self.groups:
            raise IndexError(f"{self.name}: group index {c} out of range [0, {self.groups})")
        if not self.prunable:
            return 0, self.out_channels
        lo = c * self.group_size
        return lo, min(lo + self.group_size, self.out_channels)

    def group_channels(self, c: int) -> int:
        lo, hi = self.group_bounds(c)
        return hi - lo

    @property
    def output_elements(self) -> int:
        return self.act_elements if self.act_elements is not None else self.out_channels


@dataclass(frozen=True)
class LayerConfig:
    name: str
    w_bits: int
    a_bits: int
    kept_groups: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "kept_groups", tuple(sorted(int(c) for c in self.kept_groups)))
        if not self.kept_groups:
            raise ValueError(f"{self.name}: a layer must keep at least one group")


@dataclass(frozen=True)
class CompressionConfig:
    layers: tuple[LayerConfig, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __getitem__(self, name: str) -> LayerConfig:
        for lc in self.layers:
            if lc.name == name:
                return lc
        raise KeyError(name)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def names(self) -> list[str]:
        return [lc.name for lc in self.layers]

    def check_against(self, specs: Sequence[LayerSpec]) -> None:
        if [s.name for s in specs] != self.names:
            raise ConfigMismatchError(
                f"config layers {self.names} do not match specs {[s.name for s in specs]}")
        for spec, lc in zip(specs, self.layers):
            bad = [c for c in lc.kept_groups if not 0 <= c < spec.groups]
            if bad:
                raise ConfigMismatchError(f"{spec.name}: kept groups {bad} outside [0, {spec.groups})")

    @classmethod
    def uniform(cls, specs: Iterable[LayerSpec], bits: int, honor_fixed: bool = True) -> CompressionConfig:
        out = []
        for s in specs:
            b = s.fixed_bits if (honor_fixed and s.fixed_bits) else bits
            out.append(LayerConfig(s.name, b, b, tuple(range(s.groups))))
        return cls(tuple(out))

    @classmethod
    def uncompressed(cls, specs: Iterable[LayerSpec]) -> CompressionConfig:
        return cls.uniform(specs, 32, honor_fixed=False)

    def key(self) -> tuple:
        """Hashable, lexicographically comparable identity."""
        return tuple((lc.w_bits, lc.a_bits, lc.kept_groups) for lc in self.layers)

    def to_dict(self) -> dict:
        return {"layers": [dict(asdict(lc), kept_groups=list(lc.kept_groups)) for lc in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> CompressionConfig:
        return cls(tuple(LayerConfig(x["name"], int(x["w_bits"]), int(x["a_bits"]),
                                     tuple(x["kept_groups"])) for x in d["layers"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> CompressionConfig:
        return cls.from_dict(json.loads(text))

    def summary(self) -> str:
        return ";".join(f"{lc.name}:w{lc.w_bits}a{lc.a_bits}k{len(lc.kept_groups)}" for lc in self.layers)
