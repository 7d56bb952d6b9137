"""Normalize -> discretize -> denormalize quantizers with trainable intervals.

Every function accepts plain arrays or :class:`~sbs.autodiff.Var` inputs.  With
plain arrays the result is an ``ndarray``; as soon as one argument is a ``Var``
the result is a ``Var`` wired for straight-through backward.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "BitLadder", "LadderError", "QuantInterval", "step_size", "round_half_down",
    "discretize", "normalize_act", "normalize_wt", "quantize_act", "quantize_wt",
    "FULL_PRECISION_BITS", "count_discretizations",
]

#: Bitwidths at or above this are treated as unquantized.
FULL_PRECISION_BITS = 32

# Codes within this distance of a half step count as exact midpoints, so
# residual rounding agrees with direct rounding despite float noise.
_MIDPOINT_TOL = 1e-12


class LadderError(ValueError):
    pass


def step_size(bits: int) -> float:
    """Normalized grid spacing ``1 / (2**bits - 1)``."""
    if int(bits) != bits or bits < 1:
        raise ValueError(f"bitwidth must be a positive integer, got {bits!r}")
    return 1.0 / (2 ** int(bits) - 1)


@dataclass(frozen=True)
class BitLadder:
    """Increasing candidate bitwidths, each an integer multiple (>= 2x) of the previous."""

    bits: tuple[int, ...] = (2, 4, 8)

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if not bits:
            raise LadderError("ladder needs at least one bitwidth")
        if bits[0] < 1:
            raise LadderError(f"bitwidths must be positive, got {bits}")
        for lo, hi in zip(bits, bits[1:]):
            if hi % lo or hi // lo < 2:
                raise LadderError(
                    f"ladder {bits}: {hi} is not an integer multiple (>= 2) of {lo}")

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def base(self) -> int:
        return self.bits[0]

    @property
    def top(self) -> int:
        return self.bits[-1]

    @property
    def multipliers(self) -> tuple[int, ...]:
        return tuple(hi // lo for lo, hi in zip(self.bits, self.bits[1:]))

    @property
    def step_sizes(self) -> tuple[float, ...]:
        return tuple(step_size(b) for b in self.bits)

    def __len__(self):
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)


@dataclass
class QuantInterval:
    """Learnable clip levels for one layer's weights (``v_w``) and input activations (``v_x``)."""

    v_w: float = 1.0
    v_x: float = 1.0
    min_value: float = field(default=1e-3, repr=False)

    def __post_init__(self):
        if self.v_w <= 0 or self.v_x <= 0:
            raise ValueError(f"quantization intervals must be positive, got v_w={self.v_w}, v_x={self.v_x}")

    @classmethod
    def for_weights(cls, w, v_x: float = 1.0) -> QuantInterval:
        """Initial interval with ``v_w = max|w|`` so the first clip is lossless."""
        return cls(v_w=float(np.max(np.abs(w))) or 1.0, v_x=v_x)

    def clamp(self) -> None:
        self.v_w = max(self.v_w, self.min_value)
        self.v_x = max(self.v_x, self.min_value)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _positive(name: str, v) -> None:
    val = v.value if isinstance(v, Var) else np.asarray(v)
    if not np.all(val > 0):
        raise ValueError(f"{name} must be positive, got {val}")


def round_half_down(x):
    """``ceil(x - 0.5)``: nearest integer, halves go to the lower integer."""
    return np.ceil(np.asarray(x, dtype=np.float64) - 0.5 - _MIDPOINT_TOL) + 0.0


def _discretize_np(z, s: float) -> np.ndarray:
    return s * round_half_down(np.asarray(z, dtype=np.float64) / s)


_discretize_ste = ad.register_custom_grad(
    lambda z, s: _discretize_np(z, float(s)),
    lambda inputs, g: (g, None),
    name="discretize",
)


_call_counters: list[Counter] = []


@contextmanager
def count_discretizations():
    """Tally :func:`discretize` calls by ``kind`` inside the ``with`` block."""
    c = Counter()
    _call_counters.append(c)
    try:
        yield c
    finally:
        _call_counters.remove(c)


def discretize(z, s: float, kind: str = "full"):
    """``s * round(z / s)`` with identity (straight-through) backward.

    The step size receives no gradient.  ``z`` may lie outside ``[0, 1]`` (the
    decomposition feeds signed residuals through here).  ``kind`` only labels
    the call for :func:`count_discretizations`.
    """
    s = float(s)
    if not 0.0 < s <= 1.0:
        raise ValueError(f"step size must lie in (0, 1], got {s}")
    for c in _call_counters:
        c[kind] += 1
    if isinstance(z, Var):
        return _discretize_ste(z, s)
    return _discretize_np(z, s)


def normalize_act(x, v_x):
    """``clip(x / v_x, 0, 1)``."""
    _positive("v_x", v_x)
    if _any_var(x, v_x):
        return ad.clip(ad.div(x, v_x), 0.0, 1.0)
    return np.clip(np.asarray(x, dtype=np.float64) / v_x, 0.0, 1.0)


def normalize_wt(w, v_w):
    """``(clip(w / v_w, -1, 1) + 1) / 2``."""
    _positive("v_w", v_w)
    if _any_var(w, v_w):
        return ad.mul(ad.add(ad.clip(ad.div(w, v_w), -1.0, 1.0), 1.0), 0.5)
    return (np.clip(np.asarray(w, dtype=np.float64) / v_w, -1.0, 1.0) + 1.0) / 2.0


def quantize_act(x, v_x, k: int):
    """``v_x * D(T_x(x), 1/(2^k - 1))``; bitwidths >= 32 return ``x`` unchanged."""
    if k >= FULL_PRECISION_BITS:
        return x
    z = discretize(normalize_act(x, v_x), step_size(k))
    return ad.mul(v_x, z) if _any_var(z, v_x) else v_x * z


def quantize_wt(w, v_w, k: int):
    """``v_w * (2 * D(T_w(w), 1/(2^k - 1)) - 1)``, values in ``[-v_w, v_w]``."""
    if k >= FULL_PRECISION_BITS:
        return w
    z = discretize(normalize_wt(w, v_w), step_size(k))
    return denormalize_wt(z, v_w)


def denormalize_wt(z, v_w):
    """Inverse of :func:`normalize_wt` on ``[0, 1]``."""
    if _any_var(z, v_w):
        return ad.mul(v_w, ad.sub(ad.mul(z, 2.0), 1.0))
    return v_w * (2.0 * np.asarray(z) - 1.0)


def denormalize_act(z, v_x):
    if _any_var(z, v_x):
        return ad.mul(v_x, z)
    return v_x * np.asarray(z)
