"""Bit-sharing decomposition of a high-bit code into a low-bit base plus offsets.

For a ladder ``b_1 < ... < b_K`` with ``b_j = gamma_j * b_{j-1}``::

    z_{b_K} = z_{b_1} + r_{b_2} + ... + r_{b_K},
    r_{b_j} = D(z - z_{b_{j-1}}, s_{b_j})

The offsets are built from the running partial sum, so every prefix sum should
coincide with the direct discretization at that rung; :func:`prefix_sums` makes
that checkable.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .quantizer import BitLadder, discretize

__all__ = ["BitDecomposition", "decompose", "verify_grid_subset", "grid",
           "quant_error_series", "ErrorSeries"]


@dataclass(frozen=True)
class BitDecomposition:
    base: object            # ndarray or Var, the b_1 code
    offsets: tuple           # r_{b_2} .. r_{b_K}
    ladder: BitLadder

    def prefix_sums(self) -> list:
        """``[z_{b_1}, z_{b_2}, ..., z_{b_K}]`` as running sums of the offsets."""
        out = [self.base]
        for r in self.offsets:
            out.append(ad.add(out[-1], r) if isinstance(r, Var) else out[-1] + r)
        return out

    def reconstruct(self, upto: int | None = None):
        """Partial sum through rung ``upto`` (1-based; default: all rungs)."""
        sums = self.prefix_sums()
        return sums[-1 if upto is None else upto - 1]


def decompose(z, ladder: BitLadder) -> BitDecomposition:
    """Split ``z`` (normalized to ``[0, 1]``) into base code and re-assignment offsets.

    ``z`` may be a ``Var``; the discretizations then carry straight-through
    gradients, which is what the gated forward pass needs.
    """
    if not isinstance(ladder, BitLadder):
        ladder = BitLadder(tuple(ladder))
    steps = ladder.step_sizes
    base = discretize(z, steps[0])
    offsets = []
    partial = base
    for s in steps[1:]:
        if isinstance(z, Var):
            # residual is a constant w.r.t. z: the STE path to z runs through the base only
            resid = ad.constant(z.value - partial.value)
            r = discretize(resid, s, kind="residual")
            partial = ad.add(partial, r)
        else:
            r = discretize(z - partial, s, kind="residual")
            partial = partial + r
        offsets.append(r)
    return BitDecomposition(base, tuple(offsets), ladder)


def grid(bits: int) -> list[Fraction]:
    """Exact code values ``{0, 1/n, ..., 1}`` with ``n = 2^bits - 1``."""
    n = 2 ** bits - 1
    return [Fraction(k, n) for k in range(n + 1)]


def verify_grid_subset(ladder: BitLadder, atol: float = 1e-12) -> bool:
    """True iff every code of rung ``j`` lies on the grid of rung ``j + 1``."""
    for lo, hi in zip(ladder.bits, ladder.bits[1:]):
        n_hi = 2 ** hi - 1
        codes = np.arange(2 ** lo) / (2 ** lo - 1)
        scaled = codes * n_hi
        if np.any(np.abs(scaled - np.round(scaled)) > atol * n_hi):
            return False
        if n_hi % (2 ** lo - 1):
            return False
    return True


@dataclass(frozen=True)
class ErrorSeries:
    bits: tuple[int, ...]
    errors: np.ndarray    # eps_K for K = 1..len(bits)
    bounds: np.ndarray    # C / (2^{b_K} - 1) for K = 1..len(bits) - 1
    C: float

    @property
    def changes(self) -> np.ndarray:
        return np.abs(np.diff(self.errors))


def quant_error_series(z, ladder: BitLadder) -> ErrorSeries:
    """Normalized l1 error ``||z - z_{b_K}||_1 / ||z||_1`` for every prefix of the ladder."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    norm = np.abs(z).sum()
    if norm == 0:
        raise ValueError("quant_error_series: z is all zeros, normalized error undefined")
    sums = decompose(z, ladder).prefix_sums()
    errors = np.array([np.abs(z - zk).sum() / norm for zk in sums])
    C = z.size / norm
    bounds = np.array([C / (2 ** b - 1) for b in ladder.bits[:-1]])
    return ErrorSeries(ladder.bits, errors, bounds, C)
