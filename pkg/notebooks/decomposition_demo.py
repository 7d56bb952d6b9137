"""Residual bit decomposition of one small vector on the ladder 2 -> 4 -> 8 bits."""
import numpy as np

from sbs.decomposition import decompose, quant_error_series, verify_grid_subset
from sbs.quantizer import BitLadder, discretize

ladder = BitLadder((2, 4, 8))
z = np.random.default_rng(0).uniform(0, 1, 6)
d = decompose(z, ladder)

np.set_printoptions(precision=4, suppress=True)
print("z          ", z)
print("base (2b)  ", d.base)
for b, r in zip(ladder.bits[1:], d.offsets):
    print(f"offset ->{b}b", r)
for b, zk in zip(ladder.bits, d.prefix_sums()):
    direct = discretize(z, 1 / (2 ** b - 1))
    print(f"prefix {b}b   max |prefix - direct| = {np.abs(zk - direct).max():.1e}")

print("nested grids:", verify_grid_subset(ladder))
s = quant_error_series(z, ladder)
print("errors per rung:", s.errors)
print("changes <= bounds:", bool(np.all(s.changes <= s.bounds)))
