"""
Anatomy of the block
====================

Span context frames, interact, extract, project, add back. The projection
starts at zero so a fresh block is an exact identity.
"""
# %%
import numpy as np

from atm import ATM, AtmConfig, ContextSpec, MulParams, estimate_flops, span_and_interact
from atm.block import flops_breakdown

rng = np.random.default_rng(0)
x = rng.random((8, 16, 14, 14))  # T x C x H x W

# %%
# The composite signal has one slot per context frame
for z in (1, 2, 4, 6):
    for op in ("-", "*"):
        y = span_and_interact(x, ContextSpec(z), op, MulParams(3))
        print(f"Z={z} op={op} ->", y.shape)

# %%
block = ATM(AtmConfig(ops=("-",), context=4, mul=3, width=8), 16, rng=rng)
print("identity at init:", np.array_equal(block(x).data, x))

# %%
# Cost grows linearly with the number of context frames
for z in (1, 2, 4, 6):
    cfg = AtmConfig(ops=("-",), context=z, width=8)
    print(f"Z={z}", flops_breakdown(cfg, x.shape), "total", estimate_flops(cfg, x.shape))
