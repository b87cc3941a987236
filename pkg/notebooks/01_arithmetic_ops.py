"""
Four ways to compare two frames
===============================

A blob moves one pixel between two frames. Each pair-wise op turns the pair
into a map; this script prints a coarse view of each and writes them as PGMs.
"""
# %%
import numpy as np

from atm import MulParams, SynthClipSpec, gen_clip
from atm.synth import op_maps, visualize_ops

clip = gen_clip(SynthClipSpec(frames=2, velocity=1.0, radius=3.0, seed=1))
a, b = clip[0, 0], clip[1, 0]
print("frame range", a.min().round(3), a.max().round(3))

# %%
# Addition keeps appearance; subtraction and the log ratio light up the moving
# edges with opposite signs on the leading and trailing flank. The centre tap
# of the local product is the per-pixel correlation.
maps = op_maps(a, b, MulParams(3))
for name, m in maps.items():
    print(f"{name:4s} min {m.min():+.3f} max {m.max():+.3f}")

# %%
# Coarse ASCII rendering of the difference map around the blob
sub = maps["sub"]
r, c = np.unravel_index(a.argmax(), a.shape)
window = sub[r - 5:r + 6, c - 5:c + 6]
for row in window:
    print("".join("+" if v > 0.05 else "-" if v < -0.05 else "." for v in row))

# %%
# Identical frames carry no motion, so the difference map is flat
flat = visualize_ops(a, a, MulParams(3))["sub"]
print("sub map constant on identical frames:", bool((flat == flat.flat[0]).all()))

# %%
visualize_ops(a, b, MulParams(3), out_dir="viz_out")
print("wrote viz_out/{add,sub,mul,div}.pgm")
