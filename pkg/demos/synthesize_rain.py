"""
Rendering a rainy light field
=============================

A light field is a grid of sub-views of the same scene taken from slightly
shifted viewpoints.  Rain streaks sit at some depth in front of the camera,
so each streak shifts between views by its own disparity.  This script
builds a procedural scene, layers streaks and fog on top, and writes the
result to ``rainy_demo/``.
"""

import sys
from pathlib import Path

import numpy as np

from lfderain.lightfield import psnr, write_lfi
from lfderain.rain_synth import (Streak, SynthParams, procedural_lightfield, rasterize_streaks,
                                 synth_scene)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "rainy_demo")

# a 5x5 grid of 64x64 views; depth grows with distance from the camera
clean, depth = procedural_lightfield((5, 5), (64, 64), seed=0)
print("views:", clean.angular, "spatial:", clean.spatial)
print("depth range: %.2f .. %.2f" % (depth.data.min(), depth.data.max()))

# %%
# Streaks are drawn per view with a disparity offset, blurred along the
# fall direction, then composited with fog that thickens with depth.
params = SynthParams(streak_count=80, rng_seed=1)
scene = synth_scene(params, clean, depth)

centre = clean.angular[0] // 2, clean.angular[1] // 2
print("mean fog in the centre view: %.3f" % scene.fog.data[centre].mean())
print("fraction of pixels touched by rain: %.3f" % (scene.streaks.data[centre] > 1e-3).mean())
print("centre view PSNR of rainy vs clean: %.2f dB"
      % psnr(scene.rainy.data[centre], clean.data[centre]))

# %%
# One streak with a disparity of 1.5 px per angular step: its centroid
# moves by that amount between neighbouring views.
one = Streak(cy=32.0, cx=32.0, length=10.0, width=1.2, angle=0.0, opacity=0.8, disparity=1.5)
layer = rasterize_streaks(params, (5, 5), (64, 64), streaks=[one])
cols = np.arange(64)
for v in range(5):
    img = layer[2, v, 0]
    print("view (2,%d) streak column: %.2f" % (v, (img.sum(0) * cols).sum() / img.sum()))

# %%
# Sub-views are written as view_u_v.png, the layout read back by the CLI.
for name, lf in [("input", scene.rainy), ("gt", clean), ("fog", scene.fog)]:
    write_lfi(lf, out / name)
print("wrote", sorted(p.name for p in out.iterdir()), "under", out)
