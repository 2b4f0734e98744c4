"""
Building sizes and the area filter
==================================

Histogram of bounding-box areas across a synthetic root. Buildings left of the
dashed line are too small to crop and get dropped during preprocessing.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from damagelab.ingest import iter_scene_pairs, polygon_bbox
from damagelab.preprocess import MIN_AREA, bbox_area_histogram
from damagelab.synthdata import SynthParams, generate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
root = generate(SynthParams(n_scenes=4, buildings_per_scene=40, image_side=768, seed=2), out / "hist_root")

areas = [polygon_bbox(a.polygon).area for s in iter_scene_pairs(root) for a in s.annotations]
counts, edges = bbox_area_histogram(areas, bin_width=250, max_area=10_000)

fig, ax = plt.subplots(figsize=(7, 4))
ax.bar(edges[:-1], counts, width=250, align="edge", color="slategray")
ax.axvline(MIN_AREA, ls="--", color="k")
ax.set_xlabel("bounding-box area (px²)")
ax.set_ylabel("buildings")
fig.savefig(out / "bbox_histogram.png", dpi=100, bbox_inches="tight")

kept = sum(a >= MIN_AREA for a in areas)
print(f"{kept} of {len(areas)} buildings pass the {MIN_AREA} px² filter")
