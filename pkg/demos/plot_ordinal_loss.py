"""
Ordinal loss and class distance
===============================

With confident threshold outputs, the ordinal loss grows in steps of ln(1/eps)
per class of distance. Cross-entropy on the same confident predictions costs
the same for every wrong class.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from damagelab.losses import cross_entropy, ordinal_ce, ordinal_encode

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)
eps = 1e-6

ordinal = np.zeros((4, 4))
flat = np.zeros((4, 4))
for c in range(4):
    for c_hat in range(4):
        s = np.where(ordinal_encode(c_hat) == 1, 1 - eps, eps)
        ordinal[c, c_hat] = ordinal_ce(s, c, eps=eps)
        p = np.full(4, eps)
        p[c_hat] = 1 - 3 * eps
        flat[c, c_hat] = cross_entropy(p, c)

fig, axes = plt.subplots(1, 2, figsize=(9, 4))
for ax, grid, title in zip(axes, (ordinal, flat), ("ordinal", "cross-entropy")):
    im = ax.imshow(grid, cmap="magma")
    ax.set_title(title)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    fig.colorbar(im, ax=ax, shrink=0.8)
fig.savefig(out / "ordinal_vs_ce.png", dpi=100, bbox_inches="tight")

print("ordinal loss / ln(1/eps):")
print(np.round(ordinal / np.log(1 / eps), 3))
