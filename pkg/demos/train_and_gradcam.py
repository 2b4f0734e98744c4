"""
Train a small classifier and look at its evidence
=================================================

Synthetic scenes, balanced crops, a short training run on the tiny backbone,
and Grad-CAM overlays for a handful of validation buildings. Takes under a
minute on one CPU core.
"""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from damagelab.gradcam import cam_batch
from damagelab.ingest import iter_scene_pairs
from damagelab.model import ModelConfig, load_checkpoint
from damagelab.preprocess import SplitManifest, balanced_split, build_records
from damagelab.synthdata import SynthParams, generate
from damagelab.trainer import HyperParams, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
root = generate(SynthParams(n_scenes=6, buildings_per_scene=60, image_side=768, seed=4), out / "train_root")

records = build_records(iter_scene_pairs(root), crop_side=48)
split = balanced_split(records, 0.8, seed=0)
print(f"{len(split.train)} train / {len(split.val)} val crops, split {split.checksum()}")

config = ModelConfig("pre_post", "ordinal", crop_side=48)
report = train(config, HyperParams(epochs=10, seed=0), split, records, out_dir=out / "run")
print(f"best val accuracy {report.best_val_accuracy:.3f} at epoch {report.best_epoch}")

fig, ax = plt.subplots(figsize=(6, 3.5))
epochs = range(1, len(report.per_epoch) + 1)
ax.plot(epochs, [e.train_loss for e in report.per_epoch], label="train loss")
ax2 = ax.twinx()
ax2.plot(epochs, [e.val_accuracy for e in report.per_epoch], color="tab:red", label="val accuracy")
ax.set_xlabel("epoch")
fig.legend(loc="upper center")
fig.savefig(out / "training_curve.png", dpi=100, bbox_inches="tight")

# overlays for the first eight validation buildings
model = load_checkpoint(out / "run" / "best.ckpt")
few = SplitManifest((), split.val[:8], seed=split.seed)
paths = cam_batch(model, few, records, out / "cams", class_from="label")
print(f"wrote {len(paths)} images, contact sheet at {paths[-1]}")
