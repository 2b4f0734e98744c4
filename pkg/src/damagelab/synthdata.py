"""Synthetic pre/post scene pairs with class-dependent damage.

Each scene is a textured background with rectangular roofs. The post image
copies the pre image, perturbs the background slightly, and corrupts each
building according to its damage class:

* no damage: untouched, so pre and post agree pixel for pixel inside the box
* minor: mild Gaussian speckle
* major: strong speckle plus a debris patch over part of the roof
* destroyed: the roof is replaced by rubble texture

Output follows the xBD directory layout read by :mod:`damagelab.ingest`, plus
``generator_log.json`` listing every box the generator placed.
"""
from __future__ import annotations

import json
import uuid
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InfeasiblePacking, IoFailure
from .ingest import DamageClass, DisasterType, UNCLASSIFIED, enumerate_scene_pairs, polygon_bbox

LOG_NAME = "generator_log.json"
PLACEMENT_TRIES = 200
BOX_GAP = 2

MILD_SPECKLE = 14.0
STRONG_SPECKLE = 35.0

# per-type tint added to damaged pixels when type_bias is on
TYPE_TINT = {
    DisasterType.EARTHQUAKE: (18, 10, 0),
    DisasterType.FIRE: (-35, -40, -40),
    DisasterType.FLOODING: (-20, 0, 30),
    DisasterType.TSUNAMI: (-10, 20, 25),
    DisasterType.VOLCANO: (30, -15, -25),
    DisasterType.WIND: (0, 0, 0),
}


@dataclass(frozen=True)
class SynthParams:
    n_scenes: int = 4
    buildings_per_scene: int = 20
    image_side: int = 1024
    class_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    noise_floor: float = 0.02
    seed: int = 0
    min_box: int = 32
    max_box: int = 96
    unclassified_rate: float = 0.0
    type_bias: bool = False

    def __post_init__(self):
        mix = tuple(float(v) for v in self.class_mix)
        object.__setattr__(self, "class_mix", mix)
        if len(mix) != 4 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must be 4 non-negative fractions summing to 1, got {mix}")
        if not 0 < self.min_box <= self.max_box < self.image_side:
            raise ValueError("need 0 < min_box <= max_box < image_side")
        if not 0.0 <= self.unclassified_rate < 1.0:
            raise ValueError("unclassified_rate must lie in [0, 1)")


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    grid = max(side // 64, 2)
    coarse = rng.uniform(60, 150, size=(grid, grid, 3)).astype(np.uint8)
    smooth = np.asarray(Image.fromarray(coarse).resize((side, side), Image.Resampling.BILINEAR), dtype=np.float64)
    return smooth + rng.normal(0.0, 6.0, size=(side, side, 3))


def _place_boxes(rng: np.random.Generator, p: SynthParams) -> list[tuple[int, int, int, int]]:
    taken = np.zeros((p.image_side, p.image_side), dtype=bool)
    boxes = []
    for _ in range(p.buildings_per_scene):
        for _ in range(PLACEMENT_TRIES):
            w, h = rng.integers(p.min_box, p.max_box + 1, size=2)
            x0 = int(rng.integers(0, p.image_side - w + 1))
            y0 = int(rng.integers(0, p.image_side - h + 1))
            x1, y1 = x0 + int(w), y0 + int(h)
            if not taken[max(y0 - BOX_GAP, 0):y1 + BOX_GAP, max(x0 - BOX_GAP, 0):x1 + BOX_GAP].any():
                taken[y0:y1, x0:x1] = True
                boxes.append((x0, y0, x1, y1))
                break
        else:
            raise InfeasiblePacking(
                f"could not place building {len(boxes) + 1} of {p.buildings_per_scene} "
                f"after {PLACEMENT_TRIES} tries"
            )
    return boxes


def _damage(rng: np.random.Generator, roof: np.ndarray, level: int, tint) -> np.ndarray:
    h, w, _ = roof.shape
    out = roof.copy()
    if level == 1:
        out += rng.normal(0.0, MILD_SPECKLE, size=roof.shape)
    elif level == 2:
        out += rng.normal(0.0, STRONG_SPECKLE, size=roof.shape)
        ph = max(int(h * rng.uniform(0.4, 0.7)), 1)
        pw = max(int(w * rng.uniform(0.4, 0.7)), 1)
        py = int(rng.integers(0, h - ph + 1))
        px = int(rng.integers(0, w - pw + 1))
        debris = np.array([110.0, 100.0, 90.0]) + rng.normal(0.0, 20.0, size=(ph, pw, 3))
        out[py:py + ph, px:px + pw] = debris
    elif level == 3:
        cells = rng.uniform(30, 230, size=((h + 3) // 4, (w + 3) // 4, 3))
        out = np.kron(cells, np.ones((4, 4, 1)))[:h, :w] + rng.normal(0.0, 12.0, size=roof.shape)
    if level > 0:
        out += np.asarray(tint, dtype=np.float64)
    return out


def _scene(p: SynthParams, index: int):
    rng = np.random.default_rng([p.seed, index])
    disaster = list(DisasterType)[int(rng.integers(len(DisasterType)))]
    scene_id = f"synth-{disaster.value}_{index:08d}"
    side = p.image_side

    pre = _background(rng, side)
    boxes = _place_boxes(rng, p)
    inside = np.zeros((side, side), dtype=bool)
    for x0, y0, x1, y1 in boxes:
        inside[y0:y1, x0:x1] = True
    post = pre + np.where(inside[..., None], 0.0, rng.normal(0.0, p.noise_floor * 255.0, size=pre.shape))

    tint = TYPE_TINT[disaster] if p.type_bias else (0, 0, 0)
    features, log = [], []
    for x0, y0, x1, y1 in boxes:
        roof_color = rng.uniform(70, 190, size=3)
        roof = roof_color + rng.normal(0.0, 3.0, size=(y1 - y0, x1 - x0, 3))
        roof = np.clip(np.round(roof), 0, 255)
        pre[y0:y1, x0:x1] = roof
        if rng.uniform() < p.unclassified_rate:
            label, level = "un-classified", 0
        else:
            level = int(rng.choice(4, p=p.class_mix))
            label = DamageClass(level).label
        post[y0:y1, x0:x1] = _damage(rng, roof, level, tint)
        uid = str(uuid.UUID(bytes=rng.bytes(16)))
        wkt = f"POLYGON (({x0} {y0}, {x1} {y0}, {x1} {y1}, {x0} {y1}, {x0} {y0}))"
        features.append({
            "wkt": wkt,
            "properties": {"feature_type": "building", "subtype": label, "uid": uid},
        })
        log.append({
            "scene_id": scene_id,
            "uid": uid,
            "label": UNCLASSIFIED if label == "un-classified" else label,
            "bbox": [x0, y0, x1, y1],
            "area": (x1 - x0) * (y1 - y0),
            "disaster_type": disaster.value,
        })

    doc = {
        "features": {"lng_lat": [], "xy": features},
        "metadata": {
            "disaster": f"synth-{disaster.value}",
            "disaster_type": disaster.value,
            "img_name": f"{scene_id}_post_disaster.png",
            "width": side,
            "height": side,
        },
    }
    to_u8 = lambda a: np.clip(np.round(a), 0, 255).astype(np.uint8)
    return scene_id, to_u8(pre), to_u8(post), doc, log


def generate(params: SynthParams, out_dir) -> Path:
    """Write ``params.n_scenes`` scenes under ``out_dir``; returns the dataset root."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        full_log = []
        for i in range(params.n_scenes):
            scene_id, pre, post, doc, log = _scene(params, i)
            Image.fromarray(pre).save(root / "images" / f"{scene_id}_pre_disaster.png", format="PNG")
            Image.fromarray(post).save(root / "images" / f"{scene_id}_post_disaster.png", format="PNG")
            (root / "labels" / f"{scene_id}_post_disaster.json").write_text(
                json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8"
            )
            full_log.extend(log)
        (root / LOG_NAME).write_text(
            json.dumps({"params": asdict(params), "buildings": full_log}, indent=1, sort_keys=True),
            encoding="utf-8",
        )
    except OSError as exc:
        raise IoFailure(f"cannot write synthetic dataset to {root}: {exc}") from exc
    return root


def read_generator_log(root) -> list[dict]:
    return json.loads((Path(root) / LOG_NAME).read_text())["buildings"]


def separability_report(root) -> dict[DamageClass, float]:
    """Mean absolute pre/post difference inside building boxes, per damage class.

    Computed from the stored images, not from generator internals.
    """
    diffs: dict[DamageClass, list[float]] = defaultdict(list)
    for scene in enumerate_scene_pairs(root):
        for ann in scene.annotations:
            if ann.is_unclassified:
                continue
            b = polygon_bbox(ann.polygon)
            pre = scene.pre_image[b.y_min:b.y_max, b.x_min:b.x_max].astype(np.int16)
            post = scene.post_image[b.y_min:b.y_max, b.x_min:b.x_max].astype(np.int16)
            diffs[ann.damage_class].append(float(np.abs(pre - post).mean()))
    return {c: float(np.mean(diffs[c])) if diffs[c] else float("nan") for c in DamageClass}
