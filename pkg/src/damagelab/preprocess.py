"""Building crops, size/label filtering, class-balanced splitting and manifests."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DuplicateUid, InsufficientClass, InvalidBBox, InvalidPolygon, InvalidRatio, IoFailure
from .ingest import (
    BBox,
    BuildingAnnotation,
    DamageClass,
    DisasterType,
    ScenePair,
    polygon_bbox,
    read_rgb,
)

log = logging.getLogger(__name__)

MIN_AREA = 2000
CROP_SIDE = 224
SPLIT_RATIO = 0.8
MANIFEST_NAME = "manifest.jsonl"
MANIFEST_META_NAME = "manifest_meta.json"


@dataclass(frozen=True)
class BuildingRecord:
    crop_pre: np.ndarray
    crop_post: np.ndarray
    label: DamageClass
    disaster_type: DisasterType
    bbox_area: int
    scene_id: str
    uid: str

    def __post_init__(self):
        if self.crop_pre.shape != self.crop_post.shape:
            raise ValueError(f"record {self.uid}: pre/post crop shapes differ")
        object.__setattr__(self, "label", DamageClass(self.label))
        object.__setattr__(self, "disaster_type", DisasterType(self.disaster_type))

    @property
    def crop_side(self) -> int:
        return self.crop_post.shape[0]


@dataclass(frozen=True)
class SplitManifest:
    """Train/val partition as uid references into a record collection."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    seed: int
    ratio: float = SPLIT_RATIO

    def checksum(self) -> str:
        payload = json.dumps(
            {"train": list(self.train), "val": list(self.val), "seed": self.seed, "ratio": self.ratio},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def resolve(self, records, side: str) -> list[BuildingRecord]:
        by_uid = records if isinstance(records, dict) else {r.uid: r for r in records}
        return [by_uid[u] for u in getattr(self, side)]


def filter_buildings(
    annotations: Iterable[BuildingAnnotation], min_area: int = MIN_AREA
) -> list[tuple[BuildingAnnotation, BBox]]:
    """Drop unclassified buildings and those whose box area is below ``min_area``."""
    kept = []
    for ann in annotations:
        if ann.is_unclassified:
            continue
        try:
            bbox = polygon_bbox(ann.polygon)
        except InvalidPolygon:
            continue
        if bbox.area >= min_area:
            kept.append((ann, bbox))
    return kept


def crop_building(image: np.ndarray, bbox: BBox, pad: int = 0, out_side: int = CROP_SIDE) -> np.ndarray:
    """Cut ``bbox`` (grown by ``pad``) out of ``image`` and resample it bilinearly to a square."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    h, w = image.shape[:2]
    x0 = max(bbox.x_min - pad, 0)
    y0 = max(bbox.y_min - pad, 0)
    x1 = min(bbox.x_max + pad, w)
    y1 = min(bbox.y_max + pad, h)
    if x1 <= x0 or y1 <= y0:
        raise InvalidBBox(f"{bbox} lies outside the {w}x{h} image")
    region = np.ascontiguousarray(image[y0:y1, x0:x1, :3])
    if region.shape[:2] == (out_side, out_side):
        return region.copy()
    resized = Image.fromarray(region).resize((out_side, out_side), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.uint8)


def record_uid(scene_id: str, building_uid: str) -> str:
    return f"{scene_id}__{building_uid}"


def scene_records(
    scene: ScenePair, min_area: int = MIN_AREA, crop_side: int = CROP_SIDE, pad: int = 0
) -> list[BuildingRecord]:
    records = []
    for ann, bbox in filter_buildings(scene.annotations, min_area):
        try:
            pre = crop_building(scene.pre_image, bbox, pad, crop_side)
            post = crop_building(scene.post_image, bbox, pad, crop_side)
        except InvalidBBox as exc:
            log.warning("scene %s building %s: %s", scene.scene_id, ann.uid, exc)
            continue
        records.append(
            BuildingRecord(
                crop_pre=pre,
                crop_post=post,
                label=ann.damage_class,
                disaster_type=scene.disaster_type,
                bbox_area=bbox.area,
                scene_id=scene.scene_id,
                uid=record_uid(scene.scene_id, ann.uid),
            )
        )
    return records


def build_records(scenes: Iterable[ScenePair], **kwargs) -> list[BuildingRecord]:
    records = []
    for scene in scenes:
        records.extend(scene_records(scene, **kwargs))
    return records


def class_counts(records: Iterable[BuildingRecord]) -> dict[DamageClass, int]:
    counts = {c: 0 for c in DamageClass}
    for r in records:
        counts[r.label] += 1
    return counts


def balanced_split(
    records: Sequence[BuildingRecord],
    ratio: float = SPLIT_RATIO,
    seed: int = 0,
    max_per_class: int | None = None,
) -> SplitManifest:
    """Downsample every class to the minority count, then split each class by ``ratio``.

    ``max_per_class`` lowers the per-class count further, for fixed-size experiments.

    Records are sorted by uid before sampling, so the result depends only on
    the record set, ``ratio`` and ``seed``.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"ratio must lie strictly between 0 and 1, got {ratio}")
    by_class: dict[DamageClass, list[str]] = defaultdict(list)
    for r in records:
        by_class[r.label].append(r.uid)
    for c in DamageClass:
        if len(by_class[c]) < 2:
            raise InsufficientClass(f"class {c.label} has {len(by_class[c])} records, need at least 2")
    m = min(len(v) for v in by_class.values())
    if max_per_class is not None:
        m = min(m, max_per_class)
    # tolerance guards products like 0.8 * 45 landing a hair under an integer
    n_train = math.floor(ratio * m + 1e-9)
    if n_train == 0 or n_train == m:
        raise InsufficientClass(f"ratio {ratio} leaves one side empty with {m} records per class")

    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in DamageClass:
        uids = sorted(by_class[c])
        if len(set(uids)) != len(uids):
            raise DuplicateUid(f"duplicate uid among class {c.label} records")
        picked = [uids[i] for i in rng.permutation(len(uids))[:m]]
        train.extend(picked[:n_train])
        val.extend(picked[n_train:])
    return SplitManifest(tuple(train), tuple(val), seed=seed, ratio=ratio)


def _save_png(path: Path, pixels: np.ndarray) -> None:
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_manifest(manifest: SplitManifest, records: Sequence[BuildingRecord], out_dir) -> Path:
    """Persist the crops referenced by ``manifest`` plus one JSON line per record."""
    by_uid: dict[str, BuildingRecord] = {}
    for r in records:
        if r.uid in by_uid:
            raise DuplicateUid(f"uid {r.uid!r} appears twice")
        by_uid[r.uid] = r
    out_dir = Path(out_dir)
    try:
        (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    lines = []
    for split in ("train", "val"):
        for uid in getattr(manifest, split):
            r = by_uid[uid]
            pre_rel = f"crops/{uid}_pre.png"
            post_rel = f"crops/{uid}_post.png"
            _save_png(out_dir / pre_rel, r.crop_pre)
            _save_png(out_dir / post_rel, r.crop_post)
            lines.append(json.dumps({
                "uid": uid,
                "scene_id": r.scene_id,
                "label": int(r.label),
                "disaster_type": r.disaster_type.value,
                "bbox_area": int(r.bbox_area),
                "split": split,
                "pre_path": pre_rel,
                "post_path": post_rel,
            }, sort_keys=True))
    path = out_dir / MANIFEST_NAME
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        (out_dir / MANIFEST_META_NAME).write_text(
            json.dumps({"seed": manifest.seed, "ratio": manifest.ratio}, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {out_dir}: {exc}") from exc
    return path


def read_manifest(manifest_dir) -> tuple[SplitManifest, dict[str, BuildingRecord]]:
    manifest_dir = Path(manifest_dir)
    path = manifest_dir / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    meta_path = manifest_dir / MANIFEST_META_NAME
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"seed": 0, "ratio": SPLIT_RATIO}

    records: dict[str, BuildingRecord] = {}
    sides: dict[str, list[str]] = {"train": [], "val": []}
    for line in text.splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row["uid"] in records:
            raise DuplicateUid(f"uid {row['uid']!r} appears twice in {path}")
        try:
            pre = read_rgb(manifest_dir / row["pre_path"])
            post = read_rgb(manifest_dir / row["post_path"])
        except OSError as exc:
            raise IoFailure(f"cannot read crops for {row['uid']}: {exc}") from exc
        records[row["uid"]] = BuildingRecord(
            crop_pre=pre,
            crop_post=post,
            label=DamageClass(row["label"]),
            disaster_type=DisasterType(row["disaster_type"]),
            bbox_area=int(row["bbox_area"]),
            scene_id=row["scene_id"],
            uid=row["uid"],
        )
        sides[row["split"]].append(row["uid"])
    manifest = SplitManifest(tuple(sides["train"]), tuple(sides["val"]), seed=meta["seed"], ratio=meta["ratio"])
    return manifest, records


def bbox_area_histogram(areas: Sequence[int], bin_width: int = 250, max_area: int = 8000):
    """Counts of bounding-box areas in fixed-width bins, outliers above ``max_area`` excluded.

    Returns ``(counts, edges)`` as from :func:`numpy.histogram`.
    """
    areas = np.asarray(areas, dtype=np.int64)
    areas = areas[areas <= max_area]
    edges = np.arange(0, max_area + bin_width, bin_width)
    return np.histogram(areas, bins=edges)
