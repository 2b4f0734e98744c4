"""Reading xBD-style scene pairs: label files, polygons and imagery.

Layout on disk::

    <root>/images/<scene_id>_pre_disaster.png
    <root>/images/<scene_id>_post_disaster.png
    <root>/labels/<scene_id>_post_disaster.json

Polygons come from the post-disaster label file, since that is where xBD
stores the damage subtypes.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import EmptyDataset, InvalidPolygon, MalformedLabelFile, UnknownDisasterType

log = logging.getLogger(__name__)

DEFAULT_IMAGE_SIDE = 1024
UNCLASSIFIED = "unclassified"


class DamageClass(enum.IntEnum):
    """Joint Damage Scale level, ordered from intact to destroyed."""

    NO_DAMAGE = 0
    MINOR_DAMAGE = 1
    MAJOR_DAMAGE = 2
    DESTROYED = 3

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "DamageClass":
        try:
            return _LABEL_TO_CLASS[label]
        except KeyError:
            raise ValueError(f"not a damage class label: {label!r}") from None

    def __str__(self) -> str:
        return self.label


_CLASS_LABELS = {
    DamageClass.NO_DAMAGE: "no-damage",
    DamageClass.MINOR_DAMAGE: "minor-damage",
    DamageClass.MAJOR_DAMAGE: "major-damage",
    DamageClass.DESTROYED: "destroyed",
}
_LABEL_TO_CLASS = {v: k for k, v in _CLASS_LABELS.items()}
NUM_CLASSES = len(DamageClass)


class DisasterType(str, enum.Enum):
    """The six xBD disaster categories.

    Declaration order is alphabetical and defines the one-hot layout.
    """

    EARTHQUAKE = "earthquake"
    FIRE = "fire"
    FLOODING = "flooding"
    TSUNAMI = "tsunami"
    VOLCANO = "volcano"
    WIND = "wind"

    @classmethod
    def parse(cls, tag: str) -> "DisasterType":
        try:
            return cls(tag)
        except ValueError:
            raise UnknownDisasterType(f"unknown disaster type {tag!r}") from None

    @property
    def index(self) -> int:
        return list(DisasterType).index(self)

    def one_hot(self) -> np.ndarray:
        vec = np.zeros(len(DisasterType), dtype=np.float32)
        vec[self.index] = 1.0
        return vec


NUM_DISASTER_TYPES = len(DisasterType)


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise InvalidPolygon(f"degenerate bounding box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class BuildingAnnotation:
    polygon: tuple[tuple[float, float], ...]
    raw_label: str
    uid: str

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise InvalidPolygon(f"building {self.uid!r} has {len(self.polygon)} vertices")

    @property
    def is_unclassified(self) -> bool:
        return self.raw_label == UNCLASSIFIED

    @property
    def damage_class(self) -> DamageClass:
        return DamageClass.from_label(self.raw_label)


@dataclass
class ScenePair:
    pre_image: np.ndarray
    post_image: np.ndarray
    annotations: list[BuildingAnnotation]
    disaster_type: DisasterType
    scene_id: str

    def __post_init__(self):
        if self.pre_image.shape != self.post_image.shape:
            raise ValueError(
                f"scene {self.scene_id}: pre {self.pre_image.shape} != post {self.post_image.shape}"
            )


@dataclass(frozen=True)
class SkippedScene:
    scene_id: str
    missing: tuple[str, ...]


@dataclass
class SceneFiles:
    scene_id: str
    pre_path: Path
    post_path: Path
    label_path: Path


def polygon_bbox(polygon) -> BBox:
    """Tight integer box around ``polygon``: floor of the minima, ceil of the maxima."""
    if len(polygon) < 3:
        raise InvalidPolygon(f"polygon has {len(polygon)} vertices, need at least 3")
    pts = np.asarray(polygon, dtype=np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if not np.all(hi > lo):
        raise InvalidPolygon("polygon has zero-area bounds")
    return BBox(
        int(math.floor(lo[0])), int(math.floor(lo[1])),
        int(math.ceil(hi[0])), int(math.ceil(hi[1])),
    )


_POLYGON_RE = re.compile(r"^\s*POLYGON\s*\(\s*\((?P<ring>[^()]*)\)", re.IGNORECASE)


def parse_wkt_polygon(wkt: str) -> tuple[tuple[float, float], ...]:
    """Exterior ring of a WKT ``POLYGON`` as vertex tuples, closing vertex dropped.

    Interior rings (holes) are ignored; only the bounding box is used downstream.
    """
    match = _POLYGON_RE.match(wkt)
    if match is None:
        raise MalformedLabelFile(f"not a WKT polygon: {wkt[:60]!r}")
    verts = []
    for pair in match.group("ring").split(","):
        parts = pair.split()
        if len(parts) < 2:
            raise MalformedLabelFile(f"bad WKT coordinate {pair!r}")
        try:
            verts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise MalformedLabelFile(f"bad WKT coordinate {pair!r}") from None
    if len(verts) > 1 and verts[0] == verts[-1]:
        verts.pop()
    return tuple(verts)


def _normalize_label(subtype: str) -> str:
    return UNCLASSIFIED if subtype == "un-classified" else subtype


def parse_label_file(content: bytes | str):
    """Parse one label file.

    Returns ``(annotations, disaster_type, scene_id)``. Every feature whose
    ``feature_type`` is ``"building"`` yields one annotation, whatever its label.
    """
    try:
        doc = json.loads(content)
        features = doc["features"]["xy"]
        meta = doc["metadata"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedLabelFile(f"unreadable label file: {exc}") from None
    if not isinstance(features, list) or not isinstance(meta, dict):
        raise MalformedLabelFile("features.xy must be a list and metadata an object")
    if "disaster_type" not in meta:
        raise MalformedLabelFile("metadata.disaster_type missing")
    disaster_type = DisasterType.parse(meta["disaster_type"])

    img_name = meta.get("img_name", "")
    scene_id = scene_id_from_filename(img_name) if img_name else ""

    annotations = []
    for i, feat in enumerate(features):
        try:
            props = feat["properties"]
            if props.get("feature_type") != "building":
                continue
            wkt = feat["wkt"]
        except (KeyError, TypeError, AttributeError):
            raise MalformedLabelFile(f"feature {i} lacks wkt/properties") from None
        subtype = props.get("subtype")
        if subtype is None:
            raise MalformedLabelFile(f"building feature {i} has no subtype")
        uid = str(props.get("uid", i))
        annotations.append(
            BuildingAnnotation(parse_wkt_polygon(wkt), _normalize_label(subtype), uid)
        )
    return annotations, disaster_type, scene_id


_SCENE_SUFFIX = re.compile(r"_(pre|post)_disaster(\.[A-Za-z0-9]+)?$")


def scene_id_from_filename(name: str) -> str:
    return _SCENE_SUFFIX.sub("", Path(name).name)


def scan_dataset(root) -> tuple[list[SceneFiles], list[SkippedScene]]:
    """Join images and labels by scene id without reading any pixels."""
    root = Path(root)
    found: dict[str, dict[str, Path]] = {}
    for path in sorted((root / "images").glob("*_disaster.png")):
        m = re.search(r"_(pre|post)_disaster\.png$", path.name)
        if m:
            found.setdefault(scene_id_from_filename(path.name), {})[m.group(1)] = path
    for path in sorted((root / "labels").glob("*_post_disaster.json")):
        found.setdefault(scene_id_from_filename(path.name), {})["label"] = path

    complete, skipped = [], []
    for scene_id in sorted(found):
        parts = found[scene_id]
        missing = tuple(k for k in ("pre", "post", "label") if k not in parts)
        if missing:
            skipped.append(SkippedScene(scene_id, missing))
        else:
            complete.append(SceneFiles(scene_id, parts["pre"], parts["post"], parts["label"]))
    return complete, skipped


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def load_scene(files: SceneFiles) -> ScenePair:
    annotations, disaster_type, _ = parse_label_file(files.label_path.read_bytes())
    return ScenePair(
        pre_image=read_rgb(files.pre_path),
        post_image=read_rgb(files.post_path),
        annotations=annotations,
        disaster_type=disaster_type,
        scene_id=files.scene_id,
    )


def iter_scene_pairs(root, skipped: list | None = None) -> Iterator[ScenePair]:
    """Yield complete scenes one at a time; incomplete ones go to ``skipped``."""
    complete, missing = scan_dataset(root)
    for s in missing:
        log.warning("skipping scene %s: missing %s", s.scene_id, ", ".join(s.missing))
    if skipped is not None:
        skipped.extend(missing)
    if not complete:
        raise EmptyDataset(f"no complete scene under {root}")
    for files in complete:
        yield load_scene(files)


def enumerate_scene_pairs(root, skipped: list | None = None) -> list[ScenePair]:
    return list(iter_scene_pairs(root, skipped))
