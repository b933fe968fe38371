"""Scene files, label vocabularies, tokenization and dataset splits.

Scene JSON layout::

    {"scan_id": str, "room_type": str,
     "objects": [{"id": int, "label": str,
                  "points": [[x, y, z], ...],          # optional
                  "centroid": [x, y, z],               # optional
                  "aabb": {"min": [..], "max": [..]},  # optional
                  "region_affordance": str, "object_affordance": str,
                  "common_rooms": [str, ...]}]}

Every object needs ``points`` or ``centroid``; missing centroid/aabb are
derived from the points.  An object with only a centroid gets a zero-size box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyCorpus,
    EmptyScene,
    MissingGeometry,
    ParseError,
    TooManyObjects,
    UnknownClass,
    UnknownLabel,
)
from .geometry import Aabb, Vec3, object_centroid, room_centroid_and_distances

PAD_LABEL = "<pad>"
IGNORE_INDEX = -1
STRUCTURAL_LABELS = frozenset({"wall", "floor", "ceiling"})


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    label: str
    centroid: Vec3
    aabb: Aabb
    region_affordance: Optional[str] = None
    object_affordance: Optional[str] = None
    common_rooms: tuple[str, ...] = ()
    attributes: tuple[str, ...] = ()
    segment_ids: tuple[int, ...] = ()
    points: Optional[np.ndarray] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class SceneRecord:
    scan_id: str
    room_type: Optional[str]
    objects: tuple[SceneObject, ...]

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.objects]


def _vec(value, what: str) -> Vec3:
    try:
        v = Vec3.of(value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad {what}: {value!r}") from exc
    return v


def _parse_object(raw: dict) -> SceneObject:
    if not isinstance(raw, dict):
        raise ParseError(f"object entry must be a mapping, got {type(raw).__name__}")
    try:
        oid = raw["id"]
        label = raw["label"]
    except KeyError as exc:
        raise ParseError(f"object missing field {exc}") from exc
    if not isinstance(oid, int) or isinstance(oid, bool):
        raise ParseError(f"object id must be an integer, got {oid!r}")
    if not isinstance(label, str) or not label:
        raise ParseError(f"object {oid}: label must be a non-empty string")

    points = None
    if raw.get("points") is not None:
        try:
            points = np.asarray(raw["points"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"object {oid}: malformed points") from exc
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ParseError(f"object {oid}: points must be a non-empty list of [x, y, z]")
        if not np.all(np.isfinite(points)):
            raise ParseError(f"object {oid}: non-finite point coordinates")

    if raw.get("centroid") is not None:
        centroid = _vec(raw["centroid"], f"centroid of object {oid}")
    elif points is not None:
        centroid = object_centroid(points)
    else:
        raise MissingGeometry(f"object {oid} ({label}) has neither points nor centroid")

    if raw.get("aabb") is not None:
        box = raw["aabb"]
        try:
            aabb = Aabb(_vec(box["min"], "aabb min"), _vec(box["max"], "aabb max"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"object {oid}: malformed aabb") from exc
    elif points is not None:
        aabb = Aabb.from_points(points)
    else:
        aabb = Aabb.degenerate(centroid)

    return SceneObject(
        object_id=oid,
        label=label,
        centroid=centroid,
        aabb=aabb,
        region_affordance=raw.get("region_affordance"),
        object_affordance=raw.get("object_affordance"),
        common_rooms=tuple(raw.get("common_rooms") or ()),
        attributes=tuple(raw.get("attributes") or ()),
        segment_ids=tuple(raw.get("segment_ids") or ()),
        points=points,
    )


def scene_from_dict(data: dict) -> SceneRecord:
    if not isinstance(data, dict):
        raise ParseError("scene must be a JSON object")
    if "objects" not in data or not isinstance(data["objects"], list):
        raise ParseError("scene needs an 'objects' list")
    objects = tuple(_parse_object(o) for o in data["objects"])
    ids = [o.object_id for o in objects]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate object ids in scene")
    return SceneRecord(
        scan_id=str(data.get("scan_id", "")),
        room_type=data.get("room_type"),
        objects=objects,
    )


def load_scene(path) -> SceneRecord:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return scene_from_dict(data)


def scene_to_dict(scene: SceneRecord, include_points: bool = True) -> dict:
    objects = []
    for o in scene.objects:
        entry: dict = {"id": o.object_id, "label": o.label}
        if include_points and o.points is not None:
            entry["points"] = o.points.tolist()
        entry["centroid"] = o.centroid.to_list()
        entry["aabb"] = o.aabb.to_dict()
        entry["region_affordance"] = o.region_affordance
        entry["object_affordance"] = o.object_affordance
        entry["common_rooms"] = list(o.common_rooms)
        objects.append(entry)
    return {"scan_id": scene.scan_id, "room_type": scene.room_type, "objects": objects}


def save_scene(scene: SceneRecord, path, include_points: bool = True) -> None:
    Path(path).write_text(
        json.dumps(scene_to_dict(scene, include_points), indent=1) + "\n", encoding="utf-8"
    )


def load_scene_dir(directory) -> list[SceneRecord]:
    """Load every ``*.json`` scene in a directory, sorted by file name."""
    paths = sorted(p for p in Path(directory).glob("*.json") if p.name != "manifest.json")
    return [load_scene(p) for p in paths]


def filter_structural(scene: SceneRecord, excluded_labels: Iterable[str] = STRUCTURAL_LABELS) -> SceneRecord:
    excluded = set(excluded_labels)
    kept = tuple(o for o in scene.objects if o.label not in excluded)
    return replace(scene, objects=kept)


@dataclass(frozen=True)
class LabelVocab:
    """Sorted object labels plus a trailing PAD entry."""

    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def pad_index(self) -> int:
        return len(self.labels) - 1

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownLabel(f"label {label!r} not in vocabulary") from None

    def __contains__(self, label: str) -> bool:
        return label in self._index and label != PAD_LABEL


def build_vocab(scenes: Sequence[SceneRecord]) -> LabelVocab:
    if len(scenes) == 0:
        raise EmptyCorpus("cannot build a vocabulary from zero scenes")
    labels = sorted({o.label for s in scenes for o in s.objects})
    return LabelVocab(tuple(labels) + (PAD_LABEL,))


@dataclass(frozen=True)
class TokenizedScene:
    token_ids: np.ndarray  # (n_max,) int
    distances: np.ndarray  # (n_max,) float
    attention_mask: np.ndarray  # (n_max,) bool
    region_targets: np.ndarray  # (n_max,) int, IGNORE_INDEX on padding
    room_target: int
    n_objects: int


def _class_index(classes: Sequence[str], value: Optional[str], what: str) -> int:
    if value is None:
        return IGNORE_INDEX
    try:
        return list(classes).index(value)
    except ValueError:
        raise UnknownClass(f"{what} {value!r} not among known classes") from None


def tokenize_scene(
    scene: SceneRecord,
    vocab: LabelVocab,
    room_classes: Sequence[str],
    region_classes: Sequence[str],
    n_max: int,
    normalize_distances: bool = False,
) -> TokenizedScene:
    """Pad a scene to ``n_max`` object slots.

    Unannotated targets (``None``) become IGNORE_INDEX so unlabeled scenes can
    still be fed to inference.
    """
    n = len(scene.objects)
    if n == 0:
        raise EmptyScene(f"scene {scene.scan_id!r} has no objects")
    if n > n_max:
        raise TooManyObjects(f"scene {scene.scan_id!r} has {n} objects, limit is {n_max}")

    ids = np.full(n_max, vocab.pad_index, dtype=np.int64)
    dist = np.zeros(n_max, dtype=np.float64)
    mask = np.zeros(n_max, dtype=bool)
    targets = np.full(n_max, IGNORE_INDEX, dtype=np.int64)

    _, d = room_centroid_and_distances([o.centroid for o in scene.objects])
    d = np.asarray(d)
    if normalize_distances and d.max() > 0:
        d = d / d.max()
    for i, obj in enumerate(scene.objects):
        if obj.label == PAD_LABEL:
            raise UnknownLabel(f"object {obj.object_id} uses the reserved label {PAD_LABEL!r}")
        ids[i] = vocab.index(obj.label)
        targets[i] = _class_index(region_classes, obj.region_affordance, "region affordance")
    dist[:n] = d
    mask[:n] = True
    room = _class_index(room_classes, scene.room_type, "room type")
    return TokenizedScene(ids, dist, mask, targets, room, n)


def split_dataset(scenes: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then the first round(fraction * n) go to training."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    train = [scenes[i] for i in order[:n_train]]
    test = [scenes[i] for i in order[n_train:]]
    return train, test
