"""Synthetic scenes with known room types and region structure.

Each scene draws a room type, then 1-4 of that room's region affordances.
Every region becomes a spatial cluster of small box-shaped objects whose
labels come from the catalog.  Generation depends only on ``(seed, index)``.

Region placement modes:

``cluster``  Gaussian center (clipped to the room), rejection-sampled so
             cluster centers stay at least ``2 * region_spread`` apart.
``center``   cluster at the room origin.
``ring``     objects evenly spaced (random phase) on a circle of radius
             ``room_extent / 2`` around the origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidConfig
from .geometry import Aabb, Vec3
from .scene_io import SceneObject, SceneRecord

PLACEMENTS = ("cluster", "center", "ring")
POINTS_PER_OBJECT = 12
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthConfig:
    label_catalog: Mapping[str, Mapping[str, Sequence[str]]]
    objects_per_region: tuple[int, int] = (5, 12)
    regions_per_room: tuple[int, int] = (1, 4)
    region_spread: float = 0.4
    room_extent: float = 8.0
    object_size: tuple[float, float] = (0.1, 0.4)
    placement: Mapping[str, str] = field(default_factory=dict)
    seed: int = 0

    @property
    def room_types(self) -> list[str]:
        return sorted(self.label_catalog)

    @property
    def region_affordances(self) -> list[str]:
        return sorted({a for regions in self.label_catalog.values() for a in regions})

    @property
    def labels(self) -> list[str]:
        return sorted(
            {lab for regions in self.label_catalog.values() for labs in regions.values() for lab in labs}
        )

    @property
    def n_room_types(self) -> int:
        return len(self.label_catalog)

    @property
    def n_region_affordances(self) -> int:
        return len(self.region_affordances)

    def validate(self) -> None:
        if not self.label_catalog:
            raise InvalidConfig("label catalog is empty")
        for room, regions in self.label_catalog.items():
            if not regions:
                raise InvalidConfig(f"room type {room!r} has no region affordances")
            for aff, labels in regions.items():
                if len(labels) == 0:
                    raise InvalidConfig(f"{room!r}/{aff!r} has no labels")
        lo, hi = self.objects_per_region
        if not 1 <= lo <= hi:
            raise InvalidConfig("objects_per_region must satisfy 1 <= lo <= hi")
        lo, hi = self.regions_per_room
        if not 1 <= lo <= hi:
            raise InvalidConfig("regions_per_room must satisfy 1 <= lo <= hi")
        if self.region_spread <= 0 or self.room_extent <= 0:
            raise InvalidConfig("region_spread and room_extent must be positive")
        if not 0 < self.object_size[0] <= self.object_size[1]:
            raise InvalidConfig("object_size must be a positive (lo, hi) range")
        for aff, mode in self.placement.items():
            if mode not in PLACEMENTS:
                raise InvalidConfig(f"placement for {aff!r} must be one of {PLACEMENTS}")

    def is_bayes_separable(self) -> bool:
        """True when every label belongs to exactly one (room, affordance) pair."""
        owner: dict[str, tuple[str, str]] = {}
        for room, regions in self.label_catalog.items():
            for aff, labels in regions.items():
                for lab in labels:
                    if owner.setdefault(lab, (room, aff)) != (room, aff):
                        return False
        return True

    def to_dict(self) -> dict:
        return {
            "label_catalog": {r: {a: list(l) for a, l in regs.items()} for r, regs in self.label_catalog.items()},
            "objects_per_region": list(self.objects_per_region),
            "regions_per_room": list(self.regions_per_room),
            "region_spread": self.region_spread,
            "room_extent": self.room_extent,
            "object_size": list(self.object_size),
            "placement": dict(self.placement),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        try:
            cfg = cls(
                label_catalog={r: {a: tuple(l) for a, l in regs.items()} for r, regs in data["label_catalog"].items()},
                objects_per_region=tuple(data.get("objects_per_region", (5, 12))),
                regions_per_room=tuple(data.get("regions_per_room", (1, 4))),
                region_spread=float(data.get("region_spread", 0.4)),
                room_extent=float(data.get("room_extent", 8.0)),
                object_size=tuple(data.get("object_size", (0.1, 0.4))),
                placement=dict(data.get("placement", {})),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidConfig(f"malformed synth config: {exc!r}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SynthConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


_DEFAULT_ROOMS = ("bedroom", "bathroom", "livingroom", "kitchen", "office", "storage")
_DEFAULT_AFFORDANCES = (
    "for sleeping",
    "for washing",
    "to rest",
    "kitchenette",
    "to work/study",
    "to store",
    "for decoration",
    "for lighting",
    "for dining",
    "for toileting",
)
_DEFAULT_LABELS = (
    "bed", "pillow", "nightstand", "blanket", "wardrobe", "sink", "bathtub", "toilet",
    "towel", "mirror", "sofa", "coffee table", "tv", "armchair", "rug", "stove", "oven",
    "kettle", "refrigerator", "microwave", "desk", "monitor", "office chair", "printer",
    "laptop", "shelf", "box", "boxes", "cabinet", "basket", "painting", "plant", "vase",
    "lamp", "table lamp", "light", "dining table", "chair", "plate", "toilet paper",
)
# (room index, affordance indices) for the default catalog; 18 pairs share 40 labels.
_DEFAULT_LAYOUT = (
    (0, (0, 5, 7)),
    (1, (1, 9, 6)),
    (2, (2, 6, 7, 8)),
    (3, (3, 8, 5)),
    (4, (4, 5, 7)),
    (5, (5, 6)),
)


def default_config(seed: int = 0) -> SynthConfig:
    """6 room types, 10 region affordances, 40 labels; Bayes-separable."""
    pairs = [(r, a) for r, affs in _DEFAULT_LAYOUT for a in affs]
    catalog: dict[str, dict[str, list[str]]] = {}
    for i, label in enumerate(_DEFAULT_LABELS):
        r, a = pairs[i % len(pairs)]
        catalog.setdefault(_DEFAULT_ROOMS[r], {}).setdefault(_DEFAULT_AFFORDANCES[a], []).append(label)
    cfg = SynthConfig(
        label_catalog={r: {a: tuple(l) for a, l in regs.items()} for r, regs in catalog.items()},
        seed=seed,
    )
    cfg.validate()
    return cfg


def ambiguity_config(seed: int = 0) -> SynthConfig:
    """Catalog where "chair" serves two affordances in the same rooms.

    Dining chairs sit in a cluster at the room center, resting chairs on a
    ring near the walls, so only distance to the room centroid tells them apart.
    Every scene holds both regions; otherwise the other labels in a
    single-region scene would give the chairs away.
    """
    catalog = {
        "restaurant": {
            "for dining": ("chair", "chair", "dining table"),
            "to rest": ("chair", "chair", "sofa"),
        },
        "livingroom": {
            "for dining": ("chair", "chair", "plate"),
            "to rest": ("chair", "chair", "cushion"),
        },
    }
    cfg = SynthConfig(
        label_catalog=catalog,
        objects_per_region=(5, 10),
        regions_per_room=(2, 2),
        room_extent=8.0,
        placement={"for dining": "center", "to rest": "ring"},
        seed=seed,
    )
    cfg.validate()
    return cfg


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _cluster_centers(cfg: SynthConfig, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    half = cfg.room_extent / 2
    min_gap = 2 * cfg.region_spread
    centers: list[np.ndarray] = []
    for _ in range(k):
        for _ in range(MAX_PLACEMENT_TRIES):
            c = np.clip(rng.normal(0.0, half / 2, size=2), -half, half)
            if all(np.linalg.norm(c - o) >= min_gap for o in centers):
                break
        else:
            raise InvalidConfig("could not place separated clusters; enlarge room_extent")
        centers.append(c)
    return centers


def generate_scene(cfg: SynthConfig, index: int) -> SceneRecord:
    cfg.validate()
    rng = _rng(cfg.seed, index)
    rooms = cfg.room_types
    room = rooms[rng.integers(len(rooms))]
    affs = sorted(cfg.label_catalog[room])
    lo, hi = cfg.regions_per_room
    k = int(rng.integers(min(lo, len(affs)), min(hi, len(affs)) + 1))
    chosen = [affs[i] for i in sorted(rng.choice(len(affs), size=k, replace=False))]
    centers = _cluster_centers(cfg, k, rng)

    objects = []
    oid = 0
    for aff, center in zip(chosen, centers):
        labels = cfg.label_catalog[room][aff]
        n = int(rng.integers(cfg.objects_per_region[0], cfg.objects_per_region[1] + 1))
        mode = cfg.placement.get(aff, "cluster")
        if mode == "ring":
            phase = rng.uniform(0, 2 * np.pi)
            angles = phase + 2 * np.pi * np.arange(n) / n
            xy = (cfg.room_extent / 2) * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            xy = xy + rng.normal(0.0, cfg.region_spread / 4, size=(n, 2))
        else:
            base = np.zeros(2) if mode == "center" else center
            xy = base + rng.normal(0.0, cfg.region_spread, size=(n, 2))
        for j in range(n):
            label = labels[rng.integers(len(labels))]
            pos = np.array([xy[j, 0], xy[j, 1], rng.uniform(0.0, 1.5)])
            size = rng.uniform(cfg.object_size[0], cfg.object_size[1], size=3)
            pts = pos + rng.uniform(-0.5, 0.5, size=(POINTS_PER_OBJECT, 3)) * size
            pts = np.round(pts, 6)
            objects.append(
                SceneObject(
                    object_id=oid,
                    label=label,
                    centroid=Vec3.of(pts.mean(axis=0)),
                    aabb=Aabb.from_points(pts),
                    region_affordance=aff,
                    object_affordance=f"{label} use",
                    common_rooms=(room,),
                    points=pts,
                )
            )
            oid += 1
    return SceneRecord(scan_id=f"synth-{cfg.seed}-{index:05d}", room_type=room, objects=tuple(objects))


def generate_corpus(cfg: SynthConfig, n_scenes: int) -> list[SceneRecord]:
    if n_scenes < 1:
        raise InvalidConfig("n_scenes must be at least 1")
    return [generate_scene(cfg, i) for i in range(n_scenes)]
