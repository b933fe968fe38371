"""Points, boxes and centroids. All coordinates are meters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyPointSet, EmptyRegion, EmptyScene, NonFiniteValue


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for v in (self.x, self.y, self.z):
            if not math.isfinite(v):
                raise NonFiniteValue(f"non-finite coordinate in {self!r}")

    def __iter__(self) -> Iterator[float]:
        yield self.x
        yield self.y
        yield self.z

    @classmethod
    def of(cls, values: Iterable[float]) -> "Vec3":
        x, y, z = (float(v) for v in values)
        return cls(x, y, z)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z]


@dataclass(frozen=True)
class Aabb:
    min: Vec3
    max: Vec3

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"aabb min exceeds max: {self!r}")

    @classmethod
    def from_points(cls, points) -> "Aabb":
        pts = _as_points(points)
        return cls(Vec3.of(pts.min(axis=0)), Vec3.of(pts.max(axis=0)))

    @classmethod
    def degenerate(cls, at: Vec3) -> "Aabb":
        return cls(at, at)

    def overlaps(self, other: "Aabb") -> bool:
        """Closed-interval test on all three axes; touching faces count."""
        return all(
            a_lo <= b_hi and b_lo <= a_hi
            for a_lo, a_hi, b_lo, b_hi in zip(self.min, self.max, other.min, other.max)
        )

    def to_dict(self) -> dict:
        return {"min": self.min.to_list(), "max": self.max.to_list()}


def _as_points(points) -> np.ndarray:
    pts = np.asarray(
        [tuple(p) for p in points] if not isinstance(points, np.ndarray) else points,
        dtype=np.float64,
    )
    if pts.size == 0:
        raise EmptyPointSet("point set is empty")
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise NonFiniteValue("point set contains non-finite values")
    return pts


def object_centroid(points) -> Vec3:
    """Componentwise mean of an object's points."""
    return Vec3.of(_as_points(points).mean(axis=0))


def room_centroid_and_distances(object_centroids: Sequence) -> tuple[Vec3, list[float]]:
    """Room centroid (mean of object centroids) and each object's L2 distance to it."""
    if len(object_centroids) == 0:
        raise EmptyScene("no objects to locate a room centroid")
    c = np.asarray([tuple(p) for p in object_centroids], dtype=np.float64)
    center = c.mean(axis=0)
    d = np.sqrt(((c - center) ** 2).sum(axis=1))
    return Vec3.of(center), [float(v) for v in d]


def region_centroid(children) -> Vec3:
    """Mean of the children's object centroids."""
    if len(children) == 0:
        raise EmptyRegion("region has no children")
    c = np.asarray([tuple(ch.centroid) for ch in children], dtype=np.float64)
    return Vec3.of(c.mean(axis=0))
