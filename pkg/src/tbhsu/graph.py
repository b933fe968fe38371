"""Three-layer hierarchical scene graph: objects -> regions -> rooms.

Layers are numbered 1 (objects), 2 (regions), 3 (rooms).  An edge is stored
as ``(layer, id, layer, id)``; the validator accepts either endpoint order.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyScene, LengthMismatch, ParseError
from .geometry import Aabb, Vec3, region_centroid
from .scene_io import SceneRecord

OBJECT_LAYER, REGION_LAYER, ROOM_LAYER = 1, 2, 3
N_LAYERS = 3
CENTROID_TOL = 1e-9


@dataclass(frozen=True)
class ObjectNode:
    object_id: int
    semantic_label: str
    centroid: Vec3
    aabb: Aabb
    region_affordance: Optional[str]
    object_affordance: Optional[str] = None
    attributes: tuple[str, ...] = ()
    segment_ids: tuple[int, ...] = ()
    common_rooms: tuple[str, ...] = ()

    @property
    def affordance(self) -> tuple[Optional[str], Optional[str]]:
        """The <region-specific, object-specific> pair."""
        return (self.region_affordance, self.object_affordance)


@dataclass(frozen=True)
class RegionNode:
    region_id: int
    child_object_ids: tuple[int, ...]
    region_affordance: Optional[str]
    centroid: Vec3


@dataclass(frozen=True)
class RoomNode:
    room_id: int
    scan_id: str
    child_region_ids: tuple[int, ...]
    room_type: Optional[str]


Edge = tuple[int, int, int, int]


@dataclass(frozen=True)
class Hsg:
    objects: tuple[ObjectNode, ...]
    regions: tuple[RegionNode, ...]
    rooms: tuple[RoomNode, ...]
    edges: tuple[Edge, ...]

    def object_by_id(self) -> dict[int, ObjectNode]:
        return {o.object_id: o for o in self.objects}

    def region_by_id(self) -> dict[int, RegionNode]:
        return {r.region_id: r for r in self.regions}


class ViolationKind(str, Enum):
    INVALID_LAYER = "InvalidLayer"
    DUPLICATE_ID = "DuplicateId"
    DANGLING_EDGE = "DanglingEdge"
    ADJACENT_LAYERS_ONLY = "AdjacentLayersOnly"
    SINGLE_PARENT = "SingleParent"
    DISJOINT_CHILDREN = "DisjointChildren"
    DANGLING_CHILD = "DanglingChild"
    CHILD_EDGE_MISMATCH = "ChildEdgeMismatch"
    EMPTY_REGION = "EmptyRegion"
    EMPTY_ROOM = "EmptyRoom"
    MIXED_AFFORDANCE = "MixedAffordance"
    CENTROID_MISMATCH = "CentroidMismatch"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    ids: tuple
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "ids": list(self.ids), "detail": self.detail}


def _layer_ids(g: Hsg) -> dict[int, list[int]]:
    return {
        OBJECT_LAYER: [o.object_id for o in g.objects],
        REGION_LAYER: [r.region_id for r in g.regions],
        ROOM_LAYER: [r.room_id for r in g.rooms],
    }


def validate_graph(g: Hsg) -> list[Violation]:
    """Return every structural violation found; an empty list means valid."""
    out: list[Violation] = []
    layer_ids = _layer_ids(g)
    present = {layer: set(ids) for layer, ids in layer_ids.items()}

    for layer, ids in layer_ids.items():
        seen = set()
        for i in ids:
            if i in seen:
                out.append(Violation(ViolationKind.DUPLICATE_ID, (layer, i)))
            seen.add(i)

    parents: dict[tuple[int, int], set[tuple[int, int]]] = defaultdict(set)
    edge_children: dict[tuple[int, int], set[int]] = defaultdict(set)
    for edge in g.edges:
        la, ia, lb, ib = edge
        if la not in present or lb not in present:
            out.append(Violation(ViolationKind.INVALID_LAYER, tuple(edge), "layer must be 1, 2 or 3"))
            continue
        if ia not in present[la] or ib not in present[lb]:
            out.append(Violation(ViolationKind.DANGLING_EDGE, tuple(edge)))
            continue
        if abs(la - lb) != 1:
            out.append(Violation(ViolationKind.ADJACENT_LAYERS_ONLY, tuple(edge)))
            continue
        child, parent = ((la, ia), (lb, ib)) if la < lb else ((lb, ib), (la, ia))
        parents[child].add(parent)
        edge_children[parent].add(child[1])

    for child, ps in sorted(parents.items()):
        if len(ps) > 1:
            out.append(
                Violation(ViolationKind.SINGLE_PARENT, child, f"parents {sorted(ps)}")
            )

    declared = [
        (REGION_LAYER, r.region_id, OBJECT_LAYER, r.child_object_ids) for r in g.regions
    ] + [(ROOM_LAYER, r.room_id, REGION_LAYER, r.child_region_ids) for r in g.rooms]

    claimed: dict[tuple[int, int], list[int]] = defaultdict(list)
    for layer, nid, child_layer, children in declared:
        if len(children) == 0:
            kind = ViolationKind.EMPTY_REGION if layer == REGION_LAYER else ViolationKind.EMPTY_ROOM
            out.append(Violation(kind, (layer, nid)))
        for c in children:
            if c not in present[child_layer]:
                out.append(Violation(ViolationKind.DANGLING_CHILD, (layer, nid, child_layer, c)))
            claimed[(child_layer, c)].append(nid)
        if set(children) != edge_children.get((layer, nid), set()):
            out.append(
                Violation(
                    ViolationKind.CHILD_EDGE_MISMATCH,
                    (layer, nid),
                    "declared children disagree with edges",
                )
            )

    for child, owners in sorted(claimed.items()):
        if len(owners) > 1:
            out.append(
                Violation(ViolationKind.DISJOINT_CHILDREN, child, f"claimed by {sorted(owners)}")
            )

    objects = g.object_by_id()
    for r in g.regions:
        kids = [objects[c] for c in r.child_object_ids if c in objects]
        affs = {k.region_affordance for k in kids}
        if kids and (len(affs) > 1 or affs != {r.region_affordance}):
            out.append(
                Violation(ViolationKind.MIXED_AFFORDANCE, (REGION_LAYER, r.region_id), f"{sorted(map(str, affs))}")
            )
        if kids and len(kids) == len(r.child_object_ids):
            expected = region_centroid(kids).to_array()
            if np.max(np.abs(expected - r.centroid.to_array())) > CENTROID_TOL:
                out.append(Violation(ViolationKind.CENTROID_MISMATCH, (REGION_LAYER, r.region_id)))
    return out


def assemble_graph(
    scene: SceneRecord,
    room_type: Optional[str],
    region_affordances: Sequence[Optional[str]],
    room_id: int = 0,
) -> Hsg:
    """Group objects into one region per distinct affordance under a single room.

    Region ids follow first-occurrence order of the affordance values.
    """
    if len(scene.objects) == 0:
        raise EmptyScene(f"scene {scene.scan_id!r} has no objects")
    if len(region_affordances) != len(scene.objects):
        raise LengthMismatch(
            f"{len(region_affordances)} affordances for {len(scene.objects)} objects"
        )

    objects = tuple(
        ObjectNode(
            object_id=o.object_id,
            semantic_label=o.label,
            centroid=o.centroid,
            aabb=o.aabb,
            region_affordance=aff,
            object_affordance=o.object_affordance,
            attributes=o.attributes,
            segment_ids=o.segment_ids,
            common_rooms=o.common_rooms,
        )
        for o, aff in zip(scene.objects, region_affordances)
    )

    groups: dict[Optional[str], list[ObjectNode]] = {}
    for node in objects:
        groups.setdefault(node.region_affordance, []).append(node)

    regions = []
    edges: list[Edge] = []
    for rid, (aff, kids) in enumerate(groups.items()):
        regions.append(
            RegionNode(rid, tuple(k.object_id for k in kids), aff, region_centroid(kids))
        )
        edges.extend((OBJECT_LAYER, k.object_id, REGION_LAYER, rid) for k in kids)
    room = RoomNode(room_id, scene.scan_id, tuple(r.region_id for r in regions), room_type)
    edges.extend((REGION_LAYER, r.region_id, ROOM_LAYER, room_id) for r in regions)
    return Hsg(objects, tuple(regions), (room,), tuple(edges))


def graph_to_dict(g: Hsg) -> dict:
    return {
        "rooms": [
            {
                "room_id": r.room_id,
                "scan_id": r.scan_id,
                "room_type": r.room_type,
                "child_region_ids": list(r.child_region_ids),
            }
            for r in g.rooms
        ],
        "regions": [
            {
                "region_id": r.region_id,
                "region_affordance": r.region_affordance,
                "centroid": r.centroid.to_list(),
                "child_object_ids": list(r.child_object_ids),
            }
            for r in g.regions
        ],
        "objects": [
            {
                "object_id": o.object_id,
                "semantic_label": o.semantic_label,
                "attributes": list(o.attributes),
                "segment_ids": list(o.segment_ids),
                "affordance": [o.region_affordance, o.object_affordance],
                "common_rooms": list(o.common_rooms),
                "centroid": o.centroid.to_list(),
                "aabb": o.aabb.to_dict(),
            }
            for o in g.objects
        ],
        "edges": [list(e) for e in g.edges],
    }


def graph_from_dict(data: dict) -> Hsg:
    try:
        objects = tuple(
            ObjectNode(
                object_id=int(o["object_id"]),
                semantic_label=o["semantic_label"],
                centroid=Vec3.of(o["centroid"]),
                aabb=Aabb(Vec3.of(o["aabb"]["min"]), Vec3.of(o["aabb"]["max"])),
                region_affordance=o["affordance"][0],
                object_affordance=o["affordance"][1],
                attributes=tuple(o.get("attributes", ())),
                segment_ids=tuple(o.get("segment_ids", ())),
                common_rooms=tuple(o.get("common_rooms", ())),
            )
            for o in data["objects"]
        )
        regions = tuple(
            RegionNode(
                region_id=int(r["region_id"]),
                child_object_ids=tuple(int(c) for c in r["child_object_ids"]),
                region_affordance=r["region_affordance"],
                centroid=Vec3.of(r["centroid"]),
            )
            for r in data["regions"]
        )
        rooms = tuple(
            RoomNode(
                room_id=int(r["room_id"]),
                scan_id=str(r["scan_id"]),
                child_region_ids=tuple(int(c) for c in r["child_region_ids"]),
                room_type=r["room_type"],
            )
            for r in data["rooms"]
        )
        edges = []
        for e in data["edges"]:
            if len(e) != 4:
                raise ParseError(f"edge must have 4 entries: {e!r}")
            edges.append(tuple(int(v) for v in e))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed graph document: {exc!r}") from exc
    return Hsg(objects, regions, rooms, tuple(edges))


def dumps_graph(g: Hsg) -> str:
    return json.dumps(graph_to_dict(g), indent=2) + "\n"


def loads_graph(text: str) -> Hsg:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError("graph document must be a JSON object")
    return graph_from_dict(data)
