"""Plain-text LLM prompts listing a scene's objects, optionally with its scene graph."""

from __future__ import annotations

import json
from typing import Optional, Sequence

from .errors import MissingGeometry
from .graph import Hsg
from .scene_io import SceneRecord

# Category lists of the 3DHSG annotation scheme, in their published order.
HSG_ROOM_TYPES = (
    "bedroom", "bathroom", "livingroom", "kitchen", "studio", "kidsroom",
    "restaurant", "office", "storage", "meetingroom", "lobby", "others",
)
HSG_REGION_AFFORDANCES = (
    "for washing", "for shower", "to enter", "for toileting", "for sleeping",
    "to store clothing", "for vanity", "for viewing", "to store shoes",
    "for entertainment", "appliance", "for decoration", "for convenience",
    "for lighting", "to rest", "kitchenette", "for dining", "to store",
    "to work/study", "others", "to dine/work/study", "for shelf storage",
    "for commode storage", "for fireplace", "to support ceiling",
    "to make coffee", "for changing",
)

ANSWER_SCHEMA = """{
  "Layer1": "common_type",
  "Layer2": {
    "Object ID": "individual_affordance",
    "Object ID": "individual_affordance",
    ...
  }
}"""


def _coord(v: float, rounded: bool) -> str:
    if rounded:
        s = f"{v:.3f}"
        return "0.000" if s == "-0.000" else s
    return repr(float(v))


def object_line(object_id: int, label: str, centroid, rounded: bool = True) -> str:
    """``<id><label> [x y z]``, e.g. ``3tv [-1.865 0.242 0.081]``."""
    coords = " ".join(_coord(v, rounded) for v in centroid)
    return f"{object_id}{label} [{coords}]"


def _quoted_list(items: Sequence[str]) -> str:
    return "[" + ", ".join(json.dumps(i) for i in items) + "]"


def graph_context(g: Hsg, rounded: bool = True) -> list[str]:
    objects = g.object_by_id()
    regions = g.region_by_id()
    lines = ["Scene graph (room > regions > objects):"]
    for room in g.rooms:
        lines.append(f"room {room.room_id} [{room.room_type}] scan {room.scan_id}")
        for rid in room.child_region_ids:
            r = regions[rid]
            c = " ".join(_coord(v, rounded) for v in r.centroid)
            lines.append(f"  region {r.region_id} [{r.region_affordance}] centroid [{c}]")
            for oid in r.child_object_ids:
                o = objects[oid]
                extra = f" (object affordance: {o.object_affordance})" if o.object_affordance else ""
                lines.append(f"    {o.object_id}{o.semantic_label}{extra}")
    return lines


def build_prompt(
    scene: SceneRecord,
    graph: Optional[Hsg] = None,
    room_types: Sequence[str] = HSG_ROOM_TYPES,
    region_affordances: Sequence[str] = HSG_REGION_AFFORDANCES,
    rounded: bool = True,
) -> str:
    if any(o.centroid is None for o in scene.objects):
        raise MissingGeometry("every object needs a centroid for prompt export")
    lines: list[str] = []
    if graph is not None:
        lines += graph_context(graph, rounded)
        lines.append("")
    lines.append("Objects in the room, each given as <ID><label> [x y z] at its centroid in meters:")
    lines += [object_line(o.object_id, o.label, o.centroid, rounded) for o in scene.objects]
    lines += [
        "",
        "Question:",
        f"Which room type from this list best fits the objects: {_quoted_list(room_types)}?",
        f"For each object, which region-specific affordance from this list applies: {_quoted_list(region_affordances)}?",
        "",
        "Reply with JSON in exactly this layout:",
        ANSWER_SCHEMA,
    ]
    return "\n".join(lines) + "\n"
