"""Capabilities, sub-goals and episodes shared by generation, metrics and training."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .env import Action, Pose


class Capability(str, enum.Enum):
    OBJNAV = "ObjNav"
    POINTNAV = "PointNav"
    IMGNAV = "ImgNav"
    INSIMGNAV = "InsImgNav"
    VLN = "VLN"

    @property
    def label(self) -> str:
        return "Ins-ImgNav" if self is Capability.INSIMGNAV else self.value


CAPABILITIES = tuple(Capability)

SUCCESS_DISTANCE = {
    Capability.POINTNAV: 0.36,
    Capability.IMGNAV: 0.36,
    Capability.OBJNAV: 1.0,
    Capability.INSIMGNAV: 1.0,
    Capability.VLN: 3.0,
}


@dataclass(frozen=True)
class SubGoal:
    """One capability-typed target.

    ``target_xy`` is the point whose success area defines completion: the
    coordinate for PointNav, the goal-view position for ImgNav, the object
    center for ObjNav/InsImgNav and the final waypoint for VLN.
    """

    capability: Capability
    target_xy: tuple[float, float]
    success_distance: float
    point: tuple[float, float, float] | None = None
    object_id: int | None = None
    category: str | None = None
    goal_pose: Pose | None = None
    goal_signature: tuple[float, ...] | None = None
    waypoints: tuple[tuple[float, float], ...] | None = None
    vln_text: str | None = None

    def to_dict(self) -> dict:
        return {
            "capability": self.capability.value,
            "target_xy": list(self.target_xy),
            "success_distance": self.success_distance,
            "point": None if self.point is None else list(self.point),
            "object_id": self.object_id,
            "category": self.category,
            "goal_pose": None if self.goal_pose is None else self.goal_pose.to_list(),
            "goal_signature": None if self.goal_signature is None else list(self.goal_signature),
            "waypoints": None if self.waypoints is None else [list(w) for w in self.waypoints],
            "vln_text": self.vln_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubGoal":
        return cls(
            capability=Capability(d["capability"]),
            target_xy=tuple(d["target_xy"]),
            success_distance=float(d["success_distance"]),
            point=None if d.get("point") is None else tuple(d["point"]),
            object_id=d.get("object_id"),
            category=d.get("category"),
            goal_pose=None if d.get("goal_pose") is None else Pose.from_list(d["goal_pose"]),
            goal_signature=None if d.get("goal_signature") is None else tuple(
                float(v) for v in d["goal_signature"]),
            waypoints=None if d.get("waypoints") is None else tuple(
                tuple(w) for w in d["waypoints"]),
            vln_text=d.get("vln_text"),
        )


@dataclass(frozen=True)
class Episode:
    id: str
    scene_id: str
    start: Pose
    subgoals: tuple[SubGoal, ...]
    instruction_text: str
    gt_actions: tuple[Action, ...]
    gt_poses: tuple[Pose, ...]
    geodesic_length: float
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError(f"episode {self.id} has no sub-goals")
        if len(self.gt_poses) != len(self.gt_actions) + 1:
            raise ValueError(f"episode {self.id}: need exactly one more gt pose than gt actions")
        if self.gt_poses[0] != self.start:
            raise ValueError(f"episode {self.id}: gt poses must begin at the start pose")

    @property
    def capabilities(self) -> tuple[Capability, ...]:
        return tuple(sg.capability for sg in self.subgoals)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scene_id": self.scene_id,
            "start": self.start.to_list(),
            "subgoals": [sg.to_dict() for sg in self.subgoals],
            "instruction_text": self.instruction_text,
            "gt_actions": [a.to_dict() for a in self.gt_actions],
            "gt_poses": [p.to_list() for p in self.gt_poses],
            "geodesic_length": self.geodesic_length,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            id=d["id"],
            scene_id=d["scene_id"],
            start=Pose.from_list(d["start"]),
            subgoals=tuple(SubGoal.from_dict(s) for s in d["subgoals"]),
            instruction_text=d["instruction_text"],
            gt_actions=tuple(Action.from_dict(a) for a in d["gt_actions"]),
            gt_poses=tuple(Pose.from_list(p) for p in d["gt_poses"]),
            geodesic_length=float(d["geodesic_length"]),
            meta=dict(d.get("meta", {})),
        )
