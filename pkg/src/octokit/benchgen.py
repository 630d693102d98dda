"""Instruction-trajectory episode construction.

Pipeline per episode: sample a capability sequence, sample a constrained
trajectory (spliced around a synthetic VLN walk when VLN is involved), place
sub-goals along it, route a ground-truth action sequence through every
sub-goal and ground an instruction template.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from . import env
from .env import (
    CAMERA_HEIGHT, STOP, Action, ActionKind, Pose, Scene, SemanticObject,
    bearing_to, cell_geodesic, frame_coverage, nearest_navigable_cell, observe,
    relative_bearing, shortest_cell_path, visible,
)
from .metrics import oracle_eval
from .tasks import CAPABILITIES, SUCCESS_DISTANCE, Capability, Episode, SubGoal

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LENGTH_WEIGHTS = (0.20, 0.30, 0.25, 0.15, 0.10)
DEFAULT_SCALE = 0.3
RATIO_THRESHOLD = 1.1
OBJECT_SNAP_RADIUS = 2.0
CAMERA_RADII = (0.5, 1.0, 1.5, 2.0)
CAMERA_BEARINGS = 36
CAMERA_HEIGHTS_PER_POINT = 5
CAMERA_HEIGHT_RANGE = (0.8, 1.5)
COVERAGE_THRESHOLD = 0.20
PLACEHOLDERS = {
    Capability.OBJNAV: "{object}",
    Capability.POINTNAV: "{coordinates}",
    Capability.IMGNAV: "{ImageNav}",
    Capability.INSIMGNAV: "{InstanceImageNav}",
    Capability.VLN: "{VLN}",
}


class TrajectoryError(RuntimeError):
    pass


class SpliceError(RuntimeError):
    pass


class SnapError(RuntimeError):
    """Sub-goal placement failed; the caller should resample the path."""


class EpisodeGenerationError(RuntimeError):
    pass


class InstructionError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# capability sampling


def _as_counts(counts_so_far) -> dict:
    if counts_so_far is None:
        return {c: 0 for c in CAPABILITIES}
    if isinstance(counts_so_far, Mapping):
        return {c: int(counts_so_far.get(c, counts_so_far.get(c.value, 0))) for c in CAPABILITIES}
    return {c: int(n) for c, n in zip(CAPABILITIES, counts_so_far)}


def sample_capabilities(rng: np.random.Generator, counts_so_far=None,
                        length_weights: Sequence[float] = LENGTH_WEIGHTS) -> list[Capability]:
    """Draw an ordered capability list of length 1-5.

    Each draw excludes the previous capability and weights the rest by
    ``1 / (1 + count)`` so under-represented capabilities are favoured.
    """
    counts = _as_counts(counts_so_far)
    w = np.asarray(length_weights, dtype=float)
    k = int(rng.choice(len(w), p=w / w.sum())) + 1
    caps: list[Capability] = []
    for _ in range(k):
        options = [c for c in CAPABILITIES if not caps or c is not caps[-1]]
        p = np.array([1.0 / (1.0 + counts[c]) for c in options])
        c = options[int(rng.choice(len(options), p=p / p.sum()))]
        caps.append(c)
        counts[c] += 1
    return caps


# --------------------------------------------------------------------------
# trajectory sampling


def accept_by_ratio(ratio: float, rng: np.random.Generator) -> bool:
    """Always keep ratios above 1.1; keep ratios in [1, 1.1] with probability 10(r-1)^2."""
    if ratio < 1.0 - 1e-9:
        raise ValueError(f"straight ratio {ratio} < 1: geodesic shorter than Euclidean")
    if ratio > RATIO_THRESHOLD:
        return True
    return bool(rng.random() < 10.0 * (max(ratio, 1.0) - 1.0) ** 2)


def distance_interval(k: int, scale: float = DEFAULT_SCALE) -> tuple[float, float]:
    return (3.0 * k * scale, 10.0 * k * scale)


@dataclass(frozen=True)
class Trajectory:
    start: Pose
    end: Pose
    cells: tuple[tuple[int, int], ...]
    geodesic: float
    ratio: float

    def points(self, scene: Scene) -> list[tuple[float, float]]:
        return [scene.cell_center(c) for c in self.cells]


def _random_cell(rng, cells) -> tuple[int, int]:
    c = cells[int(rng.integers(len(cells)))]
    return (int(c[0]), int(c[1]))


def sample_trajectory(scene: Scene, k: int, rng: np.random.Generator, scale: float = DEFAULT_SCALE,
                      start: Pose | None = None, end: Pose | None = None,
                      max_candidates: int = 10_000) -> Trajectory:
    """Sample start/end cells whose geodesic lies in ``[3k, 10k] * scale`` and pass the ratio rule.

    Either endpoint may be pinned (used when splicing around a VLN walk).
    """
    if not 1 <= k <= 5:
        raise ValueError("capability count must be in [1, 5]")
    lo, hi = distance_interval(k, scale)
    cells = scene.navigable_cells()
    res = scene.resolution
    a_fixed = None if start is None else nearest_navigable_cell(scene, start.x, start.y)
    b_fixed = None if end is None else nearest_navigable_cell(scene, end.x, end.y)
    for _ in range(max_candidates):
        a = a_fixed or _random_cell(rng, cells)
        b = b_fixed or _random_cell(rng, cells)
        if a == b:
            continue
        g = cell_geodesic(scene, a, b)
        if not math.isfinite(g) or not lo <= g <= hi:
            continue
        e = res * math.hypot(a[0] - b[0], a[1] - b[1])
        ratio = max(g / e, 1.0) if g / e > 1.0 - 1e-9 else g / e
        if not accept_by_ratio(ratio, rng):
            continue
        path = shortest_cell_path(scene, a, b)
        if start is None:
            sp = Pose(*scene.cell_center(a), CAMERA_HEIGHT, float(rng.uniform(0.0, 360.0)))
        else:
            sp = Pose(*scene.cell_center(a), CAMERA_HEIGHT, start.heading)
        ep = end if end is not None else Pose(*scene.cell_center(b), CAMERA_HEIGHT, 0.0)
        return Trajectory(sp, ep, tuple(path), g, ratio)
    raise TrajectoryError(
        f"no trajectory with geodesic in [{lo:.2f}, {hi:.2f}] m accepted after "
        f"{max_candidates} candidates (k={k}, scale={scale}, scene {scene.scene_id})")


# --------------------------------------------------------------------------
# synthetic VLN walks and splicing


@dataclass(frozen=True)
class VlnWalk:
    waypoints: tuple[tuple[float, float], ...]
    cells: tuple[tuple[int, int], ...]
    text: str


def _turn_phrase(delta: float) -> str:
    a = abs(delta)
    side = "right" if delta > 0 else "left"
    if a < 20:
        return "continue straight"
    if a < 60:
        return f"turn slightly {side}"
    if a < 135:
        return f"turn {side}"
    return "turn around"


def render_walk(scene: Scene, waypoints: Sequence[tuple[float, float]]) -> str:
    """Deterministic English rendering of a waypoint walk."""
    parts = []
    prev_bearing = None
    for p, q in zip(waypoints[:-1], waypoints[1:]):
        b = bearing_to(p, q)
        dist = round(math.dist(p, q) * 2) / 2
        if prev_bearing is None:
            parts.append(f"walk forward about {dist:.1f} meters")
        else:
            delta = (b - prev_bearing + 180.0) % 360.0 - 180.0
            parts.append(f"{_turn_phrase(delta)} and walk about {dist:.1f} meters")
        prev_bearing = b
    end = Pose(*waypoints[-1])
    near = [(math.dist(end.xy, o.center), o.id, o) for o in scene.objects
            if math.dist(end.xy, o.center) <= 3.0 and visible(scene, end, o)]
    if near:
        parts.append(f"then stop near the {min(near)[2].category}")
    else:
        parts.append("then stop there")
    return ", ".join(parts)


def gen_vln_walk(scene: Scene, rng: np.random.Generator, n_waypoints: int | None = None,
                 leg: tuple[float, float] = (1.0, 2.5), min_span: float = 3.0,
                 max_tries: int = 200) -> VlnWalk:
    """Random 3-6 waypoint walk with geodesic legs and no sharp reversals.

    The straight-line span from first to last waypoint must exceed ``min_span``
    so a walk that starts the episode does not begin inside its own success area.
    """
    cells = scene.navigable_cells()
    res = scene.resolution
    W = scene.width
    for _ in range(max_tries):
        n = n_waypoints or int(rng.integers(3, 7))
        wp = [_random_cell(rng, cells)]
        prev_dir = None
        ok = True
        for _ in range(n - 1):
            dist, _pred = env._field(scene, wp[-1])
            d = dist[cells[:, 1] * W + cells[:, 0]] * res
            cand = cells[(d >= leg[0]) & (d <= leg[1])]
            if prev_dir is not None and len(cand):
                vx = cand[:, 0] - wp[-1][0]
                vy = cand[:, 1] - wp[-1][1]
                cosang = (vx * prev_dir[0] + vy * prev_dir[1]) / np.maximum(np.hypot(vx, vy), 1e-9)
                cand = cand[cosang > math.cos(math.radians(135))]
            if not len(cand):
                ok = False
                break
            nxt = _random_cell(rng, cand)
            v = (nxt[0] - wp[-1][0], nxt[1] - wp[-1][1])
            prev_dir = (v[0] / math.hypot(*v), v[1] / math.hypot(*v))
            wp.append(nxt)
        if not ok or res * math.hypot(wp[0][0] - wp[-1][0], wp[0][1] - wp[-1][1]) <= min_span:
            continue
        path = [wp[0]]
        for a, b in zip(wp[:-1], wp[1:]):
            path.extend(shortest_cell_path(scene, a, b)[1:])
        pts = tuple(scene.cell_center(c) for c in wp)
        return VlnWalk(pts, tuple(path), render_walk(scene, pts))
    raise TrajectoryError("could not generate a VLN walk")


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def splice_ratios(scene: Scene, A, S, T, B) -> tuple[float, float, float]:
    """``((AS+ST)/AT, (ST+TB)/SB, (AS+ST+TB)/AB)`` with geodesic distances."""
    def g(p, q):
        return env.geodesic_distance(scene, p, q)
    as_, st, tb = g(A, S), g(S, T), g(T, B)
    return (_ratio(as_ + st, g(A, T)), _ratio(st + tb, g(S, B)), _ratio(as_ + st + tb, g(A, B)))


def splice_ok(ratios: Sequence[float]) -> bool:
    return ratios[0] <= 3.0 and ratios[1] <= 3.0 and ratios[2] <= 5.0


@dataclass(frozen=True)
class Splice:
    start: Pose
    end: Pose
    prefix: Trajectory | None
    suffix: Trajectory | None
    walk: VlnWalk
    ratios: tuple[float, float, float]


def splice_vln(scene: Scene, walk: VlnWalk, rng: np.random.Generator, n_before: int = 1,
               n_after: int = 1, scale: float = DEFAULT_SCALE, max_candidates: int = 10_000) -> Splice:
    """Attach a prefix A..S and suffix T..B to the walk S..T under the naturalness ratios.

    ``n_before``/``n_after`` are the capability counts hosted by each segment;
    zero pins the segment to the walk endpoint (A = S or B = T).
    """
    S = Pose(*walk.waypoints[0])
    T = Pose(*walk.waypoints[-1])
    for _ in range(max_candidates):
        try:
            prefix = (sample_trajectory(scene, n_before, rng, scale, end=S, max_candidates=200)
                      if n_before else None)
            suffix = (sample_trajectory(scene, n_after, rng, scale, start=T, max_candidates=200)
                      if n_after else None)
        except TrajectoryError:
            continue
        A = prefix.start if prefix else Pose(S.x, S.y, CAMERA_HEIGHT, float(rng.uniform(0, 360)))
        B = suffix.end if suffix else T
        ratios = splice_ratios(scene, A, S, T, B)
        if splice_ok(ratios):
            return Splice(A, B, prefix, suffix, walk, ratios)
    raise SpliceError(f"no natural splice found in {max_candidates} candidate pairs")


# --------------------------------------------------------------------------
# goal cameras


def goal_camera_candidates(obj: SemanticObject, rng: np.random.Generator) -> list[Pose]:
    """36 bearings x 4 radii x 5 sampled heights, each facing the object center."""
    out = []
    cx, cy = obj.center
    for r in CAMERA_RADII:
        for b in range(CAMERA_BEARINGS):
            ang = math.radians(b * 360.0 / CAMERA_BEARINGS)
            x, y = cx + r * math.sin(ang), cy + r * math.cos(ang)
            heading = bearing_to((x, y), obj.center)
            for h in rng.uniform(*CAMERA_HEIGHT_RANGE, size=CAMERA_HEIGHTS_PER_POINT):
                out.append(Pose(x, y, float(h), heading))
    return out


def sample_goal_camera(scene: Scene, obj: SemanticObject, rng: np.random.Generator,
                       threshold: float = COVERAGE_THRESHOLD) -> list[Pose]:
    """Navigable, visible candidate cameras whose frame coverage reaches ``threshold``."""
    out = []
    for cam in goal_camera_candidates(obj, rng):
        if not scene.is_navigable(cam.x, cam.y) or not visible(scene, cam, obj):
            continue
        if frame_coverage(scene, cam, obj) >= threshold:
            out.append(cam)
    return out


def first_goal_camera(scene: Scene, obj: SemanticObject, rng: np.random.Generator,
                      threshold: float = COVERAGE_THRESHOLD) -> Pose | None:
    """A uniformly chosen qualifying camera, found by scanning shuffled candidates."""
    cands = goal_camera_candidates(obj, rng)
    for k in rng.permutation(len(cands)):
        cam = cands[k]
        if (scene.is_navigable(cam.x, cam.y) and visible(scene, cam, obj)
                and frame_coverage(scene, cam, obj) >= threshold):
            return cam
    return None


# --------------------------------------------------------------------------
# sub-goal assignment


def _arc_positions(points: Sequence[tuple[float, float]]) -> list[float]:
    out = [0.0]
    for p, q in zip(points[:-1], points[1:]):
        out.append(out[-1] + math.dist(p, q))
    return out


def assign_subgoals(scene: Scene, path_points: Sequence[tuple[float, float]],
                    capabilities: Sequence[Capability], rng: np.random.Generator) -> list[SubGoal]:
    """Place one sub-goal per capability at arc-length fractions j/k of the path.

    VLN sub-goals are built from walks by the caller; raises ``SnapError``
    when an object target cannot be found near its waypoint.
    """
    k = len(capabilities)
    arc = _arc_positions(path_points)
    total = arc[-1]
    out = []
    for j, cap in enumerate(capabilities, start=1):
        want = total * j / k
        idx = min(range(len(arc)), key=lambda i: (abs(arc[i] - want), -i))
        x, y = path_points[idx]
        sd = SUCCESS_DISTANCE[cap]
        if cap is Capability.POINTNAV:
            out.append(SubGoal(cap, (x, y), sd, point=(x, y, CAMERA_HEIGHT)))
        elif cap is Capability.IMGNAV:
            nxt = path_points[idx + 1] if idx + 1 < len(path_points) else None
            prv = path_points[idx - 1] if idx > 0 else None
            heading = bearing_to((x, y), nxt) if nxt else (bearing_to(prv, (x, y)) if prv else 0.0)
            gp = Pose(x, y, CAMERA_HEIGHT, heading)
            sig = tuple(float(v) for v in observe(scene, gp))
            out.append(SubGoal(cap, (x, y), sd, goal_pose=gp, goal_signature=sig))
        elif cap in (Capability.OBJNAV, Capability.INSIMGNAV):
            near = sorted((math.dist((x, y), o.center), o.id, o) for o in scene.objects
                          if math.dist((x, y), o.center) <= OBJECT_SNAP_RADIUS)
            if not near:
                raise SnapError(f"no object within {OBJECT_SNAP_RADIUS} m of waypoint {j}")
            if cap is Capability.OBJNAV:
                o = near[0][2]
                out.append(SubGoal(cap, o.center, sd, object_id=o.id, category=o.category))
                continue
            for _, _, o in near:
                cam = first_goal_camera(scene, o, rng)
                if cam is not None:
                    sig = tuple(float(v) for v in observe(scene, cam))
                    out.append(SubGoal(cap, o.center, sd, object_id=o.id, category=o.category,
                                       goal_pose=cam, goal_signature=sig))
                    break
            else:
                raise SnapError(f"no goal camera for objects near waypoint {j}")
        else:
            raise ValueError("VLN sub-goals come from splice_vln")
    return out


MIN_SEPARATION = 1.0


def check_spacing(scene: Scene, start: Pose, subgoals: Sequence[SubGoal]) -> None:
    """Start lies outside the first area, each target lies outside the next one's
    success area and all targets are pairwise at least 1 m apart geodesically."""
    first = subgoals[0]
    if math.dist(start.xy, first.target_xy) <= first.success_distance:
        raise SnapError("start already inside the first success area")
    for a, b in zip(subgoals[:-1], subgoals[1:]):
        if math.dist(a.target_xy, b.target_xy) < max(MIN_SEPARATION, b.success_distance):
            raise SnapError("consecutive sub-goals too close")
    for i, a in enumerate(subgoals):
        for b in subgoals[i + 1:]:
            if env.geodesic_distance(scene, a.target_xy, b.target_xy) < MIN_SEPARATION:
                raise SnapError("sub-goals too close along the floor")


# --------------------------------------------------------------------------
# ground-truth routing

REACH = 0.2
PASS = 0.3
LOOKAHEAD = 6


def _line_free(scene: Scene, p, q) -> bool:
    d = math.dist(p, q)
    n = max(1, int(math.ceil(d / (scene.resolution / 4))))
    for k in range(n + 1):
        t = k / n
        if not scene.is_navigable(p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])):
            return False
    return True


def _choose_action(scene: Scene, pose: Pose, target: tuple[float, float]) -> Action | None:
    """Turn toward ``target`` or take the forward bin closest to its distance that moves freely."""
    rel = relative_bearing(pose, target)
    if abs(rel) > 7.5 + 1e-9:
        mag = min(env.TURN_BINS_DEG, key=lambda m: (abs(abs(rel) - m), m))
        return Action(ActionKind.RIGHT if rel > 0 else ActionKind.LEFT, mag)
    d = math.dist(pose.xy, target)
    for mag in sorted(env.FORWARD_BINS_CM, key=lambda m: (abs(d - m / 100.0), m)):
        moved = env.move_forward(scene, pose, mag / 100.0)
        if math.dist(moved.xy, pose.xy) >= mag / 100.0 - 1e-9:
            return Action(ActionKind.FORWARD, mag)
    return None


def follow_route(scene: Scene, start: Pose, points: Sequence[tuple[float, float]],
                 checkpoints: Sequence[int], max_actions: int | None = None) -> tuple[list, list]:
    """Turn/forward actions passing every route point in ``checkpoints`` in order, then Stop.

    Checkpoints must be approached within ``REACH``; other route points only
    guide the motion and may be cut when there is line of sight past them.
    """
    must = sorted(set(checkpoints) | {len(points) - 1})
    max_actions = max_actions or 60 + 6 * len(points)
    pose = start
    actions: list[Action] = []
    poses = [start]
    idx = 0
    n = len(points)
    while True:
        limit = next(m for m in must if m >= idx)
        for j in range(limit, idx - 1, -1):
            if math.dist(pose.xy, points[j]) < (REACH if j == limit else PASS):
                idx = j + 1
                break
        if idx >= n:
            break
        limit = next(m for m in must if m >= idx)
        tj = idx
        for j in range(idx + 1, min(limit, idx + LOOKAHEAD) + 1):
            if not _line_free(scene, pose.xy, points[j]):
                break
            tj = j
        act = _choose_action(scene, pose, points[tj])
        if act is None and tj != idx:
            act = _choose_action(scene, pose, points[idx])
        if act is None:
            raise SnapError("route follower blocked")
        pose = env.step(scene, pose, act)
        actions.append(act)
        poses.append(pose)
        if len(actions) > max_actions:
            raise SnapError("route follower exceeded its action budget")
    actions.append(STOP)
    poses.append(pose)
    return actions, poses


def truncate_at_completion(scene: Scene, subgoals: Sequence[SubGoal], actions, poses):
    """Cut the route where the last success area is entered in order, and Stop there.

    ``poses`` keeps one more entry than ``actions``; Stop leaves the pose unchanged.
    """
    j = 0
    for k, p in enumerate(poses):
        sg = subgoals[j]
        if math.dist(p.xy, sg.target_xy) <= sg.success_distance:
            j += 1
            if j == len(subgoals):
                return list(actions[:k]) + [STOP], list(poses[:k + 1]) + [p]
    raise SnapError("route never completes the ordered sub-goals")


def _via_cell(scene: Scene, sg: SubGoal) -> tuple[int, int]:
    cell = nearest_navigable_cell(scene, *sg.target_xy)
    if math.dist(scene.cell_center(cell), sg.target_xy) > sg.success_distance - REACH:
        raise SnapError("target has no navigable cell inside its success area")
    return cell


def _route(scene: Scene, start: Pose, subgoals: Sequence[SubGoal]):
    cur = scene.cell_of(start.x, start.y)
    cells = [cur]
    checkpoints = []
    length = 0.0
    for sg in subgoals:
        if sg.capability is Capability.VLN:
            vias = [scene.cell_of(*w) for w in sg.waypoints]
        else:
            vias = [_via_cell(scene, sg)]
        for v in vias:
            seg = shortest_cell_path(scene, cur, v)
            if not seg:
                raise SnapError("sub-goal unreachable")
            length += cell_geodesic(scene, cur, v)
            cells.extend(seg[1:])
            cur = v
        checkpoints.append(len(cells) - 1)
    # drop consecutive duplicates while keeping checkpoint indices aligned
    pts, remap = [], {}
    for i, c in enumerate(cells):
        if not pts or scene.cell_center(c) != pts[-1]:
            pts.append(scene.cell_center(c))
        remap[i] = len(pts) - 1
    return pts, [remap[c] for c in checkpoints], length


# --------------------------------------------------------------------------
# templates and instructions


@dataclass(frozen=True)
class InstructionTemplate:
    capabilities: tuple[Capability, ...]
    text: str
    conjunction_id: int | None
    stop_id: int

    def to_dict(self) -> dict:
        return {
            "capabilities": [c.value for c in self.capabilities],
            "text": self.text,
            "conjunction_id": self.conjunction_id,
            "stop_id": self.stop_id,
        }


def load_template_pool(path=None) -> dict:
    if path is None:
        text = resources.files("octokit").joinpath("data/templates.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    pool = json.loads(text)
    for c in CAPABILITIES:
        if not pool.get(c.value):
            raise ValueError(f"template pool has no {c.value} templates")
    return pool


def make_template(capabilities: Sequence[Capability], rng: np.random.Generator,
                  pool: dict | None = None) -> InstructionTemplate:
    pool = pool or load_template_pool()
    clauses = [pool[c.value][int(rng.integers(len(pool[c.value])))] for c in capabilities]
    conj_id = int(rng.integers(len(pool["conjunctions"]))) if rng.random() < 0.5 else None
    stop_id = int(rng.integers(len(pool["stop"])))
    if conj_id is None:
        body = ". ".join(clauses)
    else:
        body = f", {pool['conjunctions'][conj_id]} ".join(clauses)
    text = f"{body}. {pool['stop'][stop_id]}"
    return InstructionTemplate(tuple(capabilities), text, conj_id, stop_id)


_PLACEHOLDER_RE = re.compile(r"\{(coordinates|ImageNav|InstanceImageNav|object|VLN)\}")


def reference_token(capability: Capability, episode_id: str, index: int) -> str:
    name = "ImageNav" if capability is Capability.IMGNAV else "InstanceImageNav"
    return f"<{name}:{episode_id}.{index}>"


def initial_state_clause(start: Pose) -> str:
    dx, dy = env.heading_vector(start.heading)
    return (f"Your current position is ({start.x:.2f}, {start.y:.2f}, {start.height:.2f}) "
            f"and your current orientation is ({dx:.2f}, {dy:.2f}, 0.00). ")


def instantiate_instruction(template: InstructionTemplate, subgoals: Sequence[SubGoal],
                            start: Pose, episode_id: str = "ep") -> str:
    """Ground each placeholder, in order, with its sub-goal's element."""
    caps = tuple(sg.capability for sg in subgoals)
    if caps != tuple(template.capabilities):
        raise InstructionError(f"template capabilities {template.capabilities} != sub-goals {caps}")
    found = [m.group(0) for m in _PLACEHOLDER_RE.finditer(template.text)]
    if found != [PLACEHOLDERS[c] for c in caps]:
        raise InstructionError(f"placeholders {found} do not match capabilities {caps}")
    pieces = []
    pos = 0
    for j, (m, sg) in enumerate(zip(_PLACEHOLDER_RE.finditer(template.text), subgoals)):
        pieces.append(template.text[pos:m.start()])
        cap = sg.capability
        if cap is Capability.POINTNAV:
            x, y, z = sg.point
            pieces.append(f"({x:.2f}, {y:.2f}, {z:.2f})")
        elif cap is Capability.OBJNAV:
            pieces.append(sg.category)
        elif cap in (Capability.IMGNAV, Capability.INSIMGNAV):
            pieces.append(reference_token(cap, episode_id, j))
        else:
            pieces.append(sg.vln_text)
        pos = m.end()
    pieces.append(template.text[pos:])
    return initial_state_clause(start) + "".join(pieces)


# --------------------------------------------------------------------------
# episodes


def _vln_subgoal(walk: VlnWalk) -> SubGoal:
    return SubGoal(Capability.VLN, walk.waypoints[-1], SUCCESS_DISTANCE[Capability.VLN],
                   waypoints=walk.waypoints, vln_text=walk.text)


def _try_build(scene: Scene, caps: Sequence[Capability], rng, episode_id: str, scale: float,
               pool: dict) -> Episode:
    caps = list(caps)
    if Capability.VLN in caps:
        v = caps.index(Capability.VLN)
        before, after = caps[:v], caps[v + 1:]
        walk = gen_vln_walk(scene, rng)
        sp = splice_vln(scene, walk, rng, len(before), len(after), scale)
        subgoals = []
        if before:
            subgoals += assign_subgoals(scene, sp.prefix.points(scene), before, rng)
        subgoals.append(_vln_subgoal(walk))
        if after:
            subgoals += assign_subgoals(scene, sp.suffix.points(scene), after, rng)
        start = sp.start
        meta = {"splice_ratios": list(sp.ratios)}
    else:
        traj = sample_trajectory(scene, len(caps), rng, scale)
        subgoals = assign_subgoals(scene, traj.points(scene), caps, rng)
        start = traj.start
        meta = {"straight_ratio": traj.ratio}
    check_spacing(scene, start, subgoals)
    pts, checkpoints, length = _route(scene, start, subgoals)
    actions, poses = follow_route(scene, start, pts, checkpoints)
    actions, poses = truncate_at_completion(scene, subgoals, actions, poses)
    template = make_template(caps, rng, pool)
    text = instantiate_instruction(template, subgoals, start, episode_id)
    meta["template"] = template.to_dict()
    ep = Episode(episode_id, scene.scene_id, start, tuple(subgoals), text, tuple(actions),
                 tuple(poses), length, meta)
    if not oracle_eval(scene, ep).success:
        raise SnapError("ground-truth route misses a success area")
    return ep


def build_episode(scene: Scene, caps: Sequence[Capability], rng: np.random.Generator,
                  episode_id: str, scale: float = DEFAULT_SCALE, pool: dict | None = None,
                  max_attempts: int = 100) -> Episode:
    pool = pool or load_template_pool()
    last = None
    for _ in range(max_attempts):
        try:
            return _try_build(scene, caps, rng, episode_id, scale, pool)
        except (SnapError, TrajectoryError, SpliceError) as exc:
            last = exc
    raise EpisodeGenerationError(f"{episode_id}: {last}")


def _count_vln(caps) -> int:
    return sum(c is Capability.VLN for c in caps)


def plan_capabilities(n: int, seed: int) -> list[list[Capability]]:
    """Sequential, balance-aware capability plan (at most one VLN walk per episode)."""
    rng = np.random.default_rng([seed, 0])
    counts = {c: 0 for c in CAPABILITIES}
    plan = []
    for _ in range(n):
        caps = sample_capabilities(rng, counts)
        while _count_vln(caps) > 1:
            caps = sample_capabilities(rng, counts)
        for c in caps:
            counts[c] += 1
        plan.append(caps)
    return plan


def _episode_job(args) -> dict:
    scene, caps, seed, index, scale, pool, prefix = args
    rng = np.random.default_rng([seed, 1, index])
    episode_id = f"{prefix}-{index:06d}"
    for _ in range(5):
        try:
            return build_episode(scene, caps, rng, episode_id, scale, pool).to_dict()
        except EpisodeGenerationError as exc:
            log.info("episode %s: redrawing capabilities after %s", episode_id, exc)
            caps = sample_capabilities(rng)
            while _count_vln(caps) > 1:
                caps = sample_capabilities(rng)
    raise EpisodeGenerationError(f"{episode_id}: could not be generated")


def generate_episodes(scenes: Sequence[Scene], n_episodes: int, seed: int,
                      scale: float = DEFAULT_SCALE, workers: int = 1,
                      pool: dict | None = None, id_prefix: str = "ep") -> list[Episode]:
    """Episode ``i`` lives in ``scenes[i % len(scenes)]`` and draws from an RNG keyed by (seed, i).

    Output is independent of ``workers``.
    """
    pool = pool or load_template_pool()
    plan = plan_capabilities(n_episodes, seed)
    jobs = [(scenes[i % len(scenes)], plan[i], seed, i, scale, pool, id_prefix)
            for i in range(n_episodes)]
    if workers <= 1:
        dicts = [_episode_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            dicts = list(ex.map(_episode_job, jobs, chunksize=max(1, n_episodes // (4 * workers))))
    return [Episode.from_dict(d) for d in dicts]


# --------------------------------------------------------------------------
# dataset files


def dumps_episode(ep: Episode) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, **ep.to_dict()}, sort_keys=True)


def write_dataset(episodes: Sequence[Episode], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            f.write(dumps_episode(ep) + "\n")


def read_dataset(path) -> list[Episode]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
            if d.get("schema") != SCHEMA_VERSION:
                raise DatasetError(f"{path}:{lineno}: schema {d.get('schema')!r}, "
                                   f"expected {SCHEMA_VERSION}")
            try:
                out.append(Episode.from_dict(d))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: invalid episode ({exc})") from exc
    return out
