"""Continuous-pose navigation over procedural occupancy-grid scenes.

Coordinates are meters in the scene frame.  Cell ``(i, j)`` covers
``[i*res, (i+1)*res) x [j*res, (j+1)*res)`` and is stored at ``grid[j, i]``.
Headings are compass-style degrees: 0 points along +y, 90 along +x, and
turning right increases the heading.
"""

from __future__ import annotations

import enum
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

CAMERA_HEIGHT = 1.25
SQRT2 = math.sqrt(2.0)
UNREACHABLE = math.inf

CATEGORIES = (
    "chair", "table", "sofa", "bed", "plant", "tv",
    "cabinet", "lamp", "desk", "shelf", "toilet", "sink",
)

FORWARD_BINS_CM = (25, 50, 75)
TURN_BINS_DEG = (15, 30, 45, 90)

PATCH_SIZE = 11
DISTANCE_BIN_EDGES = (1.0, 2.0, 3.5)
N_BEARING_BINS = 8
N_NEAREST = 3
OBSERVE_RANGE = 5.0
FEATURE_DIM = (
    PATCH_SIZE * PATCH_SIZE
    + len(CATEGORIES)
    + N_NEAREST * (len(DISTANCE_BIN_EDGES) + 1 + N_BEARING_BINS)
)


class SceneGenerationError(RuntimeError):
    pass


class ActionKind(str, enum.Enum):
    FORWARD = "MoveForward"
    LEFT = "TurnLeft"
    RIGHT = "TurnRight"
    STOP = "Stop"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    magnitude: int | None = None

    def __post_init__(self):
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActionKind.STOP:
            if self.magnitude is not None:
                raise ValueError("Stop takes no magnitude")
        elif kind is ActionKind.FORWARD:
            if self.magnitude not in FORWARD_BINS_CM:
                raise ValueError(f"forward magnitude must be one of {FORWARD_BINS_CM} cm")
        elif self.magnitude not in TURN_BINS_DEG:
            raise ValueError(f"turn magnitude must be one of {TURN_BINS_DEG} degrees")

    @property
    def moves(self) -> bool:
        return self.kind is ActionKind.FORWARD

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        return cls(ActionKind(d["kind"]), d.get("magnitude"))

    def __str__(self) -> str:
        if self.kind is ActionKind.STOP:
            return "stop"
        unit = "cm" if self.kind is ActionKind.FORWARD else "deg"
        return f"{self.kind.value} {self.magnitude}{unit}"


STOP = Action(ActionKind.STOP)


def _norm_heading(h: float) -> float:
    h = float(h) % 360.0
    if h >= 360.0:  # -tiny % 360 rounds up to 360
        h = 0.0
    return h


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    height: float = CAMERA_HEIGHT
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite pose position ({self.x}, {self.y})")
        object.__setattr__(self, "heading", _norm_heading(self.heading))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.height, self.heading]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "Pose":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


@dataclass(frozen=True)
class SemanticObject:
    id: int
    category: str
    center: tuple[float, float]
    radius: float
    top_height: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("object radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "center": list(self.center),
            "radius": self.radius,
            "top_height": self.top_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticObject":
        return cls(int(d["id"]), d["category"], tuple(d["center"]), float(d["radius"]),
                   float(d["top_height"]))


@dataclass(frozen=True)
class SceneParams:
    width: int = 64
    height: int = 64
    resolution: float = 0.2
    n_rooms: int = 4
    n_objects: int = 16
    min_room_cells: int = 8
    door_width: tuple[int, int] = (3, 5)
    object_radius: tuple[float, float] = (0.2, 0.45)
    object_top: tuple[float, float] = (0.4, 1.6)

    def validate(self) -> None:
        if self.width < 40 or self.height < 40:
            raise ValueError("scene grid must be at least 40x40")
        if not 0.05 <= self.resolution <= 0.25:
            raise ValueError("resolution must lie in [0.05, 0.25] m")
        if self.n_rooms < 2:
            raise ValueError("need at least 2 rooms")
        if self.n_objects < 4:
            raise ValueError("need at least 4 objects")
        if self.door_width[0] < 3:
            raise ValueError("doors must be at least 3 cells wide")


@dataclass(frozen=True, eq=False)
class Scene:
    grid: np.ndarray
    resolution: float
    objects: tuple[SemanticObject, ...]
    seed: int
    doors: tuple[tuple[int, int], ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=bool)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "doors", tuple(tuple(d) for d in self.doors))

    @property
    def scene_id(self) -> str:
        return f"scene-{self.seed}"

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return (self.width * self.resolution, self.height * self.resolution)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.resolution == other.resolution
            and self.objects == other.objects
            and self.doors == other.doors
            and np.array_equal(self.grid, other.grid)
        )

    __hash__ = None

    def __reduce__(self):
        # the geodesic cache is rebuilt lazily on the other side
        return (Scene, (np.array(self.grid), self.resolution, self.objects, self.seed, self.doors))

    def object_by_id(self, oid: int) -> SemanticObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution)))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return ((cell[0] + 0.5) * self.resolution, (cell[1] + 0.5) * self.resolution)

    def in_bounds_cell(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def in_bounds(self, x: float, y: float) -> bool:
        return self.in_bounds_cell(self.cell_of(x, y))

    def navigable_cell(self, cell: tuple[int, int]) -> bool:
        return self.in_bounds_cell(cell) and bool(self.grid[cell[1], cell[0]])

    def is_navigable(self, x: float, y: float) -> bool:
        return self.navigable_cell(self.cell_of(x, y))

    def navigable_cells(self) -> np.ndarray:
        """(n, 2) array of navigable (i, j) cells in row-major order."""
        js, is_ = np.nonzero(self.grid)
        return np.stack([is_, js], axis=1)


# --------------------------------------------------------------------------
# procedural generation


def footprint_cells(scene_or_res, obj: SemanticObject, shape: tuple[int, int] | None = None) -> set:
    """Cells whose centers lie within the object's radius, plus the center cell."""
    if isinstance(scene_or_res, Scene):
        res, shape = scene_or_res.resolution, scene_or_res.grid.shape
    else:
        res = scene_or_res
    cx, cy = obj.center
    r = obj.radius
    cells = {(int(math.floor(cx / res)), int(math.floor(cy / res)))}
    i0, i1 = int(math.floor((cx - r) / res)), int(math.floor((cx + r) / res))
    j0, j1 = int(math.floor((cy - r) / res)), int(math.floor((cy + r) / res))
    for j in range(j0, j1 + 1):
        for i in range(i0, i1 + 1):
            px, py = (i + 0.5) * res, (j + 0.5) * res
            if (px - cx) ** 2 + (py - cy) ** 2 <= r * r:
                cells.add((i, j))
    if shape is not None:
        h, w = shape
        cells = {c for c in cells if 0 <= c[0] < w and 0 <= c[1] < h}
    return cells


class _Retry(Exception):
    pass


def _split_room(rng, grid, room, doors, params):
    x0, y0, x1, y1 = room
    w, h = x1 - x0 + 1, y1 - y0 + 1
    m = params.min_room_cells
    vertical = w > h if w != h else bool(rng.integers(2))
    if vertical:
        lo, hi, span = x0 + m, x1 - m, (y0, y1)
    else:
        lo, hi, span = y0 + m, y1 - m, (x0, x1)
    if hi < lo:
        return None
    positions = []
    for p in range(lo, hi + 1):
        # keep split walls clear of doors in the perpendicular boundary walls
        blocked = False
        for d in doors:
            orient, fixed, dlo, dhi = d
            if vertical and orient == "h" and fixed in (y0 - 1, y1 + 1) and dlo - 1 <= p <= dhi + 1:
                blocked = True
            if not vertical and orient == "v" and fixed in (x0 - 1, x1 + 1) and dlo - 1 <= p <= dhi + 1:
                blocked = True
        if not blocked:
            positions.append(p)
    if not positions:
        return None
    p = int(positions[rng.integers(len(positions))])
    dw = int(rng.integers(params.door_width[0], params.door_width[1] + 1))
    a, b = span
    if b - a + 1 < dw + 2:
        return None
    dlo = int(rng.integers(a + 1, b - dw + 1))
    dhi = dlo + dw - 1
    if vertical:
        grid[y0:y1 + 1, p] = False
        grid[dlo:dhi + 1, p] = True
        doors.append(("v", p, dlo, dhi))
        return (x0, y0, p - 1, y1), (p + 1, y0, x1, y1)
    grid[p, x0:x1 + 1] = False
    grid[p, dlo:dhi + 1] = True
    doors.append(("h", p, dlo, dhi))
    return (x0, y0, x1, p - 1), (x0, p + 1, x1, y1)


def _door_cells(doors) -> list[tuple[int, int]]:
    cells = []
    for orient, fixed, lo, hi in doors:
        for t in range(lo, hi + 1):
            cells.append((fixed, t) if orient == "v" else (t, fixed))
    return cells


def _build_scene(rng, params: SceneParams):
    W, H = params.width, params.height
    res = params.resolution
    grid = np.ones((H, W), dtype=bool)
    grid[0, :] = grid[-1, :] = False
    grid[:, 0] = grid[:, -1] = False
    rooms = [(1, 1, W - 2, H - 2)]
    doors: list = []
    while len(rooms) < params.n_rooms:
        order = sorted(range(len(rooms)), key=lambda k: -(
            (rooms[k][2] - rooms[k][0] + 1) * (rooms[k][3] - rooms[k][1] + 1)))
        for k in order:
            halves = _split_room(rng, grid, rooms[k], doors, params)
            if halves is not None:
                rooms[k:k + 1] = list(halves)
                break
        else:
            raise _Retry("no splittable room")

    door_cells = _door_cells(doors)
    keep_clear = np.zeros_like(grid)
    for i, j in door_cells:
        keep_clear[max(0, j - 2):j + 3, max(0, i - 2):i + 3] = True

    objects: list[SemanticObject] = []
    for oid in range(params.n_objects):
        for _ in range(60):
            x0, y0, x1, y1 = rooms[int(rng.integers(len(rooms)))]
            r = float(rng.uniform(*params.object_radius))
            top = float(rng.uniform(*params.object_top))
            margin = r + res
            lo_x, hi_x = x0 * res + margin, (x1 + 1) * res - margin
            lo_y, hi_y = y0 * res + margin, (y1 + 1) * res - margin
            if hi_x <= lo_x or hi_y <= lo_y:
                continue
            cx, cy = float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))
            cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            obj = SemanticObject(oid, cat, (cx, cy), r, top)
            cells = footprint_cells(res, obj, grid.shape)
            if any(keep_clear[j, i] or not grid[j, i] for i, j in cells):
                continue
            if any(math.dist(obj.center, o.center) < r + o.radius + 2 * res for o in objects):
                continue
            for i, j in cells:
                grid[j, i] = False
            objects.append(obj)
            break
        else:
            raise _Retry("object placement failed")

    labels, n = ndimage.label(grid)
    door_labels = {int(labels[j, i]) for i, j in door_cells}
    if len(door_labels) != 1 or 0 in door_labels:
        raise _Retry("doors not connected")
    main = door_labels.pop()
    grid = labels == main
    if grid.sum() < 100:
        raise _Retry("navigable component too small")
    for o in objects:
        if not _object_reachable(grid, res, o):
            raise _Retry("object not adjacent to navigable space")
    return grid, objects, doors


def _object_reachable(grid, res, obj) -> bool:
    cx, cy = obj.center
    reach = obj.radius + 1.5 * res
    i0, i1 = int((cx - reach) / res), int((cx + reach) / res) + 1
    j0, j1 = int((cy - reach) / res), int((cy + reach) / res) + 1
    for j in range(max(0, j0), min(grid.shape[0], j1 + 1)):
        for i in range(max(0, i0), min(grid.shape[1], i1 + 1)):
            if grid[j, i] and math.hypot((i + 0.5) * res - cx, (j + 0.5) * res - cy) <= reach:
                return True
    return False


def gen_scene(seed: int, params: SceneParams | None = None) -> Scene:
    """Generate a scene of rooms split by walls with door gaps and furniture.

    Deterministic in ``seed``.  The returned navigable mask is a single
    4-connected component containing every door cell.
    """
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    reasons = []
    for _ in range(100):
        try:
            grid, objects, doors = _build_scene(rng, params)
        except _Retry as exc:
            reasons.append(str(exc))
            continue
        door_cells = tuple(_door_cells(doors))
        return Scene(grid, params.resolution, tuple(objects), int(seed), door_cells)
    raise SceneGenerationError(
        f"seed {seed}: connectivity not achieved in 100 attempts (last: {reasons[-1]})")


# --------------------------------------------------------------------------
# geodesics

_NEIGHBORS = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
              (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2))


def _graph(scene: Scene) -> csr_matrix:
    g = scene._cache.get("graph")
    if g is not None:
        return g
    H, W = scene.grid.shape
    nav = scene.grid
    rows, cols, wts = [], [], []
    idx = np.arange(H * W).reshape(H, W)
    for di, dj, w in _NEIGHBORS:
        # source cells (j, i) -> (j + dj, i + di)
        js = slice(max(0, -dj), H - max(0, dj))
        is_ = slice(max(0, -di), W - max(0, di))
        jd = slice(max(0, dj), H - max(0, -dj))
        id_ = slice(max(0, di), W - max(0, -di))
        ok = np.zeros_like(nav)
        ok[js, is_] = nav[js, is_] & nav[jd, id_]
        if di and dj:
            # no corner cutting: both orthogonal neighbours must be free
            side_a = np.zeros_like(nav)
            side_b = np.zeros_like(nav)
            side_a[js, is_] = nav[js, id_]
            side_b[js, is_] = nav[jd, is_]
            ok &= side_a & side_b
        s = idx[ok]
        rows.append(s)
        cols.append(s + dj * W + di)
        wts.append(np.full(s.shape, w))
    g = csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(H * W, H * W))
    scene._cache["graph"] = g
    return g


def _field(scene: Scene, cell: tuple[int, int]):
    """Distances (in cell steps) and predecessors from ``cell`` to every cell."""
    cache = scene._cache.setdefault("fields", OrderedDict())
    key = (cell[0], cell[1])
    hit = cache.get(key)
    if hit is not None:
        cache.move_to_end(key)
        return hit
    src = cell[1] * scene.width + cell[0]
    dist, pred = dijkstra(_graph(scene), directed=True, indices=src, return_predecessors=True)
    out = (dist, pred)
    cache[key] = out
    if len(cache) > 512:
        cache.popitem(last=False)
    return out


def canonical_steps(v: float) -> tuple[int, int]:
    """Decompose a step-unit path length into (straight, diagonal) step counts."""
    bmax = int(v / SQRT2 + 1e-9)
    b = np.arange(bmax + 1)
    rest = v - b * SQRT2
    a = np.rint(rest)
    k = int(np.argmin(np.abs(rest - a)))
    return int(a[k]), int(b[k])


def steps_to_meters(a: int, b: int, res: float) -> float:
    return res * (a + b * SQRT2)


def nearest_navigable_cell(scene: Scene, x: float, y: float) -> tuple[int, int]:
    cell = scene.cell_of(x, y)
    if scene.navigable_cell(cell):
        return cell
    cells = scene._cache.get("nav_cells")
    if cells is None:
        cells = scene.navigable_cells()
        scene._cache["nav_cells"] = cells
    centers = (cells + 0.5) * scene.resolution
    d2 = (centers[:, 0] - x) ** 2 + (centers[:, 1] - y) ** 2
    k = int(np.argmin(d2))
    return (int(cells[k, 0]), int(cells[k, 1]))


def cell_geodesic(scene: Scene, a: tuple[int, int], b: tuple[int, int]) -> float:
    if a == b:
        return 0.0
    # either direction yields the same canonical (straight, diagonal) split, so
    # reuse whichever field is cached
    fields = scene._cache.get("fields", {})
    if b in fields and a not in fields:
        src, dst = b, a
    elif a in fields:
        src, dst = a, b
    else:
        src, dst = (a, b) if (a[1], a[0]) <= (b[1], b[0]) else (b, a)
    dist, _ = _field(scene, src)
    v = dist[dst[1] * scene.width + dst[0]]
    if not np.isfinite(v):
        return UNREACHABLE
    return steps_to_meters(*canonical_steps(float(v)), scene.resolution)


def geodesic_distance(scene: Scene, a: Pose | tuple, b: Pose | tuple) -> float:
    """Shortest 8-connected grid path length between the nearest navigable cells.

    Returns ``UNREACHABLE`` (``math.inf``) when the cells are disconnected.
    """
    ax, ay = (a.x, a.y) if isinstance(a, Pose) else a[:2]
    bx, by = (b.x, b.y) if isinstance(b, Pose) else b[:2]
    if not (scene.in_bounds(ax, ay) and scene.in_bounds(bx, by)):
        raise ValueError("geodesic endpoints must lie inside the grid")
    return cell_geodesic(scene, nearest_navigable_cell(scene, ax, ay),
                         nearest_navigable_cell(scene, bx, by))


def shortest_cell_path(scene: Scene, a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells of a shortest path from ``a`` to ``b`` inclusive; empty if unreachable."""
    if a == b:
        return [a]
    dist, pred = _field(scene, a)
    W = scene.width
    t = b[1] * W + b[0]
    if not np.isfinite(dist[t]):
        return []
    out = []
    s = a[1] * W + a[0]
    while t != s:
        out.append((int(t % W), int(t // W)))
        t = int(pred[t])
    out.append(a)
    return out[::-1]


def path_length(points: Sequence[Sequence[float]]) -> float:
    total = 0.0
    for p, q in zip(points[:-1], points[1:]):
        total += math.hypot(q[0] - p[0], q[1] - p[1])
    return total


# --------------------------------------------------------------------------
# kinematics


def heading_vector(heading: float) -> tuple[float, float]:
    r = math.radians(heading)
    return (math.sin(r), math.cos(r))


def step(scene: Scene, pose: Pose, action: Action) -> Pose:
    """Apply one action; forward motion stops at the last free sample."""
    kind = action.kind
    if kind is ActionKind.STOP:
        return pose
    if kind is ActionKind.LEFT:
        return Pose(pose.x, pose.y, pose.height, pose.heading - action.magnitude)
    if kind is ActionKind.RIGHT:
        return Pose(pose.x, pose.y, pose.height, pose.heading + action.magnitude)
    return move_forward(scene, pose, action.magnitude / 100.0)


def move_forward(scene: Scene, pose: Pose, dist: float) -> Pose:
    dx, dy = heading_vector(pose.heading)
    inc = scene.resolution / 2.0
    n = int(math.ceil(dist / inc - 1e-12))
    free = 0.0
    for k in range(1, n + 1):
        t = min(k * inc, dist)
        if not scene.is_navigable(pose.x + t * dx, pose.y + t * dy):
            break
        free = t
    if free == 0.0:
        return pose
    return Pose(pose.x + free * dx, pose.y + free * dy, pose.height, pose.heading)


# --------------------------------------------------------------------------
# visibility and frame coverage


def traverse_cells(x0: float, y0: float, x1: float, y1: float, res: float) -> Iterable[tuple[int, int]]:
    """Cells crossed by the segment (x0,y0)-(x1,y1), in order (grid DDA)."""
    i, j = int(math.floor(x0 / res)), int(math.floor(y0 / res))
    ie, je = int(math.floor(x1 / res)), int(math.floor(y1 / res))
    yield (i, j)
    dx, dy = x1 - x0, y1 - y0
    step_i = 1 if dx > 0 else -1
    step_j = 1 if dy > 0 else -1
    if dx != 0:
        nx = (i + (step_i > 0)) * res
        t_max_x = (nx - x0) / dx
        t_dx = res / abs(dx)
    else:
        t_max_x = t_dx = math.inf
    if dy != 0:
        ny = (j + (step_j > 0)) * res
        t_max_y = (ny - y0) / dy
        t_dy = res / abs(dy)
    else:
        t_max_y = t_dy = math.inf
    n = abs(ie - i) + abs(je - j)
    for _ in range(n):
        if t_max_x < t_max_y:
            i += step_i
            t_max_x += t_dx
        else:
            j += step_j
            t_max_y += t_dy
        yield (i, j)


def visible(scene: Scene, pose: Pose, obj: SemanticObject) -> bool:
    """True iff the segment to the object center only crosses free or own-footprint cells."""
    own = _footprint(scene, obj)
    cx, cy = obj.center
    for cell in traverse_cells(pose.x, pose.y, cx, cy, scene.resolution):
        if cell in own:
            continue
        if not scene.navigable_cell(cell):
            return False
    return True


def _footprint(scene: Scene, obj: SemanticObject) -> set:
    cache = scene._cache.setdefault("footprints", {})
    fp = cache.get(obj.id)
    if fp is None or cache.get(("obj", obj.id)) != obj:
        fp = footprint_cells(scene, obj)
        cache[obj.id] = fp
        cache[("obj", obj.id)] = obj
    return fp


def _wall_distance(scene: Scene, x: float, y: float, ux: float, uy: float,
                   max_t: float, own: set) -> float:
    """Horizontal distance to the first occluding cell along unit direction (ux, uy)."""
    res = scene.resolution
    grid = scene.grid
    h, w = grid.shape

    def blocked(i, j):
        return (i, j) not in own and not (0 <= i < w and 0 <= j < h and grid[j, i])

    x1, y1 = x + ux * max_t, y + uy * max_t
    i, j = int(math.floor(x / res)), int(math.floor(y / res))
    if blocked(i, j):
        return 0.0
    step_i = 1 if ux > 0 else -1
    step_j = 1 if uy > 0 else -1
    t_max_x = ((i + (step_i > 0)) * res - x) / ux if ux != 0 else math.inf
    t_max_y = ((j + (step_j > 0)) * res - y) / uy if uy != 0 else math.inf
    t_dx = res / abs(ux) if ux != 0 else math.inf
    t_dy = res / abs(uy) if uy != 0 else math.inf
    n = abs(int(math.floor(x1 / res)) - i) + abs(int(math.floor(y1 / res)) - j)
    for _ in range(n):
        if t_max_x < t_max_y:
            t = t_max_x
            i += step_i
            t_max_x += t_dx
        else:
            t = t_max_y
            j += step_j
            t_max_y += t_dy
        if blocked(i, j):
            return t
    return math.inf


def camera_pitch(camera: Pose, obj: SemanticObject) -> float:
    """Elevation angle (deg) from the camera to the object's bounding-box centroid."""
    d = math.dist((camera.x, camera.y), obj.center)
    return math.degrees(math.atan2(obj.top_height / 2.0 - camera.height, d))


def bearing_to(pose_xy: Sequence[float], target_xy: Sequence[float]) -> float:
    """Compass bearing (deg, [0,360)) from one point to another."""
    return _norm_heading(math.degrees(math.atan2(target_xy[0] - pose_xy[0],
                                                 target_xy[1] - pose_xy[1])))


def relative_bearing(pose: Pose, target_xy: Sequence[float]) -> float:
    """Bearing of the target relative to the pose heading, in (-180, 180]; negative is left."""
    rel = bearing_to(pose.xy, target_xy) - pose.heading
    rel = (rel + 180.0) % 360.0 - 180.0
    return 180.0 if rel == -180.0 else rel


def frame_coverage(scene: Scene, camera: Pose, obj: SemanticObject,
                   hfov: float = 90.0, vfov: float = 60.0, nx: int = 32, ny: int = 24) -> float:
    """Fraction of a uniform angular ray fan whose first hit is the object's cylinder.

    The fan is centred on the camera heading and on the elevation towards the
    object's centroid.  Non-navigable cells outside the object's footprint are
    full-height occluders; rays reaching the floor first are misses.
    """
    own = _footprint(scene, obj)
    pitch0 = camera_pitch(camera, obj)
    yaw_off = (np.arange(nx) + 0.5) / nx * hfov - hfov / 2.0
    pitch_off = (np.arange(ny) + 0.5) / ny * vfov - vfov / 2.0
    yaw = camera.heading + yaw_off[None, :].repeat(ny, 0)
    pitch = pitch0 + pitch_off[:, None].repeat(nx, 1)
    # fold pitches past the zenith/nadir back onto the sphere
    over = pitch > 90.0
    under = pitch < -90.0
    pitch = np.where(over, 180.0 - pitch, np.where(under, -180.0 - pitch, pitch))
    yaw = np.where(over | under, yaw + 180.0, yaw)
    yaw = np.mod(yaw, 360.0).ravel()
    pitch = np.clip(pitch.ravel(), -89.999, 89.999)

    cx, cy = obj.center
    r, top, h = obj.radius, obj.top_height, camera.height
    max_t = math.dist(camera.xy, obj.center) + r + 2 * scene.resolution
    uniq, inv = np.unique(np.round(yaw, 9), return_inverse=True)
    t_in = np.full(uniq.shape, np.nan)
    t_out = np.full(uniq.shape, np.nan)
    t_wall = np.empty(uniq.shape)
    ox, oy = camera.x - cx, camera.y - cy
    c = ox * ox + oy * oy - r * r
    for k, yw in enumerate(uniq):
        ux, uy = heading_vector(float(yw))
        b = ox * ux + oy * uy
        disc = b * b - c
        t_wall[k] = math.inf
        if disc < 0:
            continue
        sq = math.sqrt(disc)
        lo, hi = -b - sq, -b + sq
        if hi < 0:
            continue
        t_in[k], t_out[k] = max(lo, 0.0), hi
        # occluders past the cylinder exit cannot block a hit, so the ray stops there
        t_wall[k] = _wall_distance(scene, camera.x, camera.y, ux, uy, min(max_t, hi + scene.resolution), own)
    tin, tout, twall = t_in[inv], t_out[inv], t_wall[inv]
    slope = np.tan(np.radians(pitch))
    with np.errstate(invalid="ignore", divide="ignore"):
        z_in = h + slope * tin
        side = (z_in >= 0.0) & (z_in <= top)
        cap_t = (top - h) / slope
        cap = (z_in > top) & (slope < 0) & (cap_t <= tout)
        t_hit = np.where(side, tin, np.where(cap, cap_t, np.inf))
        hit = np.isfinite(tin) & np.isfinite(t_hit) & (t_hit < twall)
    return float(hit.sum()) / float(nx * ny)


# --------------------------------------------------------------------------
# observations


def _rot_basis(heading: float):
    r = math.radians(heading)
    s, c = round(math.sin(r), 12), round(math.cos(r), 12)
    return (s, c), (c, -s)  # forward, right


_OFFS = np.arange(PATCH_SIZE // 2, -PATCH_SIZE // 2, -1)  # +5 .. -5


def occupancy_patch(scene: Scene, pose: Pose) -> np.ndarray:
    """Egocentric occupancy (1 = blocked); row 0 is farthest ahead, column 0 leftmost."""
    ci, cj = scene.cell_of(pose.x, pose.y)
    (fx, fy), (rx, ry) = _rot_basis(pose.heading)
    f = _OFFS[:, None].astype(float)
    rt = -_OFFS[None, :].astype(float)
    px = ci + 0.5 + f * fx + rt * rx
    py = cj + 0.5 + f * fy + rt * ry
    ii = np.floor(px).astype(int)
    jj = np.floor(py).astype(int)
    inside = (ii >= 0) & (ii < scene.width) & (jj >= 0) & (jj < scene.height)
    occ = np.ones((PATCH_SIZE, PATCH_SIZE))
    occ[inside] = (~scene.grid[jj[inside], ii[inside]]).astype(float)
    return occ


def visible_objects(scene: Scene, pose: Pose, max_range: float = OBSERVE_RANGE):
    """(object, distance, relative bearing) for visible objects, nearest first."""
    out = []
    for o in scene.objects:
        d = math.dist(pose.xy, o.center)
        if d > max_range or not visible(scene, pose, o):
            continue
        out.append((o, d, relative_bearing(pose, o.center)))
    out.sort(key=lambda t: (t[1], t[0].id))
    return out


def _distance_bin(d: float) -> int:
    for k, edge in enumerate(DISTANCE_BIN_EDGES):
        if d < edge:
            return k
    return len(DISTANCE_BIN_EDGES)


def _bearing_bin(rel: float) -> int:
    width = 360.0 / N_BEARING_BINS
    return int(((rel + width / 2.0) % 360.0) // width) % N_BEARING_BINS


def observe(scene: Scene, pose: Pose) -> np.ndarray:
    """Feature vector: occupancy patch ++ category histogram ++ nearest-object bins."""
    patch = occupancy_patch(scene, pose).ravel()
    hist = np.zeros(len(CATEGORIES))
    nearest = np.zeros((N_NEAREST, len(DISTANCE_BIN_EDGES) + 1 + N_BEARING_BINS))
    vis = visible_objects(scene, pose)
    for o, _, _ in vis:
        hist[CATEGORIES.index(o.category)] += 1.0
    for k, (o, d, rel) in enumerate(vis[:N_NEAREST]):
        nearest[k, _distance_bin(d)] = 1.0
        nearest[k, len(DISTANCE_BIN_EDGES) + 1 + _bearing_bin(rel)] = 1.0
    return np.concatenate([patch, hist, nearest.ravel()])


# --------------------------------------------------------------------------
# serialization


def _rle(mask: np.ndarray) -> list[int]:
    flat = mask.ravel()
    runs = []
    cur, n = False, 0
    for v in flat:
        if bool(v) == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = not cur, 1
    runs.append(n)
    return runs


def _unrle(runs: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    pos, cur = 0, False
    for n in runs:
        if cur:
            out[pos:pos + n] = True
        pos += n
        cur = not cur
    if pos != size:
        raise ValueError(f"RLE covers {pos} cells, expected {size}")
    return out


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "resolution": scene.resolution,
        "width": scene.width,
        "height": scene.height,
        "navigable_rle": _rle(scene.grid),
        "objects": [o.to_dict() for o in scene.objects],
        "doors": [list(d) for d in scene.doors],
    }


def scene_from_dict(d: dict) -> Scene:
    w, h = int(d["width"]), int(d["height"])
    grid = _unrle(d["navigable_rle"], w * h).reshape(h, w)
    objs = tuple(SemanticObject.from_dict(o) for o in d["objects"])
    return Scene(grid, float(d["resolution"]), objs, int(d["seed"]),
                 tuple(tuple(c) for c in d.get("doors", ())))


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def loads_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))


def write_scenes(scenes: Sequence[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            f.write(dumps_scene(s) + "\n")


def read_scenes(path) -> dict[str, Scene]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                s = loads_scene(line)
                out[s.scene_id] = s
    return out
