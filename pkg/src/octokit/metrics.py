"""Ordered sub-task success, oracle success and SPL bookkeeping.

Per sub-task ``j`` of an episode:

* ``OS_j`` -- some executed pose lies in ``Area_j``.
* ``S_j``  -- there are indices ``k_1 < ... < k_j`` with pose ``k_m`` in ``Area_m``.
* ``L_j``  -- shortest grid tour start -> Area_1 -> ... -> Area_j.
* ``TL_j`` -- executed arc length up to the earliest index completing the
  ordered prefix (``inf`` when ``S_j = 0``).

Executed index 0 is the start pose.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Sequence

from .env import SQRT2, Pose, Scene, _graph, geodesic_distance, steps_to_meters
from .tasks import CAPABILITIES, Capability, Episode, SubGoal

EUCLIDEAN = "euclidean"
GEODESIC = "geodesic"


def _dist(scene: Scene, p: Sequence[float], subgoal: SubGoal, metric: str) -> float:
    if metric == EUCLIDEAN:
        return math.hypot(p[0] - subgoal.target_xy[0], p[1] - subgoal.target_xy[1])
    if metric == GEODESIC:
        return geodesic_distance(scene, tuple(p[:2]), subgoal.target_xy)
    raise ValueError(f"unknown membership metric {metric!r}")


def success_area_member(scene: Scene, p: Pose, subgoal: SubGoal, metric: str = EUCLIDEAN) -> bool:
    """Closed-ball membership: ``dis(goal, p) <= success_distance``."""
    return _dist(scene, (p.x, p.y), subgoal, metric) <= subgoal.success_distance


def area_cells(scene: Scene, subgoal: SubGoal, metric: str = EUCLIDEAN) -> list[int]:
    """Flat indices of navigable cells whose centers lie in the success area."""
    res = scene.resolution
    out = []
    cells = scene.navigable_cells()
    if metric == EUCLIDEAN:
        tx, ty = subgoal.target_xy
        cx = (cells[:, 0] + 0.5) * res
        cy = (cells[:, 1] + 0.5) * res
        d = ((cx - tx) ** 2 + (cy - ty) ** 2) ** 0.5
        keep = cells[d <= subgoal.success_distance]
        return [int(j * scene.width + i) for i, j in keep]
    for i, j in cells:
        c = ((i + 0.5) * res, (j + 0.5) * res)
        if _dist(scene, c, subgoal, metric) <= subgoal.success_distance:
            out.append(int(j * scene.width + i))
    return out


def _staged_dijkstra(scene: Scene, seeds: dict[int, tuple[int, int]]) -> dict[int, tuple[int, int]]:
    """Multi-source Dijkstra carrying exact (straight, diagonal) step counts."""
    g = _graph(scene)
    indptr, indices, data = g.indptr, g.indices, g.data
    best: dict[int, tuple[int, int]] = {}
    heap = [(a + b * SQRT2, a, b, n) for n, (a, b) in seeds.items()]
    heapq.heapify(heap)
    while heap:
        v, a, b, n = heapq.heappop(heap)
        if n in best:
            continue
        best[n] = (a, b)
        for k in range(indptr[n], indptr[n + 1]):
            m = int(indices[k])
            if m in best:
                continue
            if data[k] == 1.0:
                na, nb = a + 1, b
            else:
                na, nb = a, b + 1
            heapq.heappush(heap, (na + nb * SQRT2, na, nb, m))
    return best


def shortest_tour_lengths(scene: Scene, episode: Episode, metric: str = EUCLIDEAN) -> list[float]:
    """``L_j`` for every sub-task: shortest ordered tour through the success areas."""
    start = scene.cell_of(episode.start.x, episode.start.y)
    seeds = {start[1] * scene.width + start[0]: (0, 0)}
    out = []
    for sg in episode.subgoals:
        if not seeds:
            out.append(math.inf)
            continue
        reach = _staged_dijkstra(scene, seeds)
        cells = [c for c in area_cells(scene, sg, metric) if c in reach]
        if not cells:
            seeds = {}
            out.append(math.inf)
            continue
        pairs = {c: reach[c] for c in cells}
        a, b = min(pairs.values(), key=lambda ab: ab[0] + ab[1] * SQRT2)
        out.append(steps_to_meters(a, b, scene.resolution))
        seeds = pairs
    return out


@dataclass(frozen=True)
class EvalOutcome:
    capabilities: tuple[Capability, ...]
    OS: tuple[int, ...]
    S: tuple[int, ...]
    L: tuple[float, ...]
    TL: tuple[float, ...]

    @property
    def l(self) -> tuple[float, ...]:
        prev = (0.0,) + self.L[:-1]
        return tuple(a - b for a, b in zip(self.L, prev))

    @property
    def tl(self) -> tuple[float, ...]:
        prev = (0.0,) + self.TL[:-1]
        return tuple(a - b for a, b in zip(self.TL, prev))

    @property
    def success(self) -> int:
        return self.S[-1]

    @property
    def oracle_success(self) -> int:
        return self.OS[-1]

    def to_dict(self) -> dict:
        return {
            "capabilities": [c.value for c in self.capabilities],
            "OS": list(self.OS),
            "S": list(self.S),
            "L": list(self.L),
            "TL": [t if math.isfinite(t) else "inf" for t in self.TL],
        }


def cumulative_arc(executed: Sequence[Pose]) -> list[float]:
    out = [0.0]
    total = 0.0
    for p, q in zip(executed[:-1], executed[1:]):
        total += math.hypot(q.x - p.x, q.y - p.y)
        out.append(total)
    return out


def eval_episode(scene: Scene, episode: Episode, executed: Sequence[Pose],
                 metric: str = EUCLIDEAN, tour: Sequence[float] | None = None) -> EvalOutcome:
    """Score one executed trajectory against the episode's ordered sub-goals."""
    if not executed:
        raise ValueError("executed trajectory must contain at least the start pose")
    subgoals = episode.subgoals
    member = [[success_area_member(scene, p, sg, metric) for p in executed] for sg in subgoals]
    OS = tuple(int(any(row)) for row in member)
    arc = cumulative_arc(executed)
    S, TL = [], []
    k = -1
    for row in member:
        if k is not None:
            k = next((i for i in range(k + 1, len(executed)) if row[i]), None)
        if k is None:
            S.append(0)
            TL.append(math.inf)
        else:
            S.append(1)
            TL.append(arc[k])
    L = tuple(tour) if tour is not None else tuple(shortest_tour_lengths(scene, episode, metric))
    return EvalOutcome(episode.capabilities, OS, tuple(S), L, tuple(TL))


def spl_term(s: int, l: float, tl: float) -> float:
    """``S * l / max(l, tl)``; failed sub-tasks contribute 0 so infinite lengths never leak."""
    if not s or not math.isfinite(l):
        return 0.0
    denom = max(l, tl)
    if denom == 0.0:
        return 1.0
    return l / denom


def aggregate(outcomes: Sequence[EvalOutcome], episodes: Sequence[Episode] | None = None) -> dict:
    """SR/SPL/OSR per capability over all sub-tasks, and overall over final sub-tasks.

    Capabilities with no sub-tasks are omitted rather than reported as zero.
    """
    if episodes is not None and len(episodes) != len(outcomes):
        raise ValueError("outcomes and episodes are not aligned")
    sums = {c: [0, 0.0, 0.0, 0.0] for c in CAPABILITIES}  # count, S, SPL, OS
    n = len(outcomes)
    tot_s = tot_spl = tot_os = 0.0
    for out in outcomes:
        ls, tls = out.l, out.tl
        for j, cap in enumerate(out.capabilities):
            acc = sums[cap]
            acc[0] += 1
            acc[1] += out.S[j]
            acc[2] += spl_term(out.S[j], ls[j], tls[j])
            acc[3] += out.OS[j]
        tot_s += out.S[-1]
        tot_os += out.OS[-1]
        tot_spl += spl_term(out.S[-1], out.L[-1], out.TL[-1])
    per = {}
    for cap, (cnt, s, spl, os_) in sums.items():
        if cnt:
            per[cap.value] = {"SR": s / cnt, "SPL": spl / cnt, "OSR": os_ / cnt, "n": cnt}
    overall = {
        "SR": tot_s / n if n else 0.0,
        "SPL": tot_spl / n if n else 0.0,
        "OSR": tot_os / n if n else 0.0,
        "n": n,
    }
    return {"overall": overall, "per_capability": per}


def oracle_eval(scene: Scene, episode: Episode, metric: str = EUCLIDEAN) -> EvalOutcome:
    """Evaluate the episode's own ground-truth trajectory."""
    return eval_episode(scene, episode, episode.gt_poses, metric)
