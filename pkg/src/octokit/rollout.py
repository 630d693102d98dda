"""Closed-loop execution of a policy on episodes."""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import env
from .context import ContextTracker
from .env import Action, ActionKind, Pose, Scene
from .metrics import EUCLIDEAN, EvalOutcome, aggregate, eval_episode, shortest_tour_lengths
from .policy import PolicyParams, sample_answer
from .tasks import Episode

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REASONS = ("stopped", "max-steps", "aborted")


@dataclass(frozen=True)
class RolloutConfig:
    max_steps: int = 200
    stride: int | None = None  # None: never think
    temperature: float = 1.0
    greedy: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1 or None")


@dataclass
class RolloutRecord:
    episode_id: str
    poses: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    thinks: list = field(default_factory=list)
    reason: str = "stopped"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "episode_id": self.episode_id,
            "poses": [p.to_list() for p in self.poses],
            "actions": [a.to_dict() for a in self.actions],
            "modes": list(self.modes),
            "thinks": list(self.thinks),
            "reason": self.reason,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutRecord":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"rollout schema {d.get('schema')!r}, expected {SCHEMA_VERSION}")
        return cls(d["episode_id"], [Pose.from_list(p) for p in d["poses"]],
                   [Action.from_dict(a) for a in d["actions"]], list(d["modes"]),
                   list(d["thinks"]), d["reason"], d.get("error"))


def episode_rng(config: RolloutConfig, episode_id: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, zlib.crc32(episode_id.encode())])


def run_episode(params: PolicyParams, scene: Scene, episode: Episode,
                config: RolloutConfig = RolloutConfig()) -> RolloutRecord:
    """Execute until Stop, a decode failure, or ``max_steps`` actions.

    Steps with ``t % stride == 0`` decode in tba mode; only the Action span is
    executed and the think text is logged.
    """
    rng = episode_rng(config, episode.id)
    tr = ContextTracker(scene, episode)
    rec = RolloutRecord(episode.id, [episode.start])
    for t in range(config.max_steps):
        mode = "tba" if config.stride is not None and t % config.stride == 0 else "direct"
        smp = sample_answer(params, tr.features(mode), mode, config.temperature, rng,
                            greedy=config.greedy)
        action = smp.action
        if mode == "tba":
            rec.thinks.append({"step": t, "text": smp.think})
        if action is None:
            rec.reason = "aborted"
            rec.error = "answer could not be parsed"
            return rec
        if action.kind is ActionKind.STOP:
            rec.reason = "stopped"
            return rec
        nxt = env.step(scene, tr.pose, action)
        rec.actions.append(action)
        rec.poses.append(nxt)
        rec.modes.append(mode)
        tr.step(action, nxt)
    rec.reason = "max-steps"
    return rec


def _job(args) -> dict:
    params, scene, episode, config = args
    try:
        return run_episode(params, scene, episode, config).to_dict()
    except Exception as exc:  # recorded per episode, never fatal for the batch
        log.warning("rollout of %s failed: %s", episode.id, exc)
        return RolloutRecord(episode.id, [episode.start], reason="aborted", error=repr(exc)).to_dict()


def batch_rollout(params: PolicyParams, episodes: Sequence[Episode], scenes: Mapping[str, Scene],
                  config: RolloutConfig = RolloutConfig(), workers: int = 1) -> list[RolloutRecord]:
    """Records in dataset order, independent of ``workers``."""
    jobs = [(params, scenes[ep.scene_id], ep, config) for ep in episodes]
    if workers <= 1 or len(jobs) <= 1:
        dicts = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            dicts = list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [RolloutRecord.from_dict(d) for d in dicts]


def write_rollouts(records: Sequence[RolloutRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_rollouts(path) -> list[RolloutRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(RolloutRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad rollout record ({exc})") from exc
    return out


def evaluate(records: Sequence[RolloutRecord], episodes: Sequence[Episode],
             scenes: Mapping[str, Scene], metric: str = EUCLIDEAN) -> tuple[list[EvalOutcome], dict]:
    """Score records against their episodes (matched by id) and aggregate.

    An episode without a record counts as failed on every sub-task.
    """
    by_id = {r.episode_id: r for r in records}
    outcomes = []
    for ep in episodes:
        rec = by_id.get(ep.id)
        scene = scenes[ep.scene_id]
        if rec is None or not rec.poses:
            n = len(ep.subgoals)
            outcomes.append(EvalOutcome(ep.capabilities, (0,) * n, (0,) * n,
                                        tuple(shortest_tour_lengths(scene, ep, metric)),
                                        (math.inf,) * n))
        else:
            outcomes.append(eval_episode(scene, ep, rec.poses, metric))
    return outcomes, aggregate(outcomes, episodes)
