"""Context features fed to the policy, shared by training and rollout.

The tracker follows an agent through an episode and encodes, per step:

* the current observation and the mean of the last 16 observations;
* a hashed bag of instruction words;
* one slot per sub-goal (capability, done/current flags, egocentric target);
* the goal signature of the current sub-goal (zero when it has none);
* coarse egocentric bearing and distance bins to the current target;
* prompt mode, an all-done flag, the previous action kind and a blocked flag.

Sub-goal targets are taken as grounded (what a perception stack would
localize) and the pose as known from odometry.
"""

from __future__ import annotations

import math
import re
import zlib
from collections import deque
from typing import Sequence

import numpy as np

from .env import FEATURE_DIM, Action, ActionKind, Pose, Scene, observe, relative_bearing
from .tasks import CAPABILITIES, Episode

MAX_SLOTS = 5
HISTORY = 16
BOW_DIM = 32
SLOT_DIM = len(CAPABILITIES) + 6
N_TARGET_BEARINGS = 12
TARGET_DISTANCE_EDGES = (0.5, 1.0, 2.0, 4.0)
TARGET_DIM = N_TARGET_BEARINGS + len(TARGET_DISTANCE_EDGES) + 1
MODES = ("direct", "tba")
ACTION_KINDS = tuple(ActionKind)
FLAG_DIM = len(MODES) + 1 + len(ACTION_KINDS) + 1
CONTEXT_DIM = 3 * FEATURE_DIM + BOW_DIM + MAX_SLOTS * SLOT_DIM + TARGET_DIM + FLAG_DIM

_WORD = re.compile(r"[a-z]+")


def instruction_bow(text: str) -> np.ndarray:
    """Hashed, L1-normalized bag of lowercase words."""
    v = np.zeros(BOW_DIM)
    for w in _WORD.findall(text.lower()):
        v[zlib.crc32(w.encode()) % BOW_DIM] += 1.0
    s = v.sum()
    return v / s if s else v


def target_bins(pose: Pose, target: Sequence[float]) -> np.ndarray:
    out = np.zeros(TARGET_DIM)
    rel = relative_bearing(pose, target)
    out[int(round(rel / (360.0 / N_TARGET_BEARINGS))) % N_TARGET_BEARINGS] = 1.0
    d = math.dist(pose.xy, target)
    out[N_TARGET_BEARINGS + int(np.searchsorted(TARGET_DISTANCE_EDGES, d, side="right"))] = 1.0
    return out


class ContextTracker:
    """Progress and observation history of one agent in one episode."""

    def __init__(self, scene: Scene, episode: Episode, history: int = HISTORY):
        if len(episode.subgoals) > MAX_SLOTS:
            raise ValueError(f"at most {MAX_SLOTS} sub-goals are supported")
        self.scene = scene
        self.episode = episode
        self.pose = episode.start
        self.history: deque = deque(maxlen=history)
        self.done = 0
        self.last_action: Action | None = None
        self.blocked = False
        self.bow = instruction_bow(episode.instruction_text)
        self._obs = observe(scene, self.pose)
        self._advance()

    @property
    def all_done(self) -> bool:
        return self.done >= len(self.episode.subgoals)

    @property
    def current(self):
        return None if self.all_done else self.episode.subgoals[self.done]

    def _advance(self) -> None:
        # at most one sub-goal per pose, matching ordered-success bookkeeping
        sg = self.current
        if sg is not None and math.dist(self.pose.xy, sg.target_xy) <= sg.success_distance:
            self.done += 1

    def step(self, action: Action, new_pose: Pose) -> None:
        self.history.append(self._obs)
        self.blocked = action.moves and new_pose.xy == self.pose.xy
        self.last_action = action
        self.pose = new_pose
        self._obs = observe(self.scene, new_pose)
        self._advance()

    def features(self, mode: str = "direct") -> np.ndarray:
        parts = [self._obs]
        parts.append(np.mean(self.history, axis=0) if self.history else np.zeros(FEATURE_DIM))
        parts.append(self.bow)
        slots = np.zeros((MAX_SLOTS, SLOT_DIM))
        for j, sg in enumerate(self.episode.subgoals):
            row = slots[j]
            row[CAPABILITIES.index(sg.capability)] = 1.0
            k = len(CAPABILITIES)
            row[k] = 1.0
            row[k + 1] = float(j < self.done)
            row[k + 2] = float(j == self.done)
            rel = math.radians(relative_bearing(self.pose, sg.target_xy))
            row[k + 3] = math.sin(rel)
            row[k + 4] = math.cos(rel)
            row[k + 5] = min(math.dist(self.pose.xy, sg.target_xy), 10.0) / 10.0
        parts.append(slots.ravel())
        sg = self.current
        sig = np.zeros(FEATURE_DIM)
        if sg is not None and sg.goal_signature is not None:
            sig = np.asarray(sg.goal_signature, dtype=float)
        parts.append(sig)
        parts.append(target_bins(self.pose, sg.target_xy) if sg is not None else np.zeros(TARGET_DIM))
        flags = np.zeros(FLAG_DIM)
        flags[MODES.index(mode)] = 1.0
        flags[len(MODES)] = float(self.all_done)
        if self.last_action is not None:
            flags[len(MODES) + 1 + ACTION_KINDS.index(self.last_action.kind)] = 1.0
        flags[-1] = float(self.blocked)
        parts.append(flags)
        out = np.concatenate(parts)
        assert out.shape == (CONTEXT_DIM,)
        return out


def gt_transitions(episode: Episode) -> list[tuple[Action, Pose]]:
    """Each ground-truth action with the pose it leads to."""
    if len(episode.gt_poses) != len(episode.gt_actions) + 1:
        raise ValueError(f"episode {episode.id}: expected one more pose than actions")
    return list(zip(episode.gt_actions, episode.gt_poses[1:]))


def replay_contexts(scene: Scene, episode: Episode, mode: str = "direct") -> list[np.ndarray]:
    """Context features at every ground-truth step (one per gt action, Stop included)."""
    tr = ContextTracker(scene, episode)
    out = []
    for action, nxt in gt_transitions(episode):
        out.append(tr.features(mode))
        tr.step(action, nxt)
    return out
