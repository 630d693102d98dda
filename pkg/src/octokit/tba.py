"""Think-before-action sample construction.

Three prompt stages run behind a text-generation client: a view description,
a history aggregation and a reasoning trace conditioned on the reference
action.  ``DeterministicStub`` answers every stage by rule from the structured
fields in the prompt; ``RemoteClient`` sends the same prompts to an HTTP
endpoint.  A reasoning trace is accepted only if its concluding action equals
the reference action.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Sequence

import numpy as np

from . import env
from .context import ContextTracker, gt_transitions
from .env import Action, ActionKind, Pose, Scene, relative_bearing, visible_objects
from .policy import THINK_WORDS
from .tasks import Capability, Episode

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_ROUNDS = 8
REMOTE_ATTEMPTS = 3
RETENTION_NUM, RETENTION_DEN = 3, 10
HISTORY_WINDOW = 16
MAX_THINK_WORDS = 41  # 48 tokens minus <Think> and six closing tokens
VIEW_KINDS = ("current", "history", "img-goal", "ins-goal")
EMPTY_VIEW = "an empty area"
NO_HISTORY = "no prior observations"

SYNONYMS = {
    "couch": "sofa", "armchair": "sofa", "settee": "sofa",
    "television": "tv", "monitor": "tv",
    "bookshelf": "shelf", "bookcase": "shelf", "shelves": "shelf",
    "cupboard": "cabinet", "dresser": "cabinet", "nightstand": "cabinet",
    "houseplant": "plant", "stool": "chair", "basin": "sink", "lavatory": "toilet",
    "bench": "table", "worktable": "desk", "floorlamp": "lamp",
}
for _c in env.CATEGORIES:
    SYNONYMS.setdefault(_c, _c)

NUMBER_WORDS = {
    25: "twenty-five", 50: "fifty", 75: "seventy-five",
    15: "fifteen", 30: "thirty", 45: "forty-five", 90: "ninety",
}
WORD_NUMBERS = {v: k for k, v in NUMBER_WORDS.items()}
ORDINALS = ("first", "second", "third", "fourth", "fifth")


def _phrases() -> dict:
    text = resources.files("octokit").joinpath("data/think.json").read_text(encoding="utf-8")
    return json.loads(text)


PHRASES = _phrases()


class RetryableError(RuntimeError):
    pass


class SkipSample(RuntimeError):
    pass


class TextGenClient(Protocol):
    def generate(self, prompt: str, seed: int) -> str: ...


# --------------------------------------------------------------------------
# prompt fields


def side_of(rel: float) -> str:
    if abs(rel) < 30.0:
        return "front"
    return "left" if rel < 0 else "right"


def _side_phrase(side: str) -> str:
    return "in front" if side == "front" else f"on the {side}"


def _fields(prompt: str) -> dict:
    out = {}
    for line in prompt.splitlines():
        m = re.match(r"^([A-Z][A-Z ]+):\s?(.*)$", line)
        if m:
            out[m.group(1).strip()] = m.group(2).strip()
    return out


def _call(client, prompt: str, seed: int) -> str:
    last = None
    for _ in range(REMOTE_ATTEMPTS):
        try:
            return client.generate(prompt, seed)
        except RetryableError as exc:
            last = exc
    raise SkipSample(f"text generation failed after {REMOTE_ATTEMPTS} attempts: {last}")


# --------------------------------------------------------------------------
# stage 1: view descriptions


def view_facts(scene: Scene, pose: Pose) -> list[tuple[str, str]]:
    """(category, side) of visible objects, nearest first."""
    return [(o.category, side_of(rel)) for o, _, rel in visible_objects(scene, pose)]


def render_view(facts: Sequence[tuple[str, str]], kind: str) -> str:
    if not facts:
        return EMPTY_VIEW
    items = ", ".join(f"a {c} {_side_phrase(s)}" for c, s in facts)
    if kind == "current":
        return f"You see {items}."
    if kind == "history":
        return f"Earlier you saw {items}."
    if kind == "img-goal":
        return f"The goal view shows {items}."
    target = facts[0][0]
    rest = [c for c, _ in facts[1:]]
    if rest:
        return f"The target {target} stands next to a {rest[0]}."
    return f"The target {target} stands alone."


def describe_prompt(kind: str, facts: Sequence[tuple[str, str]]) -> str:
    focus = {
        "current": "room types and spatial relationships",
        "history": "room types and distinctive landmark objects",
        "img-goal": "room types and spatial relationships",
        "ins-goal": "color characteristics and adjacent object relationships",
    }[kind]
    listing = "; ".join(f"{c}:{s}" for c, s in facts) or "none"
    return (f"[DESCRIBE VIEW]\nKIND: {kind}\nFOCUS: {focus}\nOBJECTS: {listing}\n"
            f"DRAFT: {render_view(facts, kind)}\nDescribe the view in one sentence.")


def describe_view(scene: Scene, pose: Pose, kind: str = "current", client=None, seed: int = 0) -> str:
    if kind not in VIEW_KINDS:
        raise ValueError(f"unknown view kind {kind!r}")
    facts = view_facts(scene, pose)
    if client is None:
        return render_view(facts, kind)
    return _call(client, describe_prompt(kind, facts), seed)


# --------------------------------------------------------------------------
# stage 2: history aggregation

_WORD = re.compile(r"[a-z]+(?:-[a-z]+)?")


def object_mentions(text: str) -> list[str]:
    return [SYNONYMS[w] for w in _WORD.findall(text.lower()) if w in SYNONYMS]


def retained_count(n: int) -> int:
    """``ceil(0.3 n)`` in exact integer arithmetic."""
    return -(-RETENTION_NUM * n // RETENTION_DEN)


def select_landmarks(descriptions: Sequence[str], scene: Scene | None = None) -> tuple[int, list[str]]:
    """``(n distinct objects, retained objects)``: rarest first, ties broken by recency."""
    last_seen: dict[str, int] = {}
    freq: dict[str, int] = {}
    for i, d in enumerate(descriptions):
        for m in object_mentions(d):
            last_seen[m] = i
            freq[m] = freq.get(m, 0) + 1
    if scene is not None:
        in_scene = {c: 0 for c in last_seen}
        for o in scene.objects:
            if o.category in in_scene:
                in_scene[o.category] += 1
        rarity = in_scene
    else:
        rarity = freq
    ranked = sorted(last_seen, key=lambda c: (rarity[c], -last_seen[c], c))
    return len(ranked), ranked[:retained_count(len(ranked))]


def render_history(retained: Sequence[str]) -> str:
    if not retained:
        return NO_HISTORY
    return "Remembered landmarks: " + ", ".join(retained) + "."


def aggregate_prompt(descriptions: Sequence[str], retained: Sequence[str]) -> str:
    joined = " | ".join(descriptions) or "none"
    return (f"[AGGREGATE HISTORY]\nDESCRIPTIONS: {joined}\nKEEP: {', '.join(retained) or 'none'}\n"
            f"DRAFT: {render_history(retained)}\n"
            "Merge synonyms and keep only the most iconic 30% of the objects.")


def aggregate_history(descriptions: Sequence[str], client=None, scene: Scene | None = None,
                      seed: int = 0) -> str:
    _, retained = select_landmarks(descriptions, scene)
    if client is None:
        return render_history(retained)
    return _call(client, aggregate_prompt(descriptions, retained), seed)


# --------------------------------------------------------------------------
# stage 3: reasoning


def action_phrase(action: Action) -> str:
    if action.kind is ActionKind.STOP:
        return "stop"
    if action.kind is ActionKind.FORWARD:
        return f"move forward {action.magnitude} centimeters"
    side = "left" if action.kind is ActionKind.LEFT else "right"
    return f"turn {side} {action.magnitude} degrees"


def _parse_phrase(text: str) -> Action | None:
    m = re.fullmatch(r"move forward (\d+) centimeters|turn (left|right) (\d+) degrees|stop", text.strip())
    if not m:
        return None
    try:
        if m.group(1):
            return Action(ActionKind.FORWARD, int(m.group(1)))
        if m.group(2):
            kind = ActionKind.LEFT if m.group(2) == "left" else ActionKind.RIGHT
            return Action(kind, int(m.group(3)))
    except ValueError:
        return None
    return Action(ActionKind.STOP)


_FINAL = re.compile(
    r"so i will (?:move forward (\S+) centimeters|turn (left|right) (\S+) degrees|stop now)")


def final_action(think: str) -> Action | None:
    """The last action the think text commits to, or None."""
    hits = list(_FINAL.finditer(think))
    if not hits:
        return None
    m = hits[-1]
    try:
        if m.group(1):
            return Action(ActionKind.FORWARD, WORD_NUMBERS[m.group(1)])
        if m.group(2):
            kind = ActionKind.LEFT if m.group(2) == "left" else ActionKind.RIGHT
            return Action(kind, WORD_NUMBERS[m.group(3)])
    except (KeyError, ValueError):
        return None
    return Action(ActionKind.STOP)


@dataclass
class ContextSummary:
    current: str
    history: str
    goals: list
    done: int
    total: int
    target: dict | None
    view: list
    n_history_objects: int
    retained: list
    blocked: bool = False

    def to_dict(self) -> dict:
        return {
            "current": self.current, "history": self.history, "goals": list(self.goals),
            "done": self.done, "total": self.total, "target": self.target,
            "view": [list(v) for v in self.view], "n_history_objects": self.n_history_objects,
            "retained": list(self.retained), "blocked": self.blocked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextSummary":
        return cls(d["current"], d["history"], list(d["goals"]), d["done"], d["total"], d["target"],
                   [tuple(v) for v in d["view"]], d["n_history_objects"], list(d["retained"]),
                   d.get("blocked", False))


def reason_prompt(summary: ContextSummary, instruction: str, reference: Action) -> str:
    tgt = summary.target
    target_line = "none" if tgt is None else f"noun={tgt['noun']} side={tgt['side']} distance={tgt['distance']}"
    view_line = "; ".join(f"{c}:{s}" for c, s in summary.view) or "none"
    goals = " ".join(f"{i + 1}. {g}" for i, g in enumerate(summary.goals))
    return (
        "[TBA REASONING]\n"
        f"INSTRUCTION: {instruction}\n"
        f"CURRENT VIEW: {summary.current}\n"
        f"HISTORY: {summary.history}\n"
        f"GOALS: {goals}\n"
        f"PROGRESS: completed={summary.done} total={summary.total}\n"
        f"TARGET: {target_line}\n"
        f"VIEW OBJECTS: {view_line}\n"
        f"MEMORY: {', '.join(summary.retained) or 'none'}\n"
        f"BLOCKED: {'yes' if summary.blocked else 'no'}\n"
        f"REFERENCE ACTION: {action_phrase(reference)}\n"
        "Think about the progress, the target and the surroundings before acting, "
        "and end with the sentence 'so i will <action>'."
    )


def compose_think(fields: dict) -> str:
    """Rule-based trace from the structured fields of a reasoning prompt."""
    done, total = (int(x) for x in re.findall(r"\d+", fields.get("PROGRESS", "completed=0 total=1")))
    action = _parse_phrase(fields["REFERENCE ACTION"])
    if action is None:
        raise ValueError("reference action could not be parsed")
    head = []
    if total and done >= total:
        head.append(PHRASES["progress_all"])
    elif done > 0:
        head.append(PHRASES["progress"].format(ordinal=ORDINALS[done - 1]))
    tgt = fields.get("TARGET", "none")
    if tgt != "none":
        kv = dict(p.split("=", 1) for p in tgt.split())
        key = "target_front" if kv["side"] == "front" else "target"
        head.append(PHRASES[key].format(noun=kv["noun"], distance=kv["distance"], side=kv["side"]))
    if fields.get("BLOCKED") == "yes":
        head.append(PHRASES["blocked"])
    view = [tuple(v.split(":")) for v in fields.get("VIEW OBJECTS", "none").split("; ") if v != "none"]
    view_s = []
    for c, s in view[:2]:
        key = "view_front" if s == "front" else "view"
        view_s.append(PHRASES[key].format(category=c, side=s))
    if not view_s:
        view_s.append(PHRASES["view_empty"])
    mem = [m for m in fields.get("MEMORY", "none").split(", ") if m != "none"]
    mem_s = [PHRASES["history"].format(category=mem[0])] if mem else []
    if action.kind is ActionKind.STOP:
        act = PHRASES["act_stop"]
    elif action.kind is ActionKind.FORWARD:
        act = PHRASES["act_forward"].format(amount=NUMBER_WORDS[action.magnitude])
    else:
        side = "left" if action.kind is ActionKind.LEFT else "right"
        act = PHRASES["act_turn"].format(side=side, amount=NUMBER_WORDS[action.magnitude])

    def words(parts):
        return sum(len(p.split()) for p in parts)
    for drop in ((), ("mem",), ("mem", "view2")):
        vs = view_s[:1] if "view2" in drop else view_s
        ms = [] if "mem" in drop else mem_s
        parts = head + vs + ms + [act]
        if words(parts) <= MAX_THINK_WORDS:
            break
    return " ".join(parts)


class DeterministicStub:
    """Rule-based client; pure in (prompt, seed)."""

    def generate(self, prompt: str, seed: int = 0) -> str:
        fields = _fields(prompt)
        if prompt.startswith("[TBA REASONING]"):
            return compose_think(fields)
        if "DRAFT" in fields:
            return fields["DRAFT"]
        raise ValueError("unrecognized prompt")


class RemoteClient:
    """HTTP JSON client: POST {prompt, max_tokens, seed, model} -> {text}."""

    def __init__(self, url: str, model: str = "", api_key: str | None = None, max_tokens: int = 256,
                 timeout: float = 30.0, max_concurrent: int = 4):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.max_tokens = max_tokens
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_concurrent)

    def generate(self, prompt: str, seed: int = 0) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": self.max_tokens, "seed": int(seed),
                           "model": self.model}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as exc:
                raise RetryableError(str(exc)) from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise RetryableError("response has no text field")
        return payload["text"]


@dataclass
class ReasonResult:
    think: str | None
    rounds: int
    rejections: int


_VOCAB = set(THINK_WORDS)


def reason_tba(summary: ContextSummary, instruction: str, gt_action: Action, client,
               rng: np.random.Generator, max_rounds: int = MAX_ROUNDS) -> ReasonResult:
    """Rejection-sample a trace whose concluding action is ``gt_action``.

    Traces using words outside the think vocabulary are rejected as well.
    """
    prompt = reason_prompt(summary, instruction, gt_action)
    rejections = 0
    for round_ in range(1, max_rounds + 1):
        seed = int(rng.integers(2**31 - 1))
        try:
            text = _call(client, prompt, seed).strip()
        except SkipSample:
            rejections += 1
            continue
        if final_action(text) == gt_action and set(text.split()) <= _VOCAB:
            return ReasonResult(text, round_, rejections)
        rejections += 1
    return ReasonResult(None, max_rounds, rejections)


# --------------------------------------------------------------------------
# dataset


def goal_description(scene: Scene, sg) -> str:
    cap = sg.capability
    if cap is Capability.POINTNAV:
        return "PointNav ({:.2f}, {:.2f}, {:.2f})".format(*sg.point)
    if cap is Capability.OBJNAV:
        return f"ObjNav {sg.category}"
    if cap is Capability.IMGNAV:
        return "ImgNav " + describe_view(scene, sg.goal_pose, "img-goal")
    if cap is Capability.INSIMGNAV:
        return "InsImgNav " + describe_view(scene, sg.goal_pose, "ins-goal")
    return f"VLN {sg.vln_text}"


def _target_noun(sg) -> str:
    if sg.capability is Capability.POINTNAV:
        return "point"
    if sg.capability is Capability.IMGNAV:
        return "image"
    if sg.capability is Capability.VLN:
        return "route"
    return sg.category if sg.category in _VOCAB else "object"


def summarize(scene: Scene, episode: Episode, pose: Pose, history_poses: Sequence[Pose],
              done: int, blocked: bool = False, client=None, seed: int = 0) -> ContextSummary:
    facts = view_facts(scene, pose)
    current = render_view(facts, "current") if client is None else describe_view(
        scene, pose, "current", client, seed)
    descs = [describe_view(scene, p, "history") for p in history_poses]
    n, retained = select_landmarks(descs, scene)
    history = aggregate_history(descs, client, scene, seed)
    total = len(episode.subgoals)
    target = None
    if done < total:
        sg = episode.subgoals[done]
        d = math.dist(pose.xy, sg.target_xy)
        target = {"noun": _target_noun(sg), "side": side_of(relative_bearing(pose, sg.target_xy)),
                  "distance": "near" if d < 2.0 else "far"}
    goals = [goal_description(scene, sg) for sg in episode.subgoals]
    return ContextSummary(current, history, goals, done, total, target, facts, n, retained, blocked)


@dataclass
class TbaSample:
    episode_id: str
    step: int
    summary: ContextSummary
    think: str
    action: Action

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "episode_id": self.episode_id, "step": self.step,
                "summary": self.summary.to_dict(), "think": self.think,
                "action": self.action.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TbaSample":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"tba schema {d.get('schema')!r}, expected {SCHEMA_VERSION}")
        return cls(d["episode_id"], int(d["step"]), ContextSummary.from_dict(d["summary"]),
                   d["think"], Action.from_dict(d["action"]))


@dataclass
class TbaStats:
    emitted: int = 0
    skipped: int = 0
    rejections: int = 0

    @property
    def skip_ratio(self) -> float:
        total = self.emitted + self.skipped
        return self.skipped / total if total else 0.0


def episode_samples(scene: Scene, episode: Episode, client, stride: int, seed: int,
                    stats: TbaStats) -> list[TbaSample]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    tr = ContextTracker(scene, episode)
    out = []
    for t, (action, nxt) in enumerate(gt_transitions(episode)):
        if t % stride == 0:
            rng = np.random.default_rng([seed, t, *episode.id.encode()])
            hist = episode.gt_poses[max(0, t - HISTORY_WINDOW):t]
            summary = summarize(scene, episode, tr.pose, hist, tr.done, tr.blocked)
            res = reason_tba(summary, episode.instruction_text, action, client, rng)
            stats.rejections += res.rejections
            if res.think is None:
                stats.skipped += 1
            else:
                stats.emitted += 1
                out.append(TbaSample(episode.id, t, summary, res.think, action))
        tr.step(action, nxt)
    return out


def build_tba_dataset(episodes: Sequence[Episode], scenes, client, think_stride: int = 20,
                      out_path=None, seed: int = 0) -> tuple[list[TbaSample], TbaStats]:
    """One reasoning sample per ``think_stride``-th ground-truth step of every episode."""
    stats = TbaStats()
    samples = []
    for ep in episodes:
        samples += episode_samples(scenes[ep.scene_id], ep, client, think_stride, seed, stats)
    if out_path is not None:
        write_tba(samples, out_path)
    log.info("tba: %d samples, %d skipped (ratio %.3f)", stats.emitted, stats.skipped, stats.skip_ratio)
    return samples, stats


def write_tba(samples: Sequence[TbaSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_tba(path) -> list[TbaSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(TbaSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad tba record ({exc})") from exc
    return out
