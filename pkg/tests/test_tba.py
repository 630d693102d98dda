import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from octokit import env, tba
from octokit.env import STOP, Action, ActionKind, Pose, SemanticObject
from octokit.policy import THINK_WORDS
from octokit.tasks import Capability, Episode, SubGoal

from conftest import open_scene

FWD25 = Action(ActionKind.FORWARD, 25)
FWD50 = Action(ActionKind.FORWARD, 50)


def obj_at(pose, bearing, dist, category, oid=0):
    h = math.radians(pose.heading + bearing)
    return SemanticObject(oid, category, (pose.x + dist * math.sin(h), pose.y + dist * math.cos(h)),
                          0.2, 0.8)


def corridor_episode(eid, n_actions, scene_id="scene-0"):
    """Straight run east along a 12 m corridor: ``n_actions - 1`` forwards then Stop."""
    scene = open_scene(130, 12, seed=0)
    start = Pose(0.55, 0.55, heading=90.0)
    poses = [start]
    for _ in range(n_actions - 1):
        poses.append(env.step(scene, poses[-1], FWD25))
    poses.append(poses[-1])
    actions = (FWD25,) * (n_actions - 1) + (STOP,)
    sg = SubGoal(Capability.POINTNAV, poses[-1].xy, 0.36, point=(*poses[-1].xy, env.CAMERA_HEIGHT))
    ep = Episode(eid, scene_id, start, (sg,), "go east", actions, tuple(poses), 0.0)
    return scene, ep


class Scripted:
    """Reasoning answers taken from a fixed script, one per call."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.calls = 0

    def generate(self, prompt, seed=0):
        self.calls += 1
        return self.answers.pop(0) if self.answers else "so i will stop now ."


def summary_for(scene, pose, ep):
    return tba.summarize(scene, ep, pose, [], 0)


# ---------------------------------------------------------------- view descriptions


def test_single_chair_slightly_left_is_in_front():
    p = Pose(2.0, 1.0, heading=0.0)
    s = open_scene(40, 40, objects=[obj_at(p, -10.0, 1.0, "chair")])
    text = tba.describe_view(s, p)
    assert "front" in text and "chair" in text


def test_no_visible_objects_is_empty_area():
    s = open_scene(40, 40)
    assert tba.describe_view(s, Pose(2.0, 2.0)) == tba.EMPTY_VIEW == "an empty area"


def test_describe_is_deterministic_for_every_kind(scene):
    p = scene.navigable_cells()[10]
    pose = Pose((p[0] + 0.5) * scene.resolution, (p[1] + 0.5) * scene.resolution, heading=45.0)
    stub = tba.DeterministicStub()
    for kind in tba.VIEW_KINDS:
        assert tba.describe_view(scene, pose, kind, stub, 3) == tba.describe_view(scene, pose, kind, stub, 3)
        assert tba.describe_view(scene, pose, kind, stub, 3) == tba.describe_view(scene, pose, kind)


def test_unknown_view_kind_rejected():
    with pytest.raises(ValueError):
        tba.describe_view(open_scene(), Pose(1.0, 1.0), "panorama")


def test_side_of_thresholds():
    assert tba.side_of(-29.9) == "front" and tba.side_of(29.9) == "front"
    assert tba.side_of(-30.0) == "left" and tba.side_of(30.0) == "right"


# ---------------------------------------------------------------- history aggregation


def test_ten_objects_keep_three():
    descs = [f"Earlier you saw a {c} on the left." for c in env.CATEGORIES[:10]]
    n, kept = tba.select_landmarks(descs)
    assert n == 10 and len(kept) == 3
    out = tba.aggregate_history(descs, tba.DeterministicStub())
    assert sum(out.count(c) for c in env.CATEGORIES[:10]) == 3


@pytest.mark.parametrize("n", range(0, 40))
def test_retained_count_is_ceil_of_thirty_percent(n):
    assert tba.retained_count(n) == math.ceil(n * 3 / 10 - 1e-12)


def test_couch_and_sofa_merge():
    out = tba.aggregate_history(["there is a couch here", "a big sofa by the wall"])
    assert out.count("sofa") == 1 and "couch" not in out


def test_empty_history():
    assert tba.aggregate_history([]) == tba.NO_HISTORY == "no prior observations"


def test_rarest_object_is_kept_first():
    s = open_scene(40, 40, objects=[
        SemanticObject(0, "chair", (1.0, 1.0), 0.2, 0.8),
        SemanticObject(1, "chair", (2.0, 1.0), 0.2, 0.8),
        SemanticObject(2, "lamp", (3.0, 1.0), 0.2, 0.8),
        SemanticObject(3, "chair", (1.0, 3.0), 0.2, 0.8),
    ])
    _, kept = tba.select_landmarks(["a lamp", "a chair", "a chair"], s)
    assert kept == ["lamp"]


# ---------------------------------------------------------------- reasoning


def test_final_action_reads_last_commitment():
    assert tba.final_action("so i will stop now . so i will move forward fifty centimeters .") == FWD50
    assert tba.final_action("so i will turn left ninety degrees .") == Action(ActionKind.LEFT, 90)
    assert tba.final_action("i see a chair .") is None
    assert tba.final_action("so i will move forward twelve centimeters .") is None


def test_stub_accepts_on_first_round():
    scene, ep = corridor_episode("e", 5)
    summ = summary_for(scene, ep.start, ep)
    rng = np.random.default_rng(0)
    for gt in [FWD25, FWD50, STOP, Action(ActionKind.RIGHT, 15), Action(ActionKind.LEFT, 45)]:
        res = tba.reason_tba(summ, "go", gt, tba.DeterministicStub(), rng)
        assert res.rounds == 1 and res.rejections == 0
        assert tba.final_action(res.think) == gt


def test_wrong_twice_then_right_accepts_on_round_three():
    scene, ep = corridor_episode("e", 5)
    client = Scripted(["so i will stop now .", "so i will turn left ninety degrees .",
                       "so i will move forward fifty centimeters ."])
    res = tba.reason_tba(summary_for(scene, ep.start, ep), "go", FWD50, client,
                         np.random.default_rng(0))
    assert res.rounds == 3 and res.rejections == 2
    assert res.think == "so i will move forward fifty centimeters ."


def test_never_compliant_skips_after_eight_rounds():
    scene, ep = corridor_episode("e", 5)
    client = Scripted([])
    res = tba.reason_tba(summary_for(scene, ep.start, ep), "go", FWD50, client,
                         np.random.default_rng(0))
    assert res.think is None and res.rejections == 8 and client.calls == 8


def test_out_of_vocabulary_trace_rejected():
    scene, ep = corridor_episode("e", 5)
    client = Scripted(["hmm so i will move forward fifty centimeters .",
                       "so i will move forward fifty centimeters ."])
    res = tba.reason_tba(summary_for(scene, ep.start, ep), "go", FWD50, client,
                         np.random.default_rng(0))
    assert res.rounds == 2


def test_prompt_carries_reference_action():
    scene, ep = corridor_episode("e", 5)
    prompt = tba.reason_prompt(summary_for(scene, ep.start, ep), "go east", Action(ActionKind.RIGHT, 30))
    assert "REFERENCE ACTION: turn right 30 degrees" in prompt
    assert "INSTRUCTION: go east" in prompt


# ---------------------------------------------------------------- dataset


def test_forty_step_episodes_at_stride_twenty_give_twenty_samples():
    pairs = [corridor_episode(f"e{k}", 40) for k in range(10)]
    scenes = {"scene-0": pairs[0][0]}
    samples, stats = tba.build_tba_dataset([ep for _, ep in pairs], scenes, tba.DeterministicStub(), 20)
    assert len(samples) == 20
    assert [s.step for s in samples[:2]] == [0, 20]
    assert stats.skip_ratio == 0.0


def test_stub_dataset_properties(small_dataset, tmp_path):
    scenes, eps = small_dataset
    samples, stats = tba.build_tba_dataset(eps, scenes, tba.DeterministicStub(), 3,
                                           tmp_path / "a.jsonl", seed=1)
    tba.build_tba_dataset(eps, scenes, tba.DeterministicStub(), 3, tmp_path / "b.jsonl", seed=1)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert stats.skipped == 0 and stats.skip_ratio == 0.0
    expected = sum(-(-len(ep.gt_actions) // 3) for ep in eps)
    assert len(samples) == expected
    by_id = {ep.id: ep for ep in eps}
    vocab = set(THINK_WORDS)
    for s in samples:
        assert s.action == by_id[s.episode_id].gt_actions[s.step]
        assert tba.final_action(s.think) == s.action
        assert set(s.think.split()) <= vocab
        assert len(s.think.split()) <= tba.MAX_THINK_WORDS
        assert len(s.summary.retained) == tba.retained_count(s.summary.n_history_objects)
    assert tba.read_tba(tmp_path / "a.jsonl") == samples


def test_stub_vocabulary_is_policy_vocabulary():
    assert set(tba.PHRASES["words"]) <= set(THINK_WORDS)
    for key, text in tba.PHRASES.items():
        if key == "words":
            continue
        words = [w for w in text.split() if not w.startswith("{")]
        assert set(words) <= set(THINK_WORDS), key
    assert set(tba.NUMBER_WORDS.values()) <= set(THINK_WORDS)
    assert set(env.CATEGORIES) <= set(THINK_WORDS)


def test_bad_stride_rejected():
    scene, ep = corridor_episode("e", 5)
    with pytest.raises(ValueError):
        tba.build_tba_dataset([ep], {"scene-0": scene}, tba.DeterministicStub(), 0)


def test_corrupt_tba_line_names_line(tmp_path):
    scene, ep = corridor_episode("e", 5)
    path = tmp_path / "t.jsonl"
    tba.build_tba_dataset([ep], {"scene-0": scene}, tba.DeterministicStub(), 1, path)
    with open(path, "a") as f:
        f.write("{not json\n")
    with pytest.raises(ValueError, match=":6:"):
        tba.read_tba(path)


# ---------------------------------------------------------------- remote client


class _Handler(BaseHTTPRequestHandler):
    stub = tba.DeterministicStub()
    failures = 0
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        if type(self).failures > 0:
            type(self).failures -= 1
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({"text": self.stub.generate(body["prompt"], body["seed"])}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.failures = 0
    _Handler.seen = []
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}/generate"
    httpd.shutdown()
    httpd.server_close()


def test_remote_client_matches_stub(server):
    scene, ep = corridor_episode("e", 6)
    scenes = {"scene-0": scene}
    remote, _ = tba.build_tba_dataset([ep], scenes, tba.RemoteClient(server, model="m"), 2)
    local, _ = tba.build_tba_dataset([ep], scenes, tba.DeterministicStub(), 2)
    assert remote == local
    req = _Handler.seen[0]
    assert set(req) == {"prompt", "max_tokens", "seed", "model"}


def test_remote_retries_transient_failures(server):
    _Handler.failures = 1
    with pytest.raises(tba.RetryableError):
        tba.RemoteClient(server).generate("[DESCRIBE VIEW]\nDRAFT: hello", 0)
    _Handler.failures = 2
    assert tba._call(tba.RemoteClient(server), "[DESCRIBE VIEW]\nDRAFT: hello", 0) == "hello"


def test_remote_gives_up_after_three_attempts(server):
    _Handler.failures = 3
    with pytest.raises(tba.SkipSample):
        tba._call(tba.RemoteClient(server), "[DESCRIBE VIEW]\nDRAFT: hello", 0)


def test_unreachable_endpoint_is_retryable():
    with pytest.raises(tba.RetryableError):
        tba.RemoteClient("http://127.0.0.1:9/x", timeout=0.5).generate("p", 0)
