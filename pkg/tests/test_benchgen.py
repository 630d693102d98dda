import collections
import math

import numpy as np
import pytest

from octokit import benchgen, env
from octokit.benchgen import (
    InstructionTemplate, accept_by_ratio, assign_subgoals, distance_interval, goal_camera_candidates,
    instantiate_instruction, read_dataset, sample_capabilities, sample_goal_camera,
    sample_trajectory, splice_ok, splice_ratios, write_dataset,
)
from octokit.env import Pose, Scene, SemanticObject, gen_scene
from octokit.metrics import oracle_eval
from octokit.tasks import CAPABILITIES, SUCCESS_DISTANCE, Capability, SubGoal

from conftest import open_scene


@pytest.fixture(scope="module")
def corpus():
    scenes = [gen_scene(s) for s in (201, 202, 203)]
    eps = benchgen.generate_episodes(scenes, 240, seed=9)
    return {s.scene_id: s for s in scenes}, eps


# ---------------------------------------------------------------- capabilities

def test_capability_marginals_are_balanced():
    rng = np.random.default_rng(0)
    tally = collections.Counter()
    lengths = collections.Counter()
    for _ in range(10_000):
        caps = sample_capabilities(rng)
        tally.update(caps)
        lengths[len(caps)] += 1
        assert all(a is not b for a, b in zip(caps, caps[1:]))
    total = sum(tally.values())
    for c in CAPABILITIES:
        assert tally[c] / total == pytest.approx(0.2, abs=0.02)
    for k, w in enumerate(benchgen.LENGTH_WEIGHTS, start=1):
        assert lengths[k] / 10_000 == pytest.approx(w, abs=0.02)


def test_overrepresented_capability_is_drawn_less():
    rng = np.random.default_rng(1)
    firsts = [sample_capabilities(rng, (100, 0, 0, 0, 0))[0] for _ in range(5000)]
    assert firsts.count(CAPABILITIES[0]) / 5000 < 0.2


# ---------------------------------------------------------------- straight ratio

def test_accept_by_ratio_edges():
    rng = np.random.default_rng(0)
    assert all(accept_by_ratio(1.2, rng) for _ in range(1000))
    assert not any(accept_by_ratio(1.0, rng) for _ in range(1000))
    with pytest.raises(ValueError):
        accept_by_ratio(0.9, rng)


@pytest.mark.parametrize("r", [1.02, 1.05, 1.08, 1.1])
def test_accept_by_ratio_frequency(r):
    rng = np.random.default_rng(int(r * 100))
    freq = np.mean([accept_by_ratio(r, rng) for _ in range(20_000)])
    assert freq == pytest.approx(10 * (r - 1) ** 2, abs=0.005)


def test_sampled_trajectories_satisfy_constraints(scene):
    rng = np.random.default_rng(4)
    for n in range(200):
        k = n % 5 + 1
        t = sample_trajectory(scene, k, rng)
        lo, hi = distance_interval(k)
        a, b = t.cells[0], t.cells[-1]
        g = env.cell_geodesic(scene, a, b)
        e = scene.resolution * math.hypot(a[0] - b[0], a[1] - b[1])
        assert lo <= g <= hi
        assert g == pytest.approx(t.geodesic)
        assert g / e == pytest.approx(t.ratio, abs=1e-9)
        assert t.ratio > 1.0  # ratio 1 is accepted with probability 0
        assert scene.navigable_cell(a) and scene.navigable_cell(b)


def test_trajectory_sampling_is_deterministic(scene):
    a = sample_trajectory(scene, 2, np.random.default_rng(3))
    b = sample_trajectory(scene, 2, np.random.default_rng(3))
    assert a == b


def test_infeasible_interval_reports_diagnostic():
    s = open_scene(20, 20, res=0.1)  # 1.8 m interior: no pair is 3 m apart
    with pytest.raises(benchgen.TrajectoryError, match=r"\[3.00, 10.00\]"):
        sample_trajectory(s, 1, np.random.default_rng(0), scale=1.0)


# ---------------------------------------------------------------- splicing

def corridor(n=60):
    g = np.zeros((3, n), dtype=bool)
    g[1, :] = True
    return Scene(g, 0.1, (), 0)


def x_at(k):
    return (0.05 + 0.1 * k, 0.15)


def test_degenerate_splice_is_all_ones():
    s = corridor()
    S, T = x_at(5), x_at(40)
    assert splice_ratios(s, S, S, T, T) == (1.0, 1.0, 1.0)
    assert splice_ok((1.0, 1.0, 1.0))


def test_forced_detour_is_rejected():
    # A and T are 1 m apart; S sits 2.2 m past A on a dead end, so (AS + ST) / AT = 3.4
    s = corridor()
    A, T, S, B = x_at(10), x_at(20), x_at(32), x_at(25)
    r = splice_ratios(s, A, S, T, B)
    assert r[0] == pytest.approx(3.4)
    assert not splice_ok(r)


def test_accepted_splices_satisfy_inequalities(scene):
    rng = np.random.default_rng(8)
    for _ in range(10):
        walk = benchgen.gen_vln_walk(scene, rng)
        sp = benchgen.splice_vln(scene, walk, rng, 1, 1)
        S, T = walk.waypoints[0], walk.waypoints[-1]
        r = splice_ratios(scene, sp.start.xy, S, T, sp.end.xy)
        assert r[0] <= 3 and r[1] <= 3 and r[2] <= 5
        assert scene.cell_of(*sp.prefix.end.xy) == scene.cell_of(*S)
        assert scene.cell_of(*sp.suffix.start.xy) == scene.cell_of(*T)


def test_vln_walk_shape(scene):
    walk = benchgen.gen_vln_walk(scene, np.random.default_rng(2))
    assert 3 <= len(walk.waypoints) <= 6
    assert walk.text.startswith("walk forward")
    assert walk.text == benchgen.render_walk(scene, walk.waypoints)


# ---------------------------------------------------------------- goal cameras

def test_candidate_count_is_720(scene):
    rng = np.random.default_rng(0)
    for o in scene.objects:
        cands = goal_camera_candidates(o, rng)
        assert len(cands) == 720
        assert all(0.8 <= c.height <= 1.5 for c in cands)


def test_open_space_object_has_close_camera():
    obj = SemanticObject(0, "sofa", (2.0, 2.0), 0.35, 0.9)
    s = open_scene(40, 40, objects=[obj])
    cams = sample_goal_camera(s, obj, np.random.default_rng(0))
    assert any(math.dist(c.xy, obj.center) == pytest.approx(0.5) for c in cams)


def test_sealed_object_has_no_camera():
    g = np.zeros((60, 60), dtype=bool)
    g[1:-1, 1:-1] = True
    g[27:34, 27:34] = False  # solid block around the object, rings lie outside it
    obj = SemanticObject(0, "bed", (3.05, 3.05), 0.2, 0.6)
    g[29:32, 29:32] = True
    s = Scene(g, 0.1, (obj,), 0)
    assert sample_goal_camera(s, obj, np.random.default_rng(0)) == []


def test_accepted_cameras_are_well_formed(scene):
    rng = np.random.default_rng(5)
    for o in scene.objects[:6]:
        for cam in sample_goal_camera(scene, o, rng):
            assert scene.is_navigable(cam.x, cam.y)
            assert env.visible(scene, cam, o)
            assert abs(math.radians(env.relative_bearing(cam, o.center))) < 1e-6
            assert env.frame_coverage(scene, cam, o) >= 0.20


# ---------------------------------------------------------------- sub-goals and instructions

def test_single_pointnav_lands_at_path_end():
    pts = [(0.5 + 0.1 * k, 0.5) for k in range(20)]
    s = open_scene(40, 40)
    (sg,) = assign_subgoals(s, pts, [Capability.POINTNAV], np.random.default_rng(0))
    assert sg.target_xy == pts[-1]
    assert sg.point == (pts[-1][0], pts[-1][1], env.CAMERA_HEIGHT)
    assert sg.success_distance == SUCCESS_DISTANCE[Capability.POINTNAV]


def test_imgnav_signature_matches_observation(scene):
    rng = np.random.default_rng(2)
    t = sample_trajectory(scene, 2, rng)
    sgs = assign_subgoals(scene, t.points(scene), [Capability.IMGNAV, Capability.POINTNAV], rng)
    img = sgs[0]
    assert np.array_equal(np.array(img.goal_signature), env.observe(scene, img.goal_pose))


def test_pointnav_instruction_text():
    sg = SubGoal(Capability.POINTNAV, (1.2, 0.0), 0.36, point=(1.2, 0.0, 3.4))
    tpl = InstructionTemplate((Capability.POINTNAV,), "Go to {coordinates}. Stop.", None, 0)
    text = instantiate_instruction(tpl, [sg], Pose(0.0, 0.0))
    assert "(1.20, 0.00, 3.40)" in text
    assert text.startswith("Your current position is")
    assert text == instantiate_instruction(tpl, [sg], Pose(0.0, 0.0))


def test_imgnav_objnav_instruction_tokens():
    sgs = [SubGoal(Capability.IMGNAV, (1.0, 1.0), 0.36),
           SubGoal(Capability.OBJNAV, (2.0, 2.0), 1.0, object_id=3, category="piano")]
    tpl = InstructionTemplate(tuple(s.capability for s in sgs),
                              "Find {ImageNav}, then the {object}. Stop.", None, 0)
    text = instantiate_instruction(tpl, sgs, Pose(0.0, 0.0), "ep-7")
    assert text.count("<ImageNav:") == 1 and "<ImageNav:ep-7.0>" in text
    assert text.count("piano") == 1


def test_placeholder_mismatch_is_rejected():
    sg = SubGoal(Capability.OBJNAV, (1.0, 1.0), 1.0, category="tv")
    tpl = InstructionTemplate((Capability.OBJNAV,), "Go to {coordinates}.", None, 0)
    with pytest.raises(benchgen.InstructionError):
        instantiate_instruction(tpl, [sg], Pose(0.0, 0.0))


def test_template_pool_shape():
    pool = benchgen.load_template_pool()
    for c in CAPABILITIES:
        assert len(pool[c.value]) == 10
        assert all(benchgen.PLACEHOLDERS[c] in t for t in pool[c.value])
    assert len(pool["conjunctions"]) == 10 and len(pool["stop"]) == 10


def test_template_placeholders_follow_capabilities():
    rng = np.random.default_rng(0)
    for _ in range(200):
        caps = sample_capabilities(rng)
        tpl = benchgen.make_template(caps, rng)
        found = benchgen._PLACEHOLDER_RE.findall(tpl.text)
        assert ["{%s}" % f for f in found] == [benchgen.PLACEHOLDERS[c] for c in caps]


# ---------------------------------------------------------------- generated episodes

def test_gt_actions_replay_exactly(corpus):
    scenes, eps = corpus
    for ep in eps:
        s = scenes[ep.scene_id]
        assert ep.gt_poses[0] == ep.start
        assert len(ep.gt_poses) == len(ep.gt_actions) + 1
        assert ep.gt_actions[-1] == env.STOP
        p = ep.start
        for a, want in zip(ep.gt_actions, ep.gt_poses[1:]):
            p = env.step(s, p, a)
            assert math.dist(p.xy, want.xy) <= 1e-9
            assert abs(p.heading - want.heading) <= 1e-9


def test_gt_trajectory_completes_all_subgoals(corpus):
    scenes, eps = corpus
    for ep in eps:
        out = oracle_eval(scenes[ep.scene_id], ep)
        assert out.S == (1,) * len(ep.subgoals)


def test_subgoals_are_spread_out_and_reachable(corpus):
    scenes, eps = corpus
    for ep in eps:
        s = scenes[ep.scene_id]
        tg = [sg.target_xy for sg in ep.subgoals]
        for i in range(len(tg)):
            assert math.isfinite(env.geodesic_distance(s, ep.start.xy, tg[i]))
            for j in range(i + 1, len(tg)):
                assert env.geodesic_distance(s, tg[i], tg[j]) >= 1.0
        for sg in ep.subgoals:
            assert sg.success_distance == SUCCESS_DISTANCE[sg.capability]


def test_episode_ids_and_vln_count(corpus):
    _, eps = corpus
    assert [e.id for e in eps] == [f"ep-{i:06d}" for i in range(len(eps))]
    assert all(sum(c is Capability.VLN for c in e.capabilities) <= 1 for e in eps)
    seen = collections.Counter(c for e in eps for c in e.capabilities)
    assert set(seen) == set(CAPABILITIES)


def test_generation_is_worker_independent():
    scenes = [gen_scene(301), gen_scene(302)]
    one = benchgen.generate_episodes(scenes, 6, seed=3, workers=1)
    two = benchgen.generate_episodes(scenes, 6, seed=3, workers=2)
    assert one == two


# ---------------------------------------------------------------- dataset files

def test_dataset_roundtrip(tmp_path, corpus):
    _, eps = corpus
    path = tmp_path / "d.jsonl"
    write_dataset(eps[:100], path)
    assert read_dataset(path) == eps[:100]
    first = path.read_bytes()
    write_dataset(read_dataset(path), path)
    assert path.read_bytes() == first


def test_truncated_line_is_reported(tmp_path, corpus):
    _, eps = corpus
    path = tmp_path / "d.jsonl"
    write_dataset(eps[:3], path)
    data = path.read_text()
    path.write_text(data[: len(data) - 40])
    with pytest.raises(benchgen.DatasetError, match=r":3:"):
        read_dataset(path)


def test_schema_mismatch_is_reported(tmp_path, corpus):
    _, eps = corpus
    path = tmp_path / "d.jsonl"
    path.write_text(benchgen.dumps_episode(eps[0]).replace('"schema": 1', '"schema": 2') + "\n")
    with pytest.raises(benchgen.DatasetError, match="schema"):
        read_dataset(path)
