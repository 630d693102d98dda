import dataclasses

import numpy as np
import pytest

from octokit import env, policy
from octokit.env import Pose
from octokit.metrics import eval_episode
from octokit.policy import TOKEN_ID, init_params
from octokit.rollout import (
    RolloutConfig, RolloutRecord, batch_rollout, evaluate, read_rollouts, run_episode,
    write_rollouts,
)


def biased(*tokens, seed=0):
    p = init_params(np.random.default_rng(seed))
    for t in tokens:
        p.arrays["b_o"][TOKEN_ID[t]] = 50.0
    return p


@pytest.fixture(scope="module")
def random_policy():
    p = init_params(np.random.default_rng(3))
    p.arrays["W_o"] = np.random.default_rng(4).normal(0, 0.3, size=p.arrays["W_o"].shape)
    return p


@pytest.fixture(scope="module")
def hundred(small_dataset):
    scenes, eps = small_dataset
    out = [dataclasses.replace(eps[k % len(eps)], id=f"{eps[k % len(eps)].id}-r{k}") for k in range(100)]
    return scenes, out


def test_always_stop_takes_no_actions(small_dataset):
    scenes, eps = small_dataset
    ep = eps[0]
    rec = run_episode(biased("STOP"), scenes[ep.scene_id], ep)
    assert rec.actions == [] and rec.poses == [ep.start] and rec.reason == "stopped"


def test_always_forward_hits_step_limit(small_dataset):
    scenes, eps = small_dataset
    ep = eps[0]
    rec = run_episode(biased("FORWARD", "25cm"), scenes[ep.scene_id], ep, RolloutConfig(max_steps=7))
    assert rec.reason == "max-steps" and len(rec.actions) == 7 and len(rec.poses) == 8


def test_no_stride_means_no_thinks(small_dataset, random_policy):
    scenes, eps = small_dataset
    for ep in eps[:4]:
        rec = run_episode(random_policy, scenes[ep.scene_id], ep, RolloutConfig(max_steps=20))
        assert rec.thinks == [] and set(rec.modes) <= {"direct"}


def test_stride_controls_think_steps(small_dataset):
    scenes, eps = small_dataset
    ep = eps[0]
    p = biased("</Think>", "FORWARD", "25cm")
    rec = run_episode(p, scenes[ep.scene_id], ep, RolloutConfig(max_steps=12, stride=5))
    assert [t["step"] for t in rec.thinks] == [0, 5, 10]
    assert [m for m in rec.modes] == ["tba" if t % 5 == 0 else "direct" for t in range(12)]


def test_poses_navigable_and_replayable(small_dataset, random_policy):
    scenes, eps = small_dataset
    cfg = RolloutConfig(max_steps=40, greedy=False, seed=2)
    for ep in eps:
        scene = scenes[ep.scene_id]
        rec = run_episode(random_policy, scene, ep, cfg)
        assert rec.poses[0] == ep.start
        assert len(rec.poses) == len(rec.actions) + 1
        for p, a, q in zip(rec.poses, rec.actions, rec.poses[1:]):
            assert scene.is_navigable(q.x, q.y)
            assert env.step(scene, p, a) == q


def test_rollout_is_deterministic(small_dataset, random_policy):
    scenes, eps = small_dataset
    cfg = RolloutConfig(max_steps=30, greedy=False, seed=5)
    a = batch_rollout(random_policy, eps, scenes, cfg)
    b = batch_rollout(random_policy, eps, scenes, cfg)
    assert a == b
    c = batch_rollout(random_policy, eps, scenes, dataclasses.replace(cfg, seed=6))
    assert a != c


def test_workers_do_not_change_output(hundred, random_policy, tmp_path):
    scenes, eps = hundred
    cfg = RolloutConfig(max_steps=25, greedy=False, seed=1, stride=10)
    write_rollouts(batch_rollout(random_policy, eps, scenes, cfg, workers=1), tmp_path / "w1.jsonl")
    write_rollouts(batch_rollout(random_policy, eps, scenes, cfg, workers=4), tmp_path / "w4.jsonl")
    assert (tmp_path / "w1.jsonl").read_bytes() == (tmp_path / "w4.jsonl").read_bytes()
    assert len(read_rollouts(tmp_path / "w1.jsonl")) == 100


def test_empty_dataset_writes_valid_empty_file(tmp_path, random_policy):
    recs = batch_rollout(random_policy, [], {})
    write_rollouts(recs, tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    assert read_rollouts(tmp_path / "e.jsonl") == []


def test_record_round_trip(small_dataset, random_policy, tmp_path):
    scenes, eps = small_dataset
    recs = batch_rollout(random_policy, eps[:5], scenes, RolloutConfig(max_steps=10, stride=3))
    write_rollouts(recs, tmp_path / "r.jsonl")
    assert read_rollouts(tmp_path / "r.jsonl") == recs


def test_bad_record_names_line(tmp_path):
    rec = RolloutRecord("x", [Pose(1.0, 1.0)])
    write_rollouts([rec, rec], tmp_path / "r.jsonl")
    with open(tmp_path / "r.jsonl", "a") as f:
        f.write('{"schema": 99}\n')
    with pytest.raises(ValueError, match=":3:"):
        read_rollouts(tmp_path / "r.jsonl")


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(max_steps=0)
    with pytest.raises(ValueError):
        RolloutConfig(stride=0)


def test_gt_replay_evaluates_perfectly(small_dataset):
    scenes, eps = small_dataset
    recs = [RolloutRecord(ep.id, list(ep.gt_poses), list(ep.gt_actions[:-1])) for ep in eps]
    outs, agg = evaluate(recs, eps, scenes)
    assert agg["overall"]["SR"] == 1.0
    assert all(o.success for o in outs)


def test_missing_record_counts_as_failure(small_dataset):
    scenes, eps = small_dataset
    recs = [RolloutRecord(ep.id, list(ep.gt_poses)) for ep in eps[1:]]
    outs, agg = evaluate(recs, eps, scenes)
    assert outs[0].S == (0,) * len(eps[0].subgoals)
    assert agg["overall"]["SR"] == pytest.approx((len(eps) - 1) / len(eps))
    assert outs[1] == eval_episode(scenes[eps[1].scene_id], eps[1], list(eps[1].gt_poses))


def test_sampled_answers_always_parse(small_dataset, random_policy):
    scenes, eps = small_dataset
    cfg = RolloutConfig(max_steps=30, greedy=False, stride=4, temperature=2.0, seed=9)
    for rec in batch_rollout(random_policy, eps, scenes, cfg):
        assert rec.reason != "aborted"
        for t in rec.thinks:
            assert set(t["text"].split()) <= set(policy.THINK_WORDS)
