import json
from pathlib import Path

import pytest

import metric_oracle
from octokit import benchgen, cli, env
from octokit.env import STOP, Pose
from octokit.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, MISSING, main, render_report, run_pipeline
from octokit.config import load_config
from octokit.rollout import RolloutRecord, evaluate, write_rollouts
from octokit.tasks import SUCCESS_DISTANCE, Capability, Episode, SubGoal

from conftest import open_scene

SMALL = {
    "scenes": {"n_train": 2, "n_eval": 1, "width": 40, "height": 40, "n_rooms": 2, "n_objects": 8},
    "dataset": {"train_episodes": 8, "eval_episodes": 6},
    "sft": {"steps": 15, "batch_size": 16},
    "tba_sft": {"steps": 15, "batch_size": 16},
    "grpo": {"contexts": 40, "steps": 3, "groups_per_step": 2},
    "rl": {"steps": 4, "warmup": 2, "episodes_per_step": 1, "max_steps": 10},
    "eval": {"max_steps": 20},
}


def small_cfg(**top):
    return load_config(environ={}, overrides={**SMALL, **top})


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def table_cells(md):
    rows = [l for l in md.splitlines() if l.startswith("| ") and not l.startswith("| Method")]
    return [[c.strip() for c in r.strip("|").split("|")] for r in rows]


# ---------------------------------------------------------------- report


def shortest_replays(scene):
    """Single-goal episodes of every capability and rollouts walking cell centres to the nearest area cell."""
    res = scene.resolution
    start_cell = (3, 3)
    start = Pose((start_cell[0] + 0.5) * res, (start_cell[1] + 0.5) * res)
    eps, recs = [], []
    for k, cap in enumerate(Capability):
        for target in ((2.0, 3.0), (3.45, 1.25)):
            sg = SubGoal(cap, target, SUCCESS_DISTANCE[cap])
            ep = Episode(f"p{k}-{target[0]}", scene.scene_id, start, (sg,), "", (STOP,), (start, start), 0.0)
            best = min(metric_oracle.area(scene, sg), key=lambda c: env.cell_geodesic(scene, start_cell, c))
            cells = env.shortest_cell_path(scene, start_cell, best)
            recs.append(RolloutRecord(ep.id, [Pose((i + 0.5) * res, (j + 0.5) * res) for i, j in cells]))
            eps.append(ep)
    return eps, recs


def test_perfect_replay_reports_all_ones():
    scene = open_scene(40, 40, seed=0)
    eps, recs = shortest_replays(scene)
    _, rep = evaluate(recs, eps, {scene.scene_id: scene})
    (row,) = table_cells(render_report([("gt", rep)]))
    assert row[0] == "gt"
    assert row[1:] == ["1.000"] * 18


def test_gt_replay_reports_full_success(small_dataset):
    scenes, eps = small_dataset
    recs = [RolloutRecord(ep.id, list(ep.gt_poses), list(ep.gt_actions[:-1])) for ep in eps]
    _, rep = evaluate(recs, eps, scenes)
    (row,) = table_cells(render_report([("gt", rep)]))
    assert row[1] == row[3] == "1.000"


def test_empty_rollouts_report_all_zeros(small_dataset):
    scenes, eps = small_dataset
    _, rep = evaluate([], eps, scenes)
    (row,) = table_cells(render_report([("none", rep)]))
    assert all(c in ("0.000", MISSING) for c in row[1:])
    assert row[3] == "0.000"


def test_absent_capability_is_dash(small_dataset):
    scenes, eps = small_dataset
    pointnav = [ep for ep in eps if set(ep.capabilities) == {benchgen.Capability.POINTNAV}]
    _, rep = evaluate([], pointnav or eps[:1], scenes)
    md = render_report([("x", rep)])
    assert MISSING in md


def test_report_is_byte_stable(small_dataset, tmp_path):
    scenes, eps = small_dataset
    recs = [RolloutRecord(ep.id, list(ep.gt_poses[: len(ep.gt_poses) // 2])) for ep in eps]
    _, rep = evaluate(recs, eps, scenes)
    cli.cmd_report([("a", rep)], [("a", [{"step": 0, "loss": 1.5}])], tmp_path / "r1.md", tmp_path / "c1.csv")
    cli.cmd_report([("a", rep)], [("a", [{"step": 0, "loss": 1.5}])], tmp_path / "r2.md", tmp_path / "c2.csv")
    assert (tmp_path / "r1.md").read_bytes() == (tmp_path / "r2.md").read_bytes()
    assert (tmp_path / "c1.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()


# ---------------------------------------------------------------- exit codes


def test_unknown_command_is_config_error(capsys):
    assert main(["frobnicate"]) == EXIT_CONFIG


def test_bad_config_file_is_config_error(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text('{"grpo": {"G": 1}}')
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_env_override_is_config_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OCTOKIT_GRPO__EPS", "7")
    assert main(["pipeline", "--out", str(tmp_path / "run")]) == EXIT_CONFIG


def test_missing_input_is_stage_failure(tmp_path, capsys):
    code = main(["eval", "--dataset", str(tmp_path / "none.jsonl"), "--scenes", str(tmp_path / "s.jsonl"),
                 "--rollouts", str(tmp_path / "r.jsonl"), "--report", str(tmp_path / "r.md")])
    assert code == EXIT_STAGE


def test_version_flag(capsys):
    assert main(["--version"]) == EXIT_OK


# ---------------------------------------------------------------- subcommands


def test_subcommand_chain(tmp_path, capsys):
    d = tmp_path
    assert main(["gen-scenes", "--n", "1", "--seed", "3", "--out", str(d / "scenes.jsonl")]) == 0
    assert main(["gen-episodes", "--scenes", str(d / "scenes.jsonl"), "--episodes", "4", "--seed", "1",
                 "--out", str(d / "eps.jsonl")]) == 0
    assert main(["gen-tba", "--dataset", str(d / "eps.jsonl"), "--stride", "4",
                 "--out", str(d / "tba.jsonl")]) == 0
    assert "skip_ratio 0.0000" in capsys.readouterr().out
    assert main(["train-sft", "--dataset", str(d / "eps.jsonl"), "--steps", "3",
                 "--out", str(d / "sft.ckpt")]) == 0
    assert (d / "sft.curve.csv").exists()
    assert main(["train-tba", "--dataset", str(d / "eps.jsonl"), "--tba", str(d / "tba.jsonl"),
                 "--ckpt", str(d / "sft.ckpt"), "--steps", "3", "--out", str(d / "tba.ckpt")]) == 0
    assert main(["rollout", "--ckpt", str(d / "tba.ckpt"), "--dataset", str(d / "eps.jsonl"),
                 "--stride", "inf", "--max-steps", "10", "--out", str(d / "roll.jsonl")]) == 0
    assert main(["eval", "--dataset", str(d / "eps.jsonl"), "--rollouts", str(d / "roll.jsonl"),
                 "--report", str(d / "eval.md"), "--csv", str(d / "eval.csv")]) == 0
    assert "over 4 episodes" in capsys.readouterr().out
    assert main(["report", "--eval", f"tba={d / 'eval.json'}", "--curves", f"sft={d / 'sft.curve.csv'}",
                 "--out", str(d / "report.md"), "--csv", str(d / "curves.csv")]) == 0
    assert "| tba |" in (d / "report.md").read_text()


def test_empty_rollout_file_evaluates(tmp_path, small_dataset, capsys):
    scenes, eps = small_dataset
    env.write_scenes(list(scenes.values()), tmp_path / "scenes.jsonl")
    benchgen.write_dataset(eps, tmp_path / "eps.jsonl")
    write_rollouts([], tmp_path / "r.jsonl")
    assert main(["eval", "--dataset", str(tmp_path / "eps.jsonl"), "--rollouts", str(tmp_path / "r.jsonl"),
                 "--report", str(tmp_path / "e.md")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["overall"]["OSR"] == 0.0


# ---------------------------------------------------------------- pipeline


def test_skip_flags_shorten_chain(tmp_path):
    summary = run_pipeline(small_cfg(skip_grpo=True, skip_rl=True), tmp_path)
    assert [r["label"] for r in summary["chain"]] == ["Random", "Action-SFT", "+TBA-SFT"]
    summary = run_pipeline(small_cfg(skip_tba=True, skip_grpo=True, skip_rl=True), tmp_path / "b")
    assert [r["label"] for r in summary["chain"]] == ["Random", "Action-SFT"]


def test_pipeline_is_deterministic(tmp_path):
    run_pipeline(small_cfg(), tmp_path / "a")
    run_pipeline(small_cfg(), tmp_path / "b")
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b


def test_resume_after_crash_matches_clean_run(tmp_path, monkeypatch):
    clean = run_pipeline(small_cfg(), tmp_path / "clean")
    final = clean["chain"][-1]["checkpoint"]

    real = cli.run_grpo

    def crash(*a, **k):
        raise RuntimeError("injected crash")

    monkeypatch.setattr(cli, "run_grpo", crash)
    with pytest.raises(cli.StageError):
        run_pipeline(small_cfg(), tmp_path / "crash")
    stages = tmp_path / "crash" / "stages"
    assert any(p.name.endswith(".partial") for p in stages.iterdir())
    done_sft = next(stages.glob("action-sft-*/DONE"))
    stamp = done_sft.stat().st_mtime_ns

    monkeypatch.setattr(cli, "run_grpo", real)
    resumed = run_pipeline(small_cfg(), tmp_path / "crash")
    assert done_sft.stat().st_mtime_ns == stamp
    assert not any(p.name.endswith(".partial") for p in stages.iterdir())
    assert resumed["chain"][-1]["checkpoint"] == final
    assert (tmp_path / "crash" / final).read_bytes() == (tmp_path / "clean" / final).read_bytes()
    assert tree(tmp_path / "crash") == tree(tmp_path / "clean")


def test_pipeline_command_prints_chain(tmp_path, capsys):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run"),
                 "--skip-grpo", "--skip-rl"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in out] == ["Random", "Action-SFT", "+TBA-SFT"]
