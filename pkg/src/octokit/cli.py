"""Command-line entry point, report rendering and the staged training pipeline.

Every pipeline stage writes into ``<run>/stages/<name>-<key>/`` where the key
hashes the config values the stage reads plus the directories of the stages it
consumes.  A stage is built in a ``.partial`` directory and renamed once
complete, so an interrupted run resumes from the last finished stage.
"""

from __future__ import annotations

import argparse
import collections
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from . import benchgen, env, policy, rollout, tba, train
from .config import ConfigError, RunConfig, digest, load_config, resolved
from .env import SceneParams
from .tasks import Capability

log = logging.getLogger("octokit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

REPORT_CAPABILITIES = (Capability.INSIMGNAV, Capability.IMGNAV, Capability.POINTNAV,
                       Capability.OBJNAV, Capability.VLN)
METRICS = ("SR", "SPL", "OSR")
MISSING = "—"
CHAIN_LABELS = ("Random", "Action-SFT", "+TBA-SFT", "+Nav-GRPO", "+Online-RL")


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# small io helpers


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return "" if v is None else str(v)


def rows_to_csv(rows: Sequence[Mapping], lead: Sequence[str] = ()) -> str:
    cols = list(lead)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# shared building blocks


def scene_params(cfg: RunConfig) -> SceneParams:
    s = cfg.scenes
    return SceneParams(width=s.width, height=s.height, resolution=s.resolution,
                       n_rooms=s.n_rooms, n_objects=s.n_objects)


def make_scenes(first_seed: int, n: int, params: SceneParams | None = None) -> list:
    return [env.gen_scene(first_seed + i, params) for i in range(n)]


def split_scene_seeds(seed: int) -> tuple[int, int]:
    """First scene seed of the training and the held-out split."""
    return 100_000 * seed, 100_000 * seed + 50_000


def make_client(cfg: RunConfig):
    if cfg.tba.client == "stub":
        return tba.DeterministicStub()
    return tba.RemoteClient(cfg.tba.endpoint, cfg.tba.model, os.environ.get(cfg.tba.api_key_env),
                            max_concurrent=cfg.tba.max_concurrent)


def supervised_samples(scenes, episodes, tba_samples=None) -> list:
    out = [x for ep in episodes for x in train.sft_samples(scenes[ep.scene_id], ep)]
    if tba_samples is None:
        return out
    by_ep = collections.defaultdict(list)
    for s in tba_samples:
        by_ep[s.episode_id].append(s)
    # reasoning targets are mixed with the direct ones so both prompt modes stay trained
    think = [x for ep in episodes for x in train.tba_sft_samples(scenes[ep.scene_id], ep, by_ep[ep.id])]
    return think + out


def run_sft(params, samples, sec, seed: int, tba_mode: bool) -> list[dict]:
    return train.train_supervised(params, samples, sec.steps, sec.lr, sec.batch_size, sec.momentum,
                                  sec.clip_norm, seed,
                                  train.tba_sft_step if tba_mode else train.action_sft_step)


def run_grpo(params, scenes, episodes, sec, seed: int) -> list[dict]:
    ref = policy.snapshot(params)
    contexts = train.grpo_contexts(scenes, episodes, sec.contexts, seed)
    return train.train_grpo(params, ref, contexts, sec.steps, sec.lr, sec.groups_per_step, sec.G,
                            sec.eps, sec.beta, sec.kl, sec.inner_steps, sec.temperature,
                            sec.momentum, sec.clip_norm, seed)


def run_rl(params, scenes, episodes, sec, seed: int):
    return train.train_rl(params, scenes, episodes, sec.steps, sec.lr, sec.critic_lr, sec.warmup,
                          sec.gamma, sec.episodes_per_step, sec.max_steps, sec.temperature,
                          sec.probe_cm, sec.commit_probe, sec.momentum, sec.clip_norm, seed)


def save_critic(critic: train.Critic, path) -> None:
    write_json(path, {"w": critic.w.tolist(), "b": float(critic.b)})


# --------------------------------------------------------------------------
# report


def _cell(bucket: Mapping | None, metric: str) -> str:
    if bucket is None:
        return MISSING
    return f"{bucket[metric]:.3f}"


def render_report(evals: Sequence[tuple[str, Mapping]], title: str = "Evaluation") -> str:
    """Markdown table: one row per evaluated policy, Overall then each capability."""
    groups = ["Overall"] + [c.label for c in REPORT_CAPABILITIES]
    head = ["Method"] + [f"{g} {m}" for g in groups for m in METRICS]
    lines = [f"# {title}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join(["---"] + ["---:"] * (len(head) - 1)) + "|"]
    for name, rep in evals:
        cells = [name]
        buckets = [rep.get("overall")] + [rep.get("per_capability", {}).get(c.value)
                                          for c in REPORT_CAPABILITIES]
        for b in buckets:
            cells += [_cell(b, m) for m in METRICS]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def curves_csv(curves: Sequence[tuple[str, Sequence[Mapping]]]) -> str:
    rows = [{"stage": name, **r} for name, rows_ in curves for r in rows_]
    return rows_to_csv(rows, lead=("stage", "step"))


def metrics_csv(rep: Mapping) -> str:
    rows = [{"bucket": "Overall", **rep["overall"]}]
    for c in REPORT_CAPABILITIES:
        b = rep["per_capability"].get(c.value)
        if b is not None:
            rows.append({"bucket": c.label, **b})
    return rows_to_csv(rows, lead=("bucket", "SR", "SPL", "OSR", "n"))


def cmd_report(evals: Sequence[tuple[str, Mapping]], curves: Sequence[tuple[str, Sequence[Mapping]]],
               out_md, out_csv=None) -> None:
    _atomic_write(out_md, render_report(evals))
    if out_csv is not None:
        _atomic_write(out_csv, curves_csv(curves))


# --------------------------------------------------------------------------
# pipeline


class Pipeline:
    def __init__(self, cfg: RunConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        (self.root / "stages").mkdir(parents=True, exist_ok=True)
        self.ran: list[str] = []

    def stage(self, name: str, payload, deps: Sequence[Path], fn: Callable[[Path], None]) -> Path:
        key = digest({"stage": name, "tool_version": __version__, "payload": payload,
                      "deps": [d.name for d in deps]})
        final = self.root / "stages" / f"{name}-{key}"
        if (final / "DONE").exists():
            log.info("stage %s: reusing %s", name, final.name)
            return final
        work = final.with_name(final.name + ".partial")
        if work.exists():
            shutil.rmtree(work)
        work.mkdir()
        write_json(work / "config.json", resolved(self.cfg))
        log.info("stage %s: running into %s", name, final.name)
        try:
            fn(work)
        except Exception as exc:
            raise StageError(f"stage {name} failed: {exc}") from exc
        write_json(work / "DONE", {"stage": name, "key": key})
        if final.exists():
            shutil.rmtree(final)
        os.replace(work, final)
        self.ran.append(name)
        return final


def _train_stage(kind: str, cfg: RunConfig, scenes_path: Path, data_dir: Path, prev: Path,
                 tba_dir: Path | None = None):
    def run(out: Path) -> None:
        scenes = env.read_scenes(scenes_path)
        episodes = benchgen.read_dataset(data_dir / "train.jsonl")
        params = policy.load(prev / "policy.ckpt")
        if kind == "sft":
            curve = run_sft(params, supervised_samples(scenes, episodes), cfg.sft, cfg.seed, False)
        elif kind == "tba-sft":
            samples = supervised_samples(scenes, episodes, tba.read_tba(tba_dir / "tba.jsonl"))
            curve = run_sft(params, samples, cfg.tba_sft, cfg.seed + 1, True)
        elif kind == "grpo":
            curve = run_grpo(params, scenes, episodes, cfg.grpo, cfg.seed)
        else:
            critic, curve = run_rl(params, scenes, episodes, cfg.rl, cfg.seed)
            save_critic(critic, out / "critic.json")
        policy.save(params, out / "policy.ckpt")
        _atomic_write(out / "curve.csv", rows_to_csv(curve, lead=("step",)))
    return run


def run_pipeline(cfg: RunConfig, root) -> dict:
    """Generate, train every enabled stage in order, evaluate each checkpoint and report."""
    root = Path(root)
    pipe = Pipeline(cfg, root)
    train_seed, eval_seed = split_scene_seeds(cfg.seed)

    def gen_scenes(out: Path) -> None:
        p = scene_params(cfg)
        scenes = make_scenes(train_seed, cfg.scenes.n_train, p) + make_scenes(eval_seed, cfg.scenes.n_eval, p)
        env.write_scenes(scenes, out / "scenes.jsonl")

    scenes_dir = pipe.stage("scenes", {"seed": cfg.seed, "scenes": cfg.to_dict()["scenes"]}, [], gen_scenes)
    scenes_path = scenes_dir / "scenes.jsonl"

    def gen_data(out: Path) -> None:
        scenes = list(env.read_scenes(scenes_path).values())
        tr, ev = scenes[:cfg.scenes.n_train], scenes[cfg.scenes.n_train:]
        d = cfg.dataset
        benchgen.write_dataset(benchgen.generate_episodes(tr, d.train_episodes, 2 * cfg.seed, d.scale,
                                                          cfg.workers, id_prefix="train"),
                               out / "train.jsonl")
        benchgen.write_dataset(benchgen.generate_episodes(ev, d.eval_episodes, 2 * cfg.seed + 1, d.scale,
                                                          cfg.workers, id_prefix="eval"),
                               out / "eval.jsonl")

    data_dir = pipe.stage("episodes", {"seed": cfg.seed, "dataset": cfg.to_dict()["dataset"]},
                          [scenes_dir], gen_data)

    def init(out: Path) -> None:
        p = policy.init_params(np.random.default_rng([cfg.seed, 3]), cfg.policy.hidden, cfg.policy.embed)
        policy.save(p, out / "policy.ckpt")

    chain = [(CHAIN_LABELS[0], pipe.stage("init", {"seed": cfg.seed, "policy": cfg.to_dict()["policy"]},
                                          [], init))]
    sec = cfg.to_dict()
    prev = pipe.stage("action-sft", {"seed": cfg.seed, "sft": sec["sft"]}, [data_dir, chain[-1][1]],
                      _train_stage("sft", cfg, scenes_path, data_dir, chain[-1][1]))
    chain.append((CHAIN_LABELS[1], prev))

    if not cfg.skip_tba:
        tba_payload = {k: v for k, v in sec["tba"].items() if k not in ("api_key_env", "max_concurrent")}

        def gen_tba(out: Path) -> None:
            scenes = env.read_scenes(scenes_path)
            episodes = benchgen.read_dataset(data_dir / "train.jsonl")
            _, stats = tba.build_tba_dataset(episodes, scenes, make_client(cfg), cfg.tba.stride,
                                             out / "tba.jsonl", cfg.seed)
            write_json(out / "stats.json", {"emitted": stats.emitted, "skipped": stats.skipped,
                                            "rejections": stats.rejections,
                                            "skip_ratio": stats.skip_ratio})

        tba_dir = pipe.stage("tba-data", {"seed": cfg.seed, "tba": tba_payload}, [data_dir], gen_tba)
        prev = pipe.stage("tba-sft", {"seed": cfg.seed, "tba_sft": sec["tba_sft"]}, [data_dir, tba_dir, prev],
                          _train_stage("tba-sft", cfg, scenes_path, data_dir, prev, tba_dir))
        chain.append((CHAIN_LABELS[2], prev))
    if not cfg.skip_grpo:
        prev = pipe.stage("nav-grpo", {"seed": cfg.seed, "grpo": sec["grpo"]}, [data_dir, prev],
                          _train_stage("grpo", cfg, scenes_path, data_dir, prev))
        chain.append((CHAIN_LABELS[3], prev))
    if not cfg.skip_rl:
        prev = pipe.stage("online-rl", {"seed": cfg.seed, "rl": sec["rl"]}, [data_dir, prev],
                          _train_stage("rl", cfg, scenes_path, data_dir, prev))
        chain.append((CHAIN_LABELS[4], prev))

    evals = []
    for label, ck in chain:
        greedy = cfg.eval.random_greedy if label == CHAIN_LABELS[0] else cfg.eval.greedy

        def run_eval(out: Path, ck=ck, greedy=greedy) -> None:
            scenes = env.read_scenes(scenes_path)
            episodes = benchgen.read_dataset(data_dir / "eval.jsonl")
            params = policy.load(ck / "policy.ckpt")
            rc = rollout.RolloutConfig(cfg.eval.max_steps, cfg.eval.stride, 1.0, greedy, cfg.seed)
            recs = rollout.batch_rollout(params, episodes, scenes, rc, cfg.workers)
            rollout.write_rollouts(recs, out / "rollouts.jsonl")
            outcomes, rep = rollout.evaluate(recs, episodes, scenes, cfg.eval.metric)
            write_json(out / "eval.json", rep)
            _atomic_write(out / "outcomes.jsonl",
                          "".join(json.dumps(o.to_dict(), sort_keys=True) + "\n" for o in outcomes))

        ev_dir = pipe.stage("eval", {"seed": cfg.seed, "eval": sec["eval"], "greedy": greedy},
                            [data_dir, ck], run_eval)
        evals.append((label, read_json(ev_dir / "eval.json"), ev_dir))

    curves = [(label, read_csv(ck / "curve.csv")) for label, ck in chain[1:]]
    cmd_report([(label, rep) for label, rep, _ in evals], curves, root / "report.md", root / "curves.csv")
    summary = {
        "tool_version": __version__,
        "chain": [{"label": label, "checkpoint": str(ck.relative_to(root) / "policy.ckpt"),
                   "eval": str(d.relative_to(root) / "eval.json"), "overall": rep["overall"]}
                  for (label, ck), (_, rep, d) in zip(chain, evals)],
    }
    write_json(root / "config.json", resolved(cfg))
    write_json(root / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# argument parsing


def _scenes_for(dataset, explicit=None) -> dict:
    if explicit:
        return env.read_scenes(explicit)
    d = Path(dataset)
    for cand in (d.with_name(d.stem + ".scenes.jsonl"), d.with_name("scenes.jsonl")):
        if cand.exists():
            return env.read_scenes(cand)
    raise ConfigError(f"no scenes file found for {dataset}; pass --scenes")


def _stride(v: str) -> int | None:
    if v.lower() in ("inf", "none", "never"):
        return None
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("stride must be >= 1 or 'inf'")
    return n


def _labelled(items: Sequence[str]) -> list[tuple[str, str]]:
    out = []
    for it in items or ():
        label, sep, path = it.partition("=")
        if not sep:
            label, path = Path(it).stem, it
        out.append((label, path))
    return out


def _cfg(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _curve_path(out) -> Path:
    o = Path(out)
    return o.with_name(o.stem + ".curve.csv")


def cmd_gen_scenes(args) -> None:
    cfg = _cfg(args)
    first = args.seed if args.first_seed is None else args.first_seed
    env.write_scenes(make_scenes(first, args.n, scene_params(cfg)), args.out)


def cmd_gen_episodes(args) -> None:
    cfg = _cfg(args)
    if args.scenes.isdigit():
        scenes = make_scenes(split_scene_seeds(args.seed)[0], int(args.scenes), scene_params(cfg))
        out = Path(args.out)
        env.write_scenes(scenes, out.with_name(out.stem + ".scenes.jsonl"))
    else:
        scenes = list(env.read_scenes(args.scenes).values())
    eps = benchgen.generate_episodes(scenes, args.episodes, args.seed, args.scale, args.workers,
                                     id_prefix=args.prefix)
    benchgen.write_dataset(eps, args.out)


def cmd_gen_tba(args) -> None:
    cfg = _cfg(args)
    cfg.tba.client = args.client
    if args.endpoint:
        cfg.tba.endpoint = args.endpoint
    if args.model:
        cfg.tba.model = args.model
    cfg.validate()
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    _, stats = tba.build_tba_dataset(episodes, scenes, make_client(cfg), args.stride, args.out, args.seed)
    print(f"emitted {stats.emitted} skipped {stats.skipped} skip_ratio {stats.skip_ratio:.4f}")


def _load_or_init(args, cfg: RunConfig):
    if args.ckpt:
        return policy.load(args.ckpt)
    return policy.init_params(np.random.default_rng([args.seed, 3]), cfg.policy.hidden, cfg.policy.embed)


def _finish_training(params, curve, args) -> None:
    policy.save(params, args.out)
    _atomic_write(_curve_path(args.out), rows_to_csv(curve, lead=("step",)))


def _with_steps(sec, args):
    if args.steps is not None:
        sec.steps = args.steps
    if getattr(args, "lr", None) is not None:
        sec.lr = args.lr
    return sec


def cmd_train_sft(args) -> None:
    cfg = _cfg(args)
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    params = _load_or_init(args, cfg)
    curve = run_sft(params, supervised_samples(scenes, episodes), _with_steps(cfg.sft, args), args.seed, False)
    _finish_training(params, curve, args)


def cmd_train_tba(args) -> None:
    cfg = _cfg(args)
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    params = _load_or_init(args, cfg)
    samples = supervised_samples(scenes, episodes, tba.read_tba(args.tba))
    curve = run_sft(params, samples, _with_steps(cfg.tba_sft, args), args.seed, True)
    _finish_training(params, curve, args)


def cmd_train_grpo(args) -> None:
    cfg = _cfg(args)
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    params = policy.load(args.ckpt)
    curve = run_grpo(params, scenes, episodes, _with_steps(cfg.grpo, args), args.seed)
    _finish_training(params, curve, args)


def cmd_train_rl(args) -> None:
    cfg = _cfg(args)
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    params = policy.load(args.ckpt)
    critic, curve = run_rl(params, scenes, episodes, _with_steps(cfg.rl, args), args.seed)
    _finish_training(params, curve, args)
    out = Path(args.out)
    save_critic(critic, out.with_name(out.stem + ".critic.json"))


def cmd_rollout(args) -> None:
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    params = policy.load(args.ckpt)
    rc = rollout.RolloutConfig(args.max_steps, args.stride, args.temperature, not args.sample, args.seed)
    rollout.write_rollouts(rollout.batch_rollout(params, episodes, scenes, rc, args.workers), args.out)


def cmd_eval(args) -> None:
    episodes = benchgen.read_dataset(args.dataset)
    scenes = _scenes_for(args.dataset, args.scenes)
    records = rollout.read_rollouts(args.rollouts)
    _, rep = rollout.evaluate(records, episodes, scenes, args.metric)
    report = Path(args.report)
    write_json(args.json or report.with_suffix(".json"), rep)
    _atomic_write(report, render_report([(args.name, rep)]))
    if args.csv:
        _atomic_write(args.csv, metrics_csv(rep))
    o = rep["overall"]
    print(f"SR {o['SR']:.3f} SPL {o['SPL']:.3f} OSR {o['OSR']:.3f} over {o['n']} episodes")


def cmd_report_args(args) -> None:
    evals = []
    for label, path in _labelled(args.eval):
        rep = read_json(path)
        if "overall" not in rep or "per_capability" not in rep:
            raise ConfigError(f"{path}: not an eval summary")
        evals.append((label, rep))
    curves = [(label, read_csv(path)) for label, path in _labelled(args.curves)]
    cmd_report(evals, curves, args.out, args.csv)


def cmd_pipeline(args) -> None:
    overrides = {}
    for flag in ("skip_tba", "skip_grpo", "skip_rl"):
        if getattr(args, flag):
            overrides[flag] = True
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides=overrides)
    summary = run_pipeline(cfg, args.out)
    for row in summary["chain"]:
        o = row["overall"]
        print(f"{row['label']:<12} SR {o['SR']:.3f} SPL {o['SPL']:.3f} OSR {o['OSR']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="octokit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config")
        return p

    p = add("gen-scenes", cmd_gen_scenes, "generate procedural scenes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--first-seed", type=int, help="seed of the first scene (default: --seed)")
    p.add_argument("--out", required=True)

    p = add("gen-episodes", cmd_gen_episodes, "generate an episode dataset")
    p.add_argument("--scenes", required=True, help="number of scenes to generate, or a scenes file")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=benchgen.DEFAULT_SCALE)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--prefix", default="ep")
    p.add_argument("--out", required=True)

    p = add("gen-tba", cmd_gen_tba, "build think-before-action samples")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scenes")
    p.add_argument("--client", choices=("stub", "remote"), default="stub")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--stride", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, fn, what in (("train-sft", cmd_train_sft, "action supervised fine-tuning"),
                           ("train-tba", cmd_train_tba, "think-before-action fine-tuning"),
                           ("train-grpo", cmd_train_grpo, "group relative policy optimization"),
                           ("train-rl", cmd_train_rl, "online actor-critic")):
        p = add(name, fn, what)
        p.add_argument("--dataset", required=True)
        p.add_argument("--scenes")
        p.add_argument("--ckpt", required=name in ("train-grpo", "train-rl"))
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int, default=0)
        if name == "train-tba":
            p.add_argument("--tba", required=True, help="samples written by gen-tba")

    p = add("rollout", cmd_rollout, "run a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scenes")
    p.add_argument("--stride", type=_stride, default=None, help="thinking stride, or 'inf'")
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sample", action="store_true", help="sample instead of argmax decoding")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score rollouts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scenes")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--metric", choices=("euclidean", "geodesic"), default="euclidean")
    p.add_argument("--name", default="policy")
    p.add_argument("--report", required=True)
    p.add_argument("--json")
    p.add_argument("--csv")

    p = add("report", cmd_report_args, "combine eval summaries and training curves")
    p.add_argument("--eval", action="append", required=True, help="LABEL=eval.json")
    p.add_argument("--curves", action="append", help="LABEL=curve.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")

    p = add("pipeline", cmd_pipeline, "run every stage end to end")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--skip-tba", action="store_true")
    p.add_argument("--skip-grpo", action="store_true")
    p.add_argument("--skip-rl", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any stage failure maps to one exit code
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
