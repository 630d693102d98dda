"""Run configuration: nested dataclasses, JSON files and environment overrides.

Environment variables ``OCTOKIT_<SECTION>__<FIELD>`` (or ``OCTOKIT_<FIELD>``
for top-level fields) override file values.  Values are parsed as JSON when
possible, so ``OCTOKIT_GRPO__LR=0.01`` and ``OCTOKIT_RL__COMMIT_PROBE=false``
both work.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

from . import __version__

ENV_PREFIX = "OCTOKIT_"


class ConfigError(ValueError):
    pass


@dataclass
class ScenesConfig:
    n_train: int = 12
    n_eval: int = 4
    width: int = 64
    height: int = 64
    resolution: float = 0.2
    n_rooms: int = 4
    n_objects: int = 16


@dataclass
class DatasetConfig:
    train_episodes: int = 300
    eval_episodes: int = 200
    scale: float = 0.3


@dataclass
class TbaConfig:
    client: str = "stub"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OCTOKIT_API_KEY"
    max_concurrent: int = 4
    stride: int = 5


@dataclass
class PolicyConfig:
    hidden: int = 64
    embed: int = 16


@dataclass
class SftConfig:
    steps: int = 600
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    clip_norm: float = 5.0


@dataclass
class GrpoConfig:
    contexts: int = 2000
    steps: int = 200
    lr: float = 0.01
    groups_per_step: int = 16
    G: int = 8
    eps: float = 0.2
    beta: float = 1e-4
    kl: str = "exp"
    inner_steps: int = 2
    temperature: float = 1.0
    momentum: float = 0.9
    clip_norm: float = 5.0


@dataclass
class RlConfig:
    steps: int = 200
    lr: float = 0.002
    critic_lr: float = 0.01
    warmup: int = 100
    gamma: float = 1.0
    probe_cm: int = 25
    commit_probe: bool = True
    episodes_per_step: int = 2
    max_steps: int = 60
    temperature: float = 1.0
    momentum: float = 0.9
    clip_norm: float = 5.0


@dataclass
class EvalConfig:
    max_steps: int = 200
    stride: int | None = 20
    metric: str = "euclidean"
    greedy: bool = True
    # the untrained policy has uniform logits, so argmax decoding would only
    # replay the first token; it is scored by sampling instead
    random_greedy: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    skip_tba: bool = False
    skip_grpo: bool = False
    skip_rl: bool = False
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tba: TbaConfig = field(default_factory=TbaConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    tba_sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        checks = [
            (self.scenes.n_train >= 1 and self.scenes.n_eval >= 1, "need at least one scene per split"),
            (self.dataset.train_episodes >= 1 and self.dataset.eval_episodes >= 1,
             "need at least one episode per split"),
            (self.dataset.scale > 0, "dataset.scale must be positive"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.tba.client in ("stub", "remote"), "tba.client must be 'stub' or 'remote'"),
            (self.tba.client != "remote" or bool(self.tba.endpoint), "remote client needs tba.endpoint"),
            (self.tba.stride >= 1, "tba.stride must be >= 1"),
            (self.grpo.G >= 2, "grpo.G must be >= 2"),
            (0 < self.grpo.eps < 1, "grpo.eps must lie in (0, 1)"),
            (self.grpo.kl in ("exp", "plain"), "grpo.kl must be 'exp' or 'plain'"),
            (self.rl.warmup >= 0, "rl.warmup must be >= 0"),
            (self.eval.max_steps >= 1, "eval.max_steps must be >= 1"),
            (self.eval.stride is None or self.eval.stride >= 1, "eval.stride must be >= 1 or null"),
            (self.eval.metric in ("euclidean", "geodesic"), "eval.metric must be euclidean or geodesic"),
        ]
        for sec in (self.sft, self.tba_sft, self.grpo, self.rl):
            checks.append((sec.steps >= 0, "steps must be >= 0"))
            checks.append((sec.lr > 0, "learning rates must be positive"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            raise ConfigError(f"unknown config key {where + k!r}")
        default = getattr(cls(), k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v, f"{where}{k}.")
        else:
            kwargs[k] = _coerce(v, default, where + k)
    return cls(**kwargs)


def _coerce(v, default, name: str):
    if isinstance(default, bool):
        if not isinstance(v, bool):
            raise ConfigError(f"{name}: expected true/false, got {v!r}")
        return v
    if isinstance(default, int) and not isinstance(v, bool) and isinstance(v, (int, float)):
        if float(v) != int(v):
            raise ConfigError(f"{name}: expected an integer, got {v!r}")
        return int(v)
    if isinstance(default, float) and not isinstance(v, bool) and isinstance(v, (int, float)):
        return float(v)
    if isinstance(default, str) and isinstance(v, str):
        return v
    if default is None or v is None:
        return v
    raise ConfigError(f"{name}: bad value {v!r}")


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> dict:
    """Nested override dict from ``OCTOKIT_*`` variables."""
    out: dict = {}
    sections = {f.name for f in dataclasses.fields(RunConfig)
                if dataclasses.is_dataclass(getattr(RunConfig(), f.name))}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or key == TbaConfig().api_key_env:
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if len(path) == 2 and path[0] in sections:
            out.setdefault(path[0], {})[path[1]] = _parse_env_value(raw)
        elif len(path) == 1:
            out[path[0]] = _parse_env_value(raw)
        else:
            raise ConfigError(f"cannot map environment variable {key}")
    return out


def _merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, environ: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> RunConfig:
    """Defaults, then the JSON file, then environment variables, then explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    data = _merge(data, env_overrides(os.environ if environ is None else environ))
    if overrides:
        data = _merge(data, overrides)
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def resolved(cfg: RunConfig) -> dict:
    """What gets written next to every output."""
    return {"tool_version": __version__, "config": cfg.to_dict()}
