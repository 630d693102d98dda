"""Training stages: supervised answer fitting, group-relative policy optimization and online actor-critic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import env
from .context import ContextTracker, replay_contexts
from .env import Action, ActionKind, Pose, Scene
from .metrics import success_area_member
from .policy import (
    PolicyParams, Sample, encode_answer, parse_answer, sample_answer, sequence_masks, token_logprobs,
)
from .tasks import Episode, SubGoal

log = logging.getLogger(__name__)

PROBE_CM = 25
WARMUP_STEPS = 100


class TrainingError(FloatingPointError):
    pass


class UnreachableError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# optimizer


@dataclass
class SGD:
    """SGD with heavy-ball momentum and optional global-norm clipping."""

    lr: float
    momentum: float = 0.9
    clip_norm: float | None = None
    velocity: dict = field(default_factory=dict)

    def step(self, params, grads: dict) -> None:
        arrays = params.arrays if isinstance(params, PolicyParams) else params
        if getattr(params, "frozen", False):
            raise ValueError("cannot update a frozen snapshot")
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = g * scale if v is None else self.momentum * v + g * scale
            self.velocity[k] = v
            arrays[k] -= self.lr * v


def _check_finite(loss: float, grads: dict, what: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss {loss}")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"{what}: non-finite gradient in {k}")


# --------------------------------------------------------------------------
# supervised stages


@dataclass(frozen=True)
class SftSample:
    context: np.ndarray
    tokens: tuple[int, ...]
    mode: str = "direct"


def sft_loss(P, batch: Sequence[SftSample]) -> ag.Tensor:
    """Batch mean of the per-sequence mean token negative log-likelihood."""
    X = np.stack([b.context for b in batch])
    lp, valid, _ = token_logprobs(P, X, [b.tokens for b in batch])
    inv_len = 1.0 / valid.sum(axis=1)
    per_seq = ag.mul(ag.sum(lp, axis=1), inv_len)
    return ag.neg(ag.mean(per_seq))


def _sft_step(params: PolicyParams, opt: SGD, batch: Sequence[SftSample], what: str) -> float:
    for b in batch:
        sequence_masks(b.tokens, b.mode)  # grammar check of the target
    loss, grads = ag.grad(params.arrays, lambda P: sft_loss(P, batch))
    _check_finite(loss, grads, what)
    opt.step(params, grads)
    return loss


def action_sft_step(params: PolicyParams, opt: SGD, batch: Sequence[SftSample]) -> float:
    return _sft_step(params, opt, batch, "action-sft")


def tba_sft_step(params: PolicyParams, opt: SGD, batch: Sequence[SftSample]) -> float:
    return _sft_step(params, opt, batch, "tba-sft")


def sft_samples(scene: Scene, episode: Episode) -> list[SftSample]:
    """Direct-mode targets for every ground-truth step."""
    return [SftSample(x, tuple(encode_answer(a)), "direct")
            for x, a in zip(replay_contexts(scene, episode, "direct"), episode.gt_actions)]


# --------------------------------------------------------------------------
# group-relative policy optimization


def _as_action(output) -> Action | None:
    if output is None or isinstance(output, Action):
        return output
    if isinstance(output, Sample):
        return output.action
    return parse_answer(output)[0]


def stepped_reward(output, gt: Action) -> float:
    """1 for matching kind and magnitude, 0.5 for matching kind only, else 0."""
    a = _as_action(output)
    if a is None or a.kind is not gt.kind:
        return 0.0
    return 1.0 if a.magnitude == gt.magnitude else 0.5


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two outputs")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class GrpoGroup:
    context: np.ndarray
    mode: str
    outputs: list
    rewards: np.ndarray
    advantages: np.ndarray
    old_logps: list


def sample_group(old: PolicyParams, context: np.ndarray, gt: Action, rng: np.random.Generator,
                 G: int = 8, mode: str = "direct", temperature: float = 1.0) -> GrpoGroup:
    outs = [sample_answer(old, context, mode, temperature, rng) for _ in range(G)]
    rewards = np.array([stepped_reward(o, gt) for o in outs])
    return GrpoGroup(context, mode, [o.tokens for o in outs], rewards, group_advantages(rewards),
                     [np.array(o.logprobs) for o in outs])


def kl_estimate(logp: np.ndarray | ag.Tensor, ref_logp: np.ndarray, kind: str = "exp"):
    """Per-token KL(pi || ref) estimate with ``delta = ref - logp``."""
    if kind == "exp":
        delta = ag.add(ref_logp, ag.neg(logp))
        return ag.add(ag.add(ag.exp(delta), ag.neg(delta)), -1.0)
    if kind == "plain":
        return ag.add(logp, ag.neg(ag.as_tensor(ref_logp)))
    raise ValueError(f"unknown KL estimator {kind!r}")


def grpo_surrogate(ratio, adv, eps: float):
    """``min(c1 * adv, clip(c1, 1-eps, 1+eps) * adv)`` with the unclipped branch on ties."""
    return ag.minimum(ag.mul(ratio, adv), ag.mul(ag.clip(ratio, 1.0 - eps, 1.0 + eps), adv))


def _group_arrays(groups: Sequence[GrpoGroup]):
    seqs, masks, adv, old, owner = [], [], [], [], []
    for gi, g in enumerate(groups):
        for o, a, lp in zip(g.outputs, g.advantages, g.old_logps):
            seqs.append(list(o))
            masks.append(sequence_masks(o, g.mode))
            adv.append(a)
            old.append(lp)
            owner.append(gi)
    T = max(len(s) for s in seqs)
    old_pad = np.zeros((len(seqs), T))
    for b, lp in enumerate(old):
        old_pad[b, :len(lp)] = lp
    X = np.stack([groups[i].context for i in owner])
    return X, seqs, masks, np.array(adv), old_pad, np.array(owner)


def grpo_loss(P, groups: Sequence[GrpoGroup], sft_logp: np.ndarray, eps: float = 0.2,
              beta: float = 1e-4, kl: str = "exp", packed=None) -> ag.Tensor:
    """Mean over groups of ``-(1/G) sum_j (1/|o_j|) sum_t [surrogate - beta * KL]``."""
    X, seqs, masks, adv, old_pad, owner = packed or _group_arrays(groups)
    lp, valid, _ = token_logprobs(P, X, seqs, masks)
    vf = valid.astype(float)
    ratio = ag.exp(ag.add(lp, -old_pad))
    surr = grpo_surrogate(ratio, adv[:, None], eps)
    pen = kl_estimate(lp, sft_logp, kl)
    per_tok = ag.mul(ag.add(surr, ag.mul(pen, -beta)), vf)
    per_seq = ag.mul(ag.sum(per_tok, axis=1), 1.0 / valid.sum(axis=1))
    G = np.bincount(owner)[owner].astype(float)
    return ag.neg(ag.mul(ag.sum(ag.mul(per_seq, 1.0 / G)), 1.0 / len(groups)))


@dataclass
class GrpoStats:
    loss: float
    skipped: int
    mean_reward: float


def grpo_step(params: PolicyParams, opt: SGD, old: PolicyParams, sft: PolicyParams,
              groups: Sequence[GrpoGroup], eps: float = 0.2, beta: float = 1e-4,
              kl: str = "exp", max_gap: float = 30.0) -> GrpoStats:
    """One gradient step of the clipped group objective; groups with huge log-prob gaps are skipped."""
    del old  # old log-probs were recorded when the groups were sampled
    keep, skipped = [], 0
    for g in groups:
        packed = _group_arrays([g])
        X, seqs, masks = packed[:3]
        cur = token_logprobs(params, X, seqs, masks)[0].data
        ref = token_logprobs(sft, X, seqs, masks)[0].data
        if np.abs(cur - packed[4]).max() > max_gap or np.abs(ref - cur).max() > max_gap:
            skipped += 1
            continue
        keep.append(g)
    mean_r = float(np.mean([g.rewards.mean() for g in groups])) if groups else 0.0
    if skipped:
        log.warning("grpo: skipped %d group(s) with log-prob gap > %s nats", skipped, max_gap)
    if not keep:
        return GrpoStats(0.0, skipped, mean_r)
    packed = _group_arrays(keep)
    X, seqs, masks = packed[:3]
    sft_logp = token_logprobs(sft, X, seqs, masks)[0].data
    loss, grads = ag.grad(params.arrays, lambda P: grpo_loss(P, keep, sft_logp, eps, beta, kl, packed))
    _check_finite(loss, grads, "nav-grpo")
    opt.step(params, grads)
    return GrpoStats(loss, skipped, mean_r)


# --------------------------------------------------------------------------
# online actor-critic


def online_reward(scene: Scene, subgoal: SubGoal, S: Pose, action: Action, S_next: Pose,
                  probe_cm: int = PROBE_CM, commit_probe: bool = True) -> tuple[float, Pose, bool]:
    """Reward of one online step and the pose the agent ends in.

    Non-moving actions are followed by a short forward probe before the new
    distance is measured; with ``commit_probe`` the agent keeps the probed pose.
    Returns ``(reward, next_pose, success)``.
    """
    measured = S_next
    if action.kind is not ActionKind.FORWARD and not success_area_member(scene, S_next, subgoal):
        measured = env.move_forward(scene, S_next, probe_cm / 100.0)
    nxt = measured if commit_probe else S_next
    if success_area_member(scene, measured, subgoal):
        return 1.0, nxt, True
    d0 = env.geodesic_distance(scene, S, subgoal.target_xy)
    d1 = env.geodesic_distance(scene, measured, subgoal.target_xy)
    if not (math.isfinite(d0) and math.isfinite(d1)):
        raise UnreachableError("current sub-goal unreachable from the agent pose")
    return -(d1 - d0), nxt, False


@dataclass
class Critic:
    """Affine value head on the mean of the (detached) encoder and first decoder states."""

    w: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "Critic":
        return cls(np.zeros(hidden), np.zeros(()))

    @property
    def arrays(self) -> dict:
        return {"w": self.w, "b": self.b}


def critic_features(params: PolicyParams, X: np.ndarray) -> np.ndarray:
    _, _, extra = token_logprobs(params, np.atleast_2d(X), [[0]] * len(np.atleast_2d(X)))
    return 0.5 * (extra["h"].data + extra["z1"].data)


def critic_value(critic: Critic, feats: np.ndarray) -> np.ndarray:
    return feats @ critic.w + critic.b


@dataclass(frozen=True)
class RlTransition:
    context: np.ndarray
    tokens: tuple[int, ...]
    mode: str
    next_context: np.ndarray
    reward: float
    terminal: bool
    d_s: float = math.nan
    d_s_next: float = math.nan
    success: bool = False


def a2c_losses(P, C, transitions: Sequence[RlTransition], feats, next_values, gamma: float = 1.0):
    """Actor and critic losses as Tensors; the TD error is a constant inside the actor loss."""
    r = np.array([t.reward for t in transitions])
    v = ag.add(ag.matmul(feats, C["w"]), C["b"])
    target = r + gamma * next_values
    e = ag.add(target, ag.neg(v))
    critic = ag.mean(ag.mul(e, e))
    e_const = e.data
    X = np.stack([t.context for t in transitions])
    seqs = [t.tokens for t in transitions]
    masks = [sequence_masks(t.tokens, t.mode) for t in transitions]
    lp, valid, _ = token_logprobs(P, X, seqs, masks)
    per_seq = ag.mul(ag.sum(lp, axis=1), 1.0 / valid.sum(axis=1))
    actor = ag.neg(ag.mean(ag.mul(per_seq, e_const)))
    return actor, critic, e_const


@dataclass
class A2cStats:
    actor_loss: float
    critic_loss: float
    mean_td: float
    policy_updated: bool


def a2c_step(params: PolicyParams, critic: Critic, actor_opt: SGD, critic_opt: SGD,
             transitions: Sequence[RlTransition], step: int, warmup: int = WARMUP_STEPS,
             gamma: float = 1.0) -> A2cStats:
    """One TD(0) actor-critic update; the policy stays frozen for the first ``warmup`` steps."""
    if not transitions:
        raise ValueError("no transitions")
    X = np.stack([t.context for t in transitions])
    Xn = np.stack([t.next_context for t in transitions])
    feats = critic_features(params, X)
    next_feats = critic_features(params, Xn)
    terminal = np.array([t.terminal for t in transitions])
    next_values = np.where(terminal, 0.0, critic_value(critic, next_feats))

    c_loss, c_grads = ag.grad(
        critic.arrays, lambda C: a2c_losses(params, C, transitions, feats, next_values, gamma)[1])
    _check_finite(c_loss, c_grads, "critic")
    actor_loss = math.nan
    updated = step >= warmup
    if updated:
        actor_loss, a_grads = ag.grad(
            params.arrays,
            lambda P: a2c_losses(P, critic.arrays, transitions, feats, next_values, gamma)[0])
        _check_finite(actor_loss, a_grads, "actor")
    else:
        actor_loss = float(a2c_losses(params, critic.arrays, transitions, feats, next_values,
                                      gamma)[0].data)
    td = float(np.mean(np.array([t.reward for t in transitions]) + gamma * next_values
                       - critic_value(critic, feats)))
    critic_opt.step(critic.arrays, c_grads)
    if updated:
        actor_opt.step(params, a_grads)
    return A2cStats(actor_loss, c_loss, td, updated)


# --------------------------------------------------------------------------
# drivers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]


def train_supervised(params: PolicyParams, samples: Sequence[SftSample], steps: int, lr: float,
                     batch_size: int = 32, momentum: float = 0.9, clip_norm: float | None = 5.0,
                     seed: int = 0, step_fn: Callable = action_sft_step,
                     on_step: Callable | None = None) -> list[dict]:
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng([seed, 11])
    opt = SGD(lr, momentum, clip_norm)
    curve = []
    it = _batches(len(samples), batch_size, rng)
    for step in range(steps):
        idx = next(it)
        loss = step_fn(params, opt, [samples[i] for i in idx])
        curve.append({"step": step, "loss": loss})
        if on_step:
            on_step(step, loss)
    return curve


@dataclass(frozen=True)
class GrpoContext:
    context: np.ndarray
    gt: Action
    mode: str = "direct"


def grpo_contexts(scenes: dict, episodes: Sequence[Episode], n: int, seed: int) -> list[GrpoContext]:
    """Up to ``n`` (context, ground-truth action) pairs drawn from ground-truth replays."""
    pool = []
    for ep in episodes:
        for x, a in zip(replay_contexts(scenes[ep.scene_id], ep), ep.gt_actions):
            pool.append(GrpoContext(x, a))
    rng = np.random.default_rng([seed, 13])
    idx = rng.permutation(len(pool))[:n]
    return [pool[i] for i in sorted(idx)]


def train_grpo(params: PolicyParams, sft: PolicyParams, contexts: Sequence[GrpoContext], steps: int,
               lr: float, groups_per_step: int = 4, G: int = 8, eps: float = 0.2, beta: float = 1e-4,
               kl: str = "exp", inner_steps: int = 2, temperature: float = 1.0,
               momentum: float = 0.9, clip_norm: float | None = 5.0, seed: int = 0) -> list[dict]:
    from .policy import snapshot
    rng = np.random.default_rng([seed, 17])
    opt = SGD(lr, momentum, clip_norm)
    curve = []
    for step in range(steps):
        old = snapshot(params)
        pick = rng.integers(len(contexts), size=groups_per_step)
        groups = [sample_group(old, contexts[i].context, contexts[i].gt, rng, G, contexts[i].mode,
                               temperature) for i in pick]
        for _ in range(inner_steps):
            stats = grpo_step(params, opt, old, sft, groups, eps, beta, kl)
        curve.append({"step": step, "loss": stats.loss, "reward": stats.mean_reward,
                      "skipped": stats.skipped})
    return curve


def collect_episode(params: PolicyParams, scene: Scene, episode: Episode, rng: np.random.Generator,
                    max_steps: int = 60, temperature: float = 1.0, probe_cm: int = PROBE_CM,
                    commit_probe: bool = True) -> list[RlTransition]:
    """Roll the policy out with online rewards; the current goal advances on success."""
    tr = ContextTracker(scene, episode)
    out = []
    for _ in range(max_steps):
        if tr.all_done:
            break
        sg = tr.current
        x = tr.features("direct")
        smp = sample_answer(params, x, "direct", temperature, rng)
        action = smp.action
        S = tr.pose
        S_next = env.step(scene, S, action)
        try:
            r, nxt, ok = online_reward(scene, sg, S, action, S_next, probe_cm, commit_probe)
        except UnreachableError as exc:
            log.warning("episode %s aborted: %s", episode.id, exc)
            break
        tr.step(action, nxt)
        if ok and tr.current is sg:
            tr.done += 1
        terminal = tr.all_done or action.kind is ActionKind.STOP
        out.append(RlTransition(x, smp.tokens, "direct", tr.features("direct"), r, terminal,
                                success=ok))
        if terminal:
            break
    return out


def train_rl(params: PolicyParams, scenes: dict, episodes: Sequence[Episode], steps: int, lr: float,
             critic_lr: float, warmup: int = WARMUP_STEPS, gamma: float = 1.0,
             episodes_per_step: int = 2, max_steps: int = 60, temperature: float = 1.0,
             probe_cm: int = PROBE_CM, commit_probe: bool = True, momentum: float = 0.9,
             clip_norm: float | None = 5.0, seed: int = 0) -> tuple[Critic, list[dict]]:
    rng = np.random.default_rng([seed, 19])
    hidden = params["W_in"].shape[1]
    critic = Critic.zeros(hidden)
    actor_opt = SGD(lr, momentum, clip_norm)
    critic_opt = SGD(critic_lr, momentum, clip_norm)
    curve = []
    for step in range(steps):
        trans = []
        for i in rng.integers(len(episodes), size=episodes_per_step):
            ep = episodes[i]
            trans += collect_episode(params, scenes[ep.scene_id], ep, rng, max_steps, temperature,
                                     probe_cm, commit_probe)
        if not trans:
            continue
        st = a2c_step(params, critic, actor_opt, critic_opt, trans, step, warmup, gamma)
        curve.append({"step": step, "actor_loss": st.actor_loss, "critic_loss": st.critic_loss,
                      "reward": float(np.mean([t.reward for t in trans])),
                      "policy_updated": st.policy_updated})
    return critic, curve


def tba_sft_samples(scene: Scene, episode: Episode, samples) -> list[SftSample]:
    """Think/Action targets at the steps covered by reasoning samples."""
    if not samples:
        return []
    contexts = replay_contexts(scene, episode, "tba")
    return [SftSample(contexts[s.step], tuple(encode_answer(s.action, "tba", s.think)), "tba")
            for s in samples]
