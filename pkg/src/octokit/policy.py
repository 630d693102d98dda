"""Tiny autoregressive answer policy.

A context vector is encoded once (``h = tanh(x W_in + b_in)``); a two-layer
recurrent decoder then emits answer tokens::

    s_t = tanh(s_{t-1} W_s + E[y_{t-1}] W_e + h W_c + b_s)
    z_t = tanh(s_t W_z + h W_c2 + b_z)
    logits_t = z_t W_o + b_o

Output weights start at zero, so a fresh policy is uniform over the vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .context import CONTEXT_DIM, MODES
from .env import FORWARD_BINS_CM, TURN_BINS_DEG, Action, ActionKind

# --------------------------------------------------------------------------
# vocabulary

ACTION_TOKENS = ("FORWARD", "LEFT", "RIGHT", "STOP")
MAGNITUDE_TOKENS = tuple(f"{m}cm" for m in FORWARD_BINS_CM) + tuple(f"{d}deg" for d in TURN_BINS_DEG)
STRUCTURE_TOKENS = ("<Think>", "</Think>", "<Action>", "</Action>", "<EOS>")


def _think_words() -> tuple[str, ...]:
    text = resources.files("octokit").joinpath("data/think.json").read_text(encoding="utf-8")
    return tuple(json.loads(text)["words"])


THINK_WORDS = _think_words()
VOCAB = ACTION_TOKENS + MAGNITUDE_TOKENS + STRUCTURE_TOKENS + THINK_WORDS
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
V = len(VOCAB)
MAX_ANSWER_LEN = 48

THINK, END_THINK, ACT, END_ACT, EOS = (TOKEN_ID[t] for t in STRUCTURE_TOKENS)
_KIND_TOKEN = {
    ActionKind.FORWARD: "FORWARD", ActionKind.LEFT: "LEFT",
    ActionKind.RIGHT: "RIGHT", ActionKind.STOP: "STOP",
}
_TOKEN_KIND = {v: k for k, v in _KIND_TOKEN.items()}
_ACTION_IDS = np.array([TOKEN_ID[t] for t in ACTION_TOKENS])
_FORWARD_MAG_IDS = np.array([TOKEN_ID[f"{m}cm"] for m in FORWARD_BINS_CM])
_TURN_MAG_IDS = np.array([TOKEN_ID[f"{d}deg"] for d in TURN_BINS_DEG])
_WORD_IDS = np.array([TOKEN_ID[w] for w in THINK_WORDS])


class VocabError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def action_tokens(action: Action) -> list[int]:
    ids = [TOKEN_ID[_KIND_TOKEN[action.kind]]]
    if action.kind is ActionKind.FORWARD:
        ids.append(TOKEN_ID[f"{action.magnitude}cm"])
    elif action.kind is not ActionKind.STOP:
        ids.append(TOKEN_ID[f"{action.magnitude}deg"])
    return ids


def encode_answer(action: Action, mode: str = "direct", think: str | Sequence[str] = ()) -> list[int]:
    """Token ids of a direct answer, or of a Think/Action answer in tba mode."""
    if mode == "direct":
        return action_tokens(action) + [EOS]
    words = think.split() if isinstance(think, str) else list(think)
    try:
        wids = [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise VocabError(f"think word {exc.args[0]!r} not in vocabulary") from exc
    if any(TOKEN_ID[w] not in _WORD_IDS for w in words):
        raise VocabError("think span may only contain think words")
    return [THINK, *wids, END_THINK, ACT, *action_tokens(action), END_ACT, EOS]


def decode_tokens(ids: Sequence[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def _action_from(ids: Sequence[int]) -> Action | None:
    if not ids or ids[0] not in _ACTION_IDS:
        return None
    kind = _TOKEN_KIND[VOCAB[ids[0]]]
    if kind is ActionKind.STOP:
        return Action(kind) if len(ids) == 1 else None
    if len(ids) != 2:
        return None
    tok = VOCAB[ids[1]]
    try:
        if kind is ActionKind.FORWARD and tok.endswith("cm"):
            return Action(kind, int(tok[:-2]))
        if kind is not ActionKind.FORWARD and tok.endswith("deg"):
            return Action(kind, int(tok[:-3]))
    except ValueError:
        return None
    return None


def parse_answer(ids: Sequence[int]) -> tuple[Action | None, str]:
    """``(action, think_text)``; action is None when the sequence is not well formed."""
    ids = list(ids)
    if ids and ids[-1] == EOS:
        ids = ids[:-1]
    if ids and ids[0] == THINK:
        try:
            e = ids.index(END_THINK)
        except ValueError:
            return None, ""
        think = " ".join(VOCAB[i] for i in ids[1:e])
        rest = ids[e + 1:]
        if len(rest) < 3 or rest[0] != ACT or rest[-1] != END_ACT:
            return None, think
        return _action_from(rest[1:-1]), think
    return _action_from(ids), ""


# --------------------------------------------------------------------------
# grammar


def allowed_tokens(prefix: Sequence[int], mode: str, max_len: int = MAX_ANSWER_LEN) -> np.ndarray:
    """Boolean mask of tokens that keep ``prefix`` inside the answer grammar."""
    m = np.zeros(V, dtype=bool)
    n = len(prefix)
    last = prefix[-1] if prefix else None
    if last == EOS:
        return m
    if mode == "direct":
        if n == 0:
            m[_ACTION_IDS] = True
        elif n == 1:
            kind = _TOKEN_KIND.get(VOCAB[last])
            if kind is ActionKind.STOP:
                m[EOS] = True
            elif kind is ActionKind.FORWARD:
                m[_FORWARD_MAG_IDS] = True
            else:
                m[_TURN_MAG_IDS] = True
        else:
            m[EOS] = True
        return m
    if mode != "tba":
        raise ValueError(f"unknown mode {mode!r}")
    if n == 0:
        m[THINK] = True
        return m
    if END_THINK not in prefix:
        # leave room for </Think> <Action> a m </Action> <EOS>
        if n + 6 < max_len:
            m[_WORD_IDS] = True
        m[END_THINK] = True
        return m
    if last == END_THINK:
        m[ACT] = True
    elif last == ACT:
        m[_ACTION_IDS] = True
    elif last in _ACTION_IDS:
        kind = _TOKEN_KIND[VOCAB[last]]
        if kind is ActionKind.STOP:
            m[END_ACT] = True
        elif kind is ActionKind.FORWARD:
            m[_FORWARD_MAG_IDS] = True
        else:
            m[_TURN_MAG_IDS] = True
    elif last in _FORWARD_MAG_IDS or last in _TURN_MAG_IDS:
        m[END_ACT] = True
    elif last == END_ACT:
        m[EOS] = True
    return m


def sequence_masks(ids: Sequence[int], mode: str) -> np.ndarray:
    """(T, V) masks for teacher-forced positions; raises if ``ids`` leaves the grammar."""
    out = np.zeros((len(ids), V), dtype=bool)
    for t in range(len(ids)):
        out[t] = allowed_tokens(ids[:t], mode)
        if not out[t, ids[t]]:
            raise VocabError(f"token {VOCAB[ids[t]]!r} at position {t} violates the {mode} grammar")
    return out


# --------------------------------------------------------------------------
# parameters

CHECKPOINT_MAGIC = b"OCTKPOL\0"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class PolicyParams:
    arrays: dict
    version: int = CHECKPOINT_VERSION
    frozen: bool = field(default=False, compare=False)

    def __getitem__(self, k):
        return self.arrays[k]

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.version)

    def assert_finite(self) -> None:
        for k, v in self.arrays.items():
            if not np.isfinite(v).all():
                raise FloatingPointError(f"non-finite values in parameter {k}")


def init_params(rng: np.random.Generator, hidden: int = 64, embed: int = 16,
                context_dim: int = CONTEXT_DIM) -> PolicyParams:
    def w(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
    arrays = {
        "E": rng.normal(0.0, 0.5, size=(V + 1, embed)),  # last row is the start token
        "W_in": w(context_dim, hidden), "b_in": np.zeros(hidden),
        "W_s": w(hidden, hidden), "W_e": w(embed, hidden), "W_c": w(hidden, hidden),
        "b_s": np.zeros(hidden),
        "W_z": w(hidden, hidden), "W_c2": w(hidden, hidden), "b_z": np.zeros(hidden),
        "W_o": np.zeros((hidden, V)), "b_o": np.zeros(V),
    }
    return PolicyParams(arrays)


def snapshot(params: PolicyParams) -> PolicyParams:
    """Read-only deep copy."""
    out = params.copy()
    for a in out.arrays.values():
        a.setflags(write=False)
    out.frozen = True
    return out


def save(params: PolicyParams, path) -> None:
    names = sorted(params.arrays)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", params.version, len(names)))
        for k in names:
            a = params.arrays[k]
            kb = k.encode()
            f.write(struct.pack("<H", len(kb)) + kb)
            f.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        for k in names:
            f.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load(path, expected_version: int = CHECKPOINT_VERSION) -> PolicyParams:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a policy checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != expected_version:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {expected_version}")
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(data):
            raise CheckpointError(f"{path}: truncated values for {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    return PolicyParams(arrays, version)


# --------------------------------------------------------------------------
# forward passes


def _get(P) -> Mapping:
    return P.arrays if isinstance(P, PolicyParams) else P


def encode(P, X) -> ag.Tensor:
    P = _get(P)
    return ag.tanh(ag.matmul(X, P["W_in"]) + P["b_in"])


def _step(P, h_c, h_c2, s_prev, prev_ids):
    e = ag.embedding(P["E"], prev_ids)
    pre = ag.matmul(e, P["W_e"]) + h_c + P["b_s"]
    if s_prev is not None:
        pre = pre + ag.matmul(s_prev, P["W_s"])
    s = ag.tanh(pre)
    z = ag.tanh(ag.matmul(s, P["W_z"]) + h_c2 + P["b_z"])
    return s, z


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), EOS, dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        valid[b, :len(s)] = True
    return ids, valid


def token_logprobs(P, X, seqs: Sequence[Sequence[int]], masks: Sequence[np.ndarray] | None = None,
                   temperature: float = 1.0) -> tuple[ag.Tensor, np.ndarray, dict]:
    """Teacher-forced log-probabilities of every target token.

    Returns ``(logp (B, T), valid (B, T), extras)``; padded positions hold 0.
    ``masks`` (per sequence, (T_b, V)) restrict the softmax to grammar-valid
    tokens; without them the softmax covers the whole vocabulary.
    """
    P = _get(P)
    X = ag.as_tensor(np.atleast_2d(X) if not isinstance(X, ag.Tensor) else X)
    ids, valid = _pad(seqs)
    B, T = ids.shape
    h = encode(P, X)
    h_c = ag.matmul(h, P["W_c"])
    h_c2 = ag.matmul(h, P["W_c2"])
    prev = np.full(B, V, dtype=np.int64)
    s = None
    cols = []
    z_first = None
    full_masks = None
    if masks is not None:
        full_masks = np.ones((B, T, V), dtype=bool)
        for b, m in enumerate(masks):
            full_masks[b, :len(m)] = m
    for t in range(T):
        s, z = _step(P, h_c, h_c2, s, prev)
        if t == 0:
            z_first = z
        logits = ag.matmul(z, P["W_o"]) + P["b_o"]
        if temperature != 1.0:
            logits = logits * (1.0 / temperature)
        lp = ag.log_softmax(logits, None if full_masks is None else full_masks[:, t])
        picked = ag.gather(lp, ids[:, t])
        cols.append(ag.mul(ag.reshape(picked, (B, 1)), valid[:, t:t + 1].astype(float)))
        prev = ids[:, t]
    return ag.concat(cols, axis=1), valid, {"h": h, "z1": z_first}


def log_prob(params, context: np.ndarray, tokens: Sequence[int], mode: str | None = None,
             masked: bool = False, temperature: float = 1.0) -> np.ndarray:
    """Per-token log-probabilities of ``tokens`` given one context vector."""
    bad = [t for t in tokens if not 0 <= t < V]
    if bad:
        raise VocabError(f"token ids {bad} outside vocabulary of size {V}")
    masks = None
    if masked:
        if mode is None:
            raise ValueError("masked log-probabilities need a mode")
        masks = [sequence_masks(tokens, mode)]
    lp, _, _ = token_logprobs(params, context, [list(tokens)], masks, temperature)
    return lp.data[0, :len(tokens)].copy()


def next_token_distribution(params, context: np.ndarray, prefix: Sequence[int],
                            mode: str | None = None, temperature: float = 1.0) -> np.ndarray:
    """Probabilities over the vocabulary for the token following ``prefix``."""
    P = _get(params)
    X = np.atleast_2d(context)
    h = np.tanh(X @ P["W_in"] + P["b_in"])
    h_c, h_c2 = h @ P["W_c"], h @ P["W_c2"]
    s = None
    prev = V
    for t in range(len(prefix) + 1):
        pre = P["E"][prev] @ P["W_e"] + h_c + P["b_s"]
        if s is not None:
            pre = pre + s @ P["W_s"]
        s = np.tanh(pre)
        if t < len(prefix):
            prev = prefix[t]
    z = np.tanh(s @ P["W_z"] + h_c2 + P["b_z"])
    logits = (z @ P["W_o"] + P["b_o"])[0]
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    if mode is not None:
        allowed = allowed_tokens(prefix, mode)
        logits = np.where(allowed, logits, -np.inf)
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    mode: str

    @property
    def action(self) -> Action | None:
        return parse_answer(self.tokens)[0]

    @property
    def think(self) -> str:
        return parse_answer(self.tokens)[1]


def sample_answer(params, context: np.ndarray, mode: str = "direct", temperature: float = 1.0,
                  rng: np.random.Generator | None = None, greedy: bool = False) -> Sample:
    """Grammar-masked ancestral sampling (or argmax decoding when ``greedy``).

    Recorded log-probabilities are those of the masked distribution at
    ``temperature``, i.e. ``log_prob(..., masked=True, temperature=...)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if temperature <= 0:
        raise ValueError("temperature must be positive; use greedy=True for argmax decoding")
    if rng is None and not greedy:
        raise ValueError("sampling needs an rng")
    P = _get(params)
    X = np.atleast_2d(context)
    h = np.tanh(X @ P["W_in"] + P["b_in"])
    h_c, h_c2 = h @ P["W_c"], h @ P["W_c2"]
    s = None
    prev = V
    out: list[int] = []
    lps: list[float] = []
    while len(out) < MAX_ANSWER_LEN:
        pre = P["E"][prev] @ P["W_e"] + h_c + P["b_s"]
        if s is not None:
            pre = pre + s @ P["W_s"]
        s = np.tanh(pre)
        z = np.tanh(s @ P["W_z"] + h_c2 + P["b_z"])
        logits = (z @ P["W_o"] + P["b_o"])[0]
        if temperature != 1.0:
            logits = logits * (1.0 / temperature)
        allowed = allowed_tokens(out, mode)
        logits = np.where(allowed, logits, -np.inf)
        m = logits.max()
        lse = m + np.log(np.exp(logits - m).sum())
        logp = logits - lse
        if greedy:
            tok = int(np.argmax(logp))
        else:
            p = np.exp(logp)
            cdf = np.cumsum(p)
            tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            tok = min(tok, V - 1)
            while not allowed[tok]:  # guard against float edge cases
                tok -= 1
        out.append(tok)
        lps.append(float(logp[tok]))
        prev = tok
        if tok == EOS:
            break
    return Sample(tuple(out), tuple(lps), mode)
