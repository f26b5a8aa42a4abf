"""Human surrogate: protocol-table messaging with stochastic table updates,
calibrated communication noise, and adaptive noise under distribution shift.

The surrogate samples messages from a context-conditioned protocol table,
optionally modulated by a small learned message head on its recurrent state.
Table entries drift toward whatever the AI or the instructor suggests, with
probability p_update per trigger.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gridworld import (
    AI_VOCAB, HUMAN_COUNTS, HUMAN_DIRECTIONS, HUMAN_LANDMARKS, HUMAN_MACROS,
    FullView, Message, T_MAX,
)
from .neural import Embedding, GRUCell, Linear

# Candidate surrogate messages: bare directions and direction+count pairs.
CANDIDATE_MESSAGES: tuple[tuple[str, ...], ...] = tuple(
    [(d,) for d in HUMAN_DIRECTIONS]
    + [(d, c) for d in HUMAN_DIRECTIONS for c in HUMAN_COUNTS]
)
MESSAGE_INDEX = {m: i for i, m in enumerate(CANDIDATE_MESSAGES)}
N_MESSAGES = len(CANDIDATE_MESSAGES)

DIST_BUCKETS = ("near", "mid", "far")
QUADRANTS = ("HERE", "N", "NE", "E", "SE", "S", "SW", "W", "NW")
AI_CLASSES = ("none",) + AI_VOCAB

HIDDEN_SIZE = 32
EMBED_DIM = 16
VIEW_FEATURES = 12

# intervention embedding indices: 0 = none (zero vector)
INTERVENTION_TOKENS = ("protocol:direction", "protocol:count", "protocol:landmark",
                       "protocol:macro", "strategy:follow_direction",
                       "strategy:trust_count", "strategy:request_more")


@dataclass
class SurrogateConfig:
    p_update: float = 0.1
    token_flip: float = 0.05      # epsilon
    count_drift: float = 0.05     # delta
    token_flip_ood: float = 0.1   # epsilon under shift without instructor
    update_step: float = 0.3      # mass shifted toward the suggested message
    init_correct_mass: float = 0.4

    def __post_init__(self):
        for v in (self.p_update, self.token_flip, self.count_drift,
                  self.token_flip_ood):
            if not 0.0 <= v <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class ProtocolTable:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "entries": {
                k: {" ".join(CANDIDATE_MESSAGES[i]): p
                    for i, p in enumerate(v) if p > 1e-12}
                for k, v in self.entries.items()
            },
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolTable":
        raw = json.loads(text)
        entries = {}
        for k, dist in raw["entries"].items():
            v = np.zeros(N_MESSAGES)
            for msg, p in dist.items():
                v[MESSAGE_INDEX[tuple(msg.split())]] = p
            entries[k] = v / v.sum()
        return cls(entries=entries, version=raw["version"])


@dataclass
class HumanState:
    hidden: np.ndarray
    table: ProtocolTable
    noise_mode: str = "nominal"  # "nominal" | "shifted_unguided"


@dataclass
class SurrogateNets:
    """Recurrent cell plus the learned message head modulating table sampling."""
    cell: GRUCell
    ai_msg_embed: Embedding
    intervention_embed: Embedding
    msg_head: Linear

    @classmethod
    def create(cls, rng: np.random.Generator) -> "SurrogateNets":
        nin = VIEW_FEATURES + EMBED_DIM + EMBED_DIM
        return cls(
            cell=GRUCell(nin, HIDDEN_SIZE, rng),
            ai_msg_embed=Embedding(len(AI_VOCAB), EMBED_DIM, rng),
            intervention_embed=Embedding(len(INTERVENTION_TOKENS), EMBED_DIM, rng),
            msg_head=Linear(HIDDEN_SIZE, N_MESSAGES, rng),
        )

    def modules(self) -> dict:
        return {"cell": self.cell, "ai_msg_embed": self.ai_msg_embed,
                "intervention_embed": self.intervention_embed,
                "msg_head": self.msg_head}


# -- context ------------------------------------------------------------------

def goal_delta(view: FullView) -> tuple[int, int]:
    return view.goal[0] - view.pose[0], view.goal[1] - view.pose[1]


def distance_bucket(view: FullView) -> str:
    d = abs(view.goal[0] - view.pose[0]) + abs(view.goal[1] - view.pose[1])
    if d <= 2:
        return "near"
    if d <= 5:
        return "mid"
    return "far"


def goal_quadrant(view: FullView) -> str:
    dr, dc = goal_delta(view)
    if dr == 0 and dc == 0:
        return "HERE"
    ns = "N" if dr < 0 else ("S" if dr > 0 else "")
    ew = "E" if dc > 0 else ("W" if dc < 0 else "")
    return ns + ew


def ai_message_class(ai_msg: Message) -> str:
    return ai_msg.tokens[0] if ai_msg.tokens else "none"


def context_key(view: FullView, ai_msg: Message) -> str:
    return f"{distance_bucket(view)}|{goal_quadrant(view)}|{ai_message_class(ai_msg)}"


def encode_view(view: FullView) -> np.ndarray:
    """12-dim feature vector for the surrogate's recurrent input."""
    h, w = view.obstacles.shape
    dr, dc = goal_delta(view)
    feats = np.zeros(VIEW_FEATURES)
    feats[0] = dr / h
    feats[1] = dc / w
    feats[2] = (abs(dr) + abs(dc)) / (h + w)
    feats[3 + "NESW".index(view.heading)] = 1.0
    r, c = view.pose
    deltas = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
    for i, d in enumerate("NESW"):
        rr, cc = r + deltas[d][0], c + deltas[d][1]
        blocked = not (0 <= rr < h and 0 <= cc < w) or view.obstacles[rr, cc]
        feats[7 + i] = float(blocked)
    feats[11] = view.step_count / T_MAX
    return feats


# -- hint policy and suggestions ----------------------------------------------

def default_hint_message(view: FullView) -> tuple[str, ...]:
    """Competent fallback: the true goal direction plus the clipped step count."""
    dr, dc = goal_delta(view)
    if dr == 0 and dc == 0:
        return ("N", "1")
    if abs(dr) >= abs(dc):
        direction = "N" if dr < 0 else "S"
        count = min(4, max(1, abs(dr)))
    else:
        direction = "E" if dc > 0 else "W"
        count = min(4, max(1, abs(dc)))
    return (direction, str(count))


def suggested_message(trigger: str, view: FullView,
                      payload: Optional[str] = None) -> tuple[str, ...]:
    """Message class a trigger pushes the table toward."""
    hint = default_hint_message(view)
    if trigger == "ai_message" and payload == "REQ-DIR":
        return (hint[0],)
    return hint


def correct_directions(view: FullView) -> tuple[str, ...]:
    dr, dc = goal_delta(view)
    dirs = []
    if dr < 0:
        dirs.append("N")
    if dr > 0:
        dirs.append("S")
    if dc > 0:
        dirs.append("E")
    if dc < 0:
        dirs.append("W")
    return tuple(dirs) or ("N",)


def initial_entry(ctx: str, cfg: SurrogateConfig) -> np.ndarray:
    """Protocol-naive prior: partial mass on the context's true direction family,
    the rest spread over all candidate messages."""
    _, quadrant, _ = ctx.split("|")
    dirs = tuple(d for d in HUMAN_DIRECTIONS if d in quadrant) or HUMAN_DIRECTIONS
    dist = np.full(N_MESSAGES, (1.0 - cfg.init_correct_mass) / N_MESSAGES)
    members = [i for i, m in enumerate(CANDIDATE_MESSAGES) if m[0] in dirs]
    dist[members] += cfg.init_correct_mass / len(members)
    return dist / dist.sum()


def build_initial_table(cfg: SurrogateConfig) -> ProtocolTable:
    entries = {}
    for b in DIST_BUCKETS:
        for q in QUADRANTS:
            for a in AI_CLASSES:
                ctx = f"{b}|{q}|{a}"
                entries[ctx] = initial_entry(ctx, cfg)
    return ProtocolTable(entries=entries)


def make_human_state(cfg: SurrogateConfig,
                     table: Optional[ProtocolTable] = None) -> HumanState:
    return HumanState(hidden=np.zeros(HIDDEN_SIZE),
                      table=table if table is not None else build_initial_table(cfg))


# -- noise --------------------------------------------------------------------

def _category(token: str) -> tuple[str, tuple[str, ...]]:
    for name, cat in (("direction", HUMAN_DIRECTIONS), ("count", HUMAN_COUNTS),
                      ("landmark", HUMAN_LANDMARKS), ("macro", HUMAN_MACROS)):
        if token in cat:
            return name, cat
    raise ValueError(f"unknown human token {token!r}")


def apply_noise(msg: Message, cfg: SurrogateConfig, mode: str,
                rng: np.random.Generator) -> Message:
    """Flip non-count tokens within their category w.p. epsilon; drift counts
    by +-1 (clamped to [1, 4]) w.p. delta."""
    eps = cfg.token_flip_ood if mode == "shifted_unguided" else cfg.token_flip
    out = []
    for tok in msg.tokens:
        name, cat = _category(tok)
        if name == "count":
            if rng.random() < cfg.count_drift:
                v = int(tok) + (1 if rng.random() < 0.5 else -1)
                tok = str(min(4, max(1, v)))
        else:
            if rng.random() < eps:
                others = [t for t in cat if t != tok]
                tok = others[int(rng.integers(len(others)))] if others else tok
        out.append(tok)
    return Message("human", tuple(out))


# -- acting and adapting ------------------------------------------------------

def message_distribution(state: HumanState, nets: Optional[SurrogateNets],
                         ctx: str, cfg: SurrogateConfig,
                         hidden: Optional[np.ndarray] = None) -> np.ndarray:
    """Table entry modulated multiplicatively by the learned message head."""
    entry = state.table.entries.get(ctx)
    if entry is None:
        return None
    if nets is None:
        return entry
    h = state.hidden if hidden is None else hidden
    logits, _ = nets.msg_head.forward(h)
    scores = np.log(entry + 1e-12) + logits
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def surrogate_act(state: HumanState, nets: Optional[SurrogateNets],
                  view: FullView, ai_msg: Message, intervention_idx: int,
                  cfg: SurrogateConfig, rng: np.random.Generator,
                  ) -> tuple[Message, HumanState, dict]:
    """Advance the recurrent state, sample a message for the current context,
    apply communication noise. Returns (noisy message, new state, info) where
    info carries the clean distribution and sampled index for training."""
    new_hidden = state.hidden
    if nets is not None:
        x = np.concatenate([
            encode_view(view),
            nets.ai_msg_embed.embed_tokens(
                [AI_VOCAB.index(t) + 1 for t in ai_msg.tokens]),
            nets.intervention_embed.embed_tokens(
                [intervention_idx] if intervention_idx > 0 else []),
        ])
        new_hidden, _ = nets.cell.forward(x, state.hidden)
    new_state = HumanState(hidden=new_hidden, table=state.table,
                           noise_mode=state.noise_mode)
    ctx = context_key(view, ai_msg)
    dist = message_distribution(new_state, nets, ctx, cfg)
    if dist is None:
        tokens = default_hint_message(view)
        idx = MESSAGE_INDEX.get(tokens, -1)
        dist_out = None
    else:
        idx = int(rng.choice(N_MESSAGES, p=dist))
        tokens = CANDIDATE_MESSAGES[idx]
        dist_out = dist
    clean = Message("human", tokens)
    noisy = apply_noise(clean, cfg, new_state.noise_mode, rng)
    info = {"ctx": ctx, "message_index": idx, "distribution": dist_out,
            "clean_tokens": tokens}
    return noisy, new_state, info


def update_protocol_table(state: HumanState, trigger: str, view: FullView,
                          cfg: SurrogateConfig, rng: np.random.Generator,
                          payload: Optional[str] = None,
                          ai_msg: Optional[Message] = None,
                          p_update: Optional[float] = None) -> tuple[HumanState, bool]:
    """With probability p_update, shift the triggered entry toward the
    suggested message class. Returns (state, changed)."""
    p = cfg.p_update if p_update is None else p_update
    if rng.random() >= p:
        return state, False
    ctx = context_key(view, ai_msg if ai_msg is not None else _EMPTY_AI)
    target = suggested_message(trigger, view, payload)
    tgt_idx = MESSAGE_INDEX.get(target)
    if tgt_idx is None:
        return state, False
    table = state.table
    entry = table.entries.get(ctx)
    if entry is None:
        entry = initial_entry(ctx, cfg)
    new_entry = entry + cfg.update_step * _onehot(tgt_idx)
    new_entry = new_entry / new_entry.sum()
    new_entries = dict(table.entries)
    new_entries[ctx] = new_entry
    new_table = ProtocolTable(entries=new_entries, version=table.version + 1)
    return HumanState(hidden=state.hidden, table=new_table,
                      noise_mode=state.noise_mode), True


_EMPTY_AI = Message("ai", ())


def _onehot(i: int) -> np.ndarray:
    v = np.zeros(N_MESSAGES)
    v[i] = 1.0
    return v
