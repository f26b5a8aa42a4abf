"""Instructor: a gated intervention policy that occasionally nudges the human
side, and the teaching-cost term that penalizes interventions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .neural import Linear, sigmoid, softmax
from .surrogate import INTERVENTION_TOKENS

PROTOCOL_CLASSES = ("direction", "count", "landmark", "macro")
STRATEGY_CLASSES = ("follow_direction", "trust_count", "request_more")
PAYLOADS = tuple(f"protocol:{c}" for c in PROTOCOL_CLASSES) + \
    tuple(f"strategy:{c}" for c in STRATEGY_CLASSES)
assert PAYLOADS == INTERVENTION_TOKENS

STATE_FEATURES = 8
HISTORY_FEATURES = 4


@dataclass(frozen=True)
class Intervention:
    kind: str  # "none" | "protocol_hint" | "strategy_hint"
    payload: Optional[str] = None

    def __post_init__(self):
        if self.kind == "none" and self.payload is not None:
            raise ValueError("a no-op intervention carries no payload")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    @property
    def embed_index(self) -> int:
        """Index into the surrogate's intervention embedding (0 = none)."""
        if not self.active:
            return 0
        return PAYLOADS.index(self.payload) + 1


NO_INTERVENTION = Intervention("none")


@dataclass
class InstructorNets:
    gate: Linear        # -> 1 logit
    payload_head: Linear  # -> len(PAYLOADS) logits

    @classmethod
    def create(cls, rng: np.random.Generator) -> "InstructorNets":
        nin = STATE_FEATURES + HISTORY_FEATURES
        return cls(gate=Linear(nin, 1, rng),
                   payload_head=Linear(nin, len(PAYLOADS), rng))

    def modules(self) -> dict:
        return {"gate": self.gate, "payload_head": self.payload_head}


def intervene(nets: InstructorNets, state_feats: np.ndarray,
              history: np.ndarray, threshold: float = 0.5,
              rng: Optional[np.random.Generator] = None,
              ) -> tuple[Intervention, dict]:
    """Gate probability sigma(W [phi(s); h]); intervene iff p > threshold
    (strict). Payload drawn from a categorical head."""
    x = np.concatenate([state_feats, history])
    if not np.all(np.isfinite(x)):
        raise ValueError("instructor features must be finite")
    gate_logit, gate_cache = nets.gate.forward(x)
    p = float(sigmoid(gate_logit)[0])
    info = {"gate_p": p, "gate_cache": gate_cache, "x": x}
    if p <= threshold:
        return NO_INTERVENTION, info
    payload_logits, _ = nets.payload_head.forward(x)
    dist = softmax(payload_logits)
    idx = int(np.argmax(dist)) if rng is None else int(rng.choice(len(dist), p=dist))
    payload = PAYLOADS[idx]
    kind = "protocol_hint" if payload.startswith("protocol:") else "strategy_hint"
    info["payload_dist"] = dist
    info["payload_index"] = idx
    return Intervention(kind, payload), info


def teach_loss(interventions: Sequence[Intervention]) -> float:
    """Fraction of steps with an active intervention."""
    if not interventions:
        return 0.0
    return float(np.mean([float(u.active) for u in interventions]))
