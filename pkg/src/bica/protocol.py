"""Learned AI-side protocol: context features, Gumbel-Softmax code sampling
with temperature annealing, code-to-token decoding, and the
information-bottleneck regularizer on emitted messages.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gridworld import AI_VOCAB
from .neural import MLP, Linear, softmax, softmax_backward

N_AI_TOKENS = len(AI_VOCAB)

# context layout: dist bucket onehot(3) + heading onehot(4) + last-collision
# flag + policy entropy + error count (window) + delta reward
CONTEXT_DIM = 11


@dataclass(frozen=True)
class ProtocolContext:
    features: np.ndarray        # task-state portion, 8 dims
    policy_entropy: float       # nats, in [0, ln 4]
    error_count: int            # collisions/timeouts inside the window
    delta_r: float              # R_t minus trailing window mean

    def vector(self) -> np.ndarray:
        return np.concatenate([self.features,
                               [self.policy_entropy, self.error_count / 10.0,
                                np.tanh(self.delta_r / 10.0)]])


@dataclass(frozen=True)
class CodeSample:
    relaxed: np.ndarray
    hard: np.ndarray
    temperature: float


@dataclass(frozen=True)
class AnnealSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.5
    gamma: float = 0.999

    def __post_init__(self):
        if not (self.tau_end <= self.tau_start and 0 < self.gamma <= 1):
            raise ValueError("invalid annealing schedule")


def build_context(rewards: list[float], errors: list[bool],
                  policy_dist: np.ndarray, dist_bucket: str, heading: str,
                  last_collision: bool) -> ProtocolContext:
    """Assemble the generator's conditioning signal from a rollout window."""
    if len(rewards) < 1:
        raise ValueError("window must contain at least one step")
    p = np.clip(policy_dist, 1e-12, None)
    entropy = float(-(p * np.log(p)).sum())
    delta_r = float(rewards[-1] - np.mean(rewards))
    task = np.zeros(8)
    task[("near", "mid", "far").index(dist_bucket)] = 1.0
    task[3 + "NESW".index(heading)] = 1.0
    task[7] = float(last_collision)
    return ProtocolContext(features=task, policy_entropy=entropy,
                           error_count=int(sum(errors)), delta_r=delta_r)


def make_generator(code_dim: int, rng: np.random.Generator,
                   hidden: int = 32) -> MLP:
    return MLP([CONTEXT_DIM, hidden, code_dim], rng)


def generator_input(ctx: ProtocolContext) -> np.ndarray:
    return ctx.vector()


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1 - 1e-12)))


def gumbel_softmax(logits: np.ndarray, tau: float, gumbel: np.ndarray,
                   ) -> np.ndarray:
    """relaxed_i = softmax((logits_i + g_i) / tau)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return softmax((logits + gumbel) / tau)


def gumbel_softmax_backward(relaxed: np.ndarray, tau: float,
                            drelaxed: np.ndarray) -> np.ndarray:
    """Gradient of the relaxed sample w.r.t. logits with frozen noise."""
    return softmax_backward(relaxed, drelaxed) / tau


def sample_code(generator: MLP, ctx: ProtocolContext, tau: float,
                rng: np.random.Generator,
                gumbel: Optional[np.ndarray] = None) -> tuple[CodeSample, dict]:
    """Draw a straight-through code: forward uses the hard one-hot, the
    gradient flows through the relaxed sample."""
    x = generator_input(ctx)
    logits, cache = generator.forward(x)
    g = sample_gumbel(logits.shape, rng) if gumbel is None else gumbel
    relaxed = gumbel_softmax(logits, tau, g)
    hard = np.zeros_like(relaxed)
    hard[int(np.argmax(relaxed))] = 1.0
    return CodeSample(relaxed=relaxed, hard=hard, temperature=tau), \
        {"gen_cache": cache, "gumbel": g, "logits": logits}


def anneal(schedule: AnnealSchedule, tau: float) -> float:
    return max(schedule.tau_end, tau * schedule.gamma)


def make_decoder(code_dim: int, rng: np.random.Generator) -> Linear:
    return Linear(code_dim, N_AI_TOKENS, rng)


def decode_message(decoder: Linear, code: CodeSample) -> tuple[np.ndarray, dict]:
    """Distribution over AI tokens given the hard code."""
    logits, cache = decoder.forward(code.hard)
    return softmax(logits), {"dec_cache": cache, "logits": logits}


def ib_loss(conditionals: np.ndarray) -> float:
    """Mean KL between each conditional p(m|c) and the batch marginal p(m).

    Equals the plug-in mutual information I(c; m) under a uniform weight on
    the batch's codes.
    """
    cond = np.asarray(conditionals, dtype=float)
    if cond.ndim != 2:
        raise ValueError("expected a batch of distributions")
    marginal = cond.mean(axis=0)
    mask = cond > 0
    assert np.all(marginal[np.any(mask, axis=0)] > 0), \
        "marginal must cover conditional support"
    ratio = np.where(mask, cond / marginal, 1.0)
    kl = np.sum(np.where(mask, cond * np.log(ratio), 0.0), axis=1)
    return float(kl.mean())


def ib_loss_grad(conditionals: np.ndarray) -> np.ndarray:
    """d ib_loss / d conditionals (treating the marginal's dependence exactly)."""
    cond = np.asarray(conditionals, dtype=float)
    n = cond.shape[0]
    marginal = cond.mean(axis=0)
    safe_cond = np.clip(cond, 1e-12, None)
    safe_marg = np.clip(marginal, 1e-12, None)
    # d/dp_ij of (1/n) sum_i sum_m p_im log(p_im / q_m), q = mean over batch
    direct = (np.log(safe_cond / safe_marg) + 1.0) / n
    # through the marginal: -(1/n) sum_i p_ij * (1/q_j) * (1/n)
    through = -(cond.sum(axis=0) / safe_marg) / (n * n)
    return direct + through[None, :]
