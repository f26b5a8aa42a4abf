"""Composite training: PPO task losses for both sides, KL-budget hinge
penalties with projected dual ascent, information-bottleneck and
representation regularizers, teaching cost, and the alternating update loop.

Baseline mode is a strict restriction: AI-side PPO plus its KL budget only,
with the human surrogate fully frozen.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import alignment, gridworld as gw, protocol as proto, surrogate as su
from .alignment import LatentBatch, LatentEncoders, rep_loss, rep_loss_mapped_grad
from .gridworld import (AI_VOCAB, AiAction, EnvParams, HUMAN_VOCAB, Message,
                        encode_ego_view, T_MAX)
from .instructor import (HISTORY_FEATURES, Intervention, InstructorNets,
                         NO_INTERVENTION, STATE_FEATURES, teach_loss)
from .neural import Adam, Embedding, GRUCell, Linear, MLP, sigmoid, softmax, \
    softmax_backward
from .surrogate import (HumanState, ProtocolTable, SurrogateConfig,
                        SurrogateNets, build_initial_table, context_key,
                        distance_bucket, encode_view, make_human_state,
                        message_distribution)

AI_INPUT = gw.EGO_FEATURES + 4 + 16  # ego + heading onehot + message embedding
KL_EMA = 0.8  # smoothing factor for the tracked drift-KL estimates


@dataclass
class TrainConfig:
    mode: str = "bica"  # "bica" | "baseline"
    epochs: int = 500
    episodes_per_epoch: int = 32
    pretrain_epochs: int = 50
    # PPO
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    ppo_passes: int = 4
    lr_ai: float = 3e-3
    lr_surrogate: float = 1e-3
    lr_generator: float = 1e-3
    lr_mapper: float = 1e-2
    lr_instructor: float = 1e-3
    # budgets and regularizers
    tau_a: float = 0.05
    tau_h: float = 0.05
    eta_lambda: float = 0.1
    beta_ib: float = 1.0
    mu_rep: float = 0.05
    kappa_teach: float = 0.01
    # architecture
    code_dim: int = 16
    hidden_size: int = 64
    arch: str = "gru"  # "gru" | "mlp"
    mapper_type: str = "linear"
    mapper_width: int = 64
    rep_target: str = "mapped_self"
    # protocol annealing
    tau_start: float = 1.0
    tau_end: float = 0.5
    anneal_gamma: float = 0.999
    # training signal: potential-based shaping (gamma*Phi(s') - Phi(s) with
    # Phi = -distance to goal) added to the advantage estimator only; it
    # leaves the optimal policy and all logged returns unchanged
    shaping_coef: float = 1.0
    # misc
    error_window: int = 8
    instructor_threshold: float = 0.5
    rep_batch: int = 64
    env: EnvParams = field(default_factory=EnvParams)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)


@dataclass
class BudgetState:
    lambda_a: float = 0.0
    lambda_h: float = 0.0
    tau_a: float = 0.05
    tau_h: float = 0.05
    eta_lambda: float = 0.1
    kl_hat_a: float = 0.0
    kl_hat_h: float = 0.0


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    kl_pen_a: float
    kl_pen_h: float
    ib: float
    rep: float
    teach: float
    beta: float
    mu: float
    kappa: float

    @property
    def total(self) -> float:
        return (self.task + self.kl_pen_a + self.kl_pen_h
                + self.beta * self.ib + self.mu * self.rep
                + self.kappa * self.teach)


def kl_budget_penalty(kl_hat: float, tau: float, lam: float) -> float:
    """lambda * [kl_hat - tau]_+."""
    if kl_hat < 0:
        raise ValueError("KL estimate must be nonnegative")
    return lam * max(0.0, kl_hat - tau)


def dual_update(budget: BudgetState, g_a: float, g_h: float) -> BudgetState:
    """Projected dual ascent on both multipliers."""
    return BudgetState(
        lambda_a=max(0.0, budget.lambda_a + budget.eta_lambda * g_a),
        lambda_h=max(0.0, budget.lambda_h + budget.eta_lambda * g_h),
        tau_a=budget.tau_a, tau_h=budget.tau_h,
        eta_lambda=budget.eta_lambda,
        kl_hat_a=budget.kl_hat_a, kl_hat_h=budget.kl_hat_h)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact KL(p || q) along the last axis."""
    p = np.clip(p, 1e-12, None)
    q = np.clip(q, 1e-12, None)
    return np.sum(p * np.log(p / q), axis=-1)


def composite_loss(task: float, budget: BudgetState, ib: float, rep: float,
                   teach: float, beta: float, mu: float,
                   kappa: float) -> LossBreakdown:
    return LossBreakdown(
        task=task,
        kl_pen_a=kl_budget_penalty(budget.kl_hat_a, budget.tau_a, budget.lambda_a),
        kl_pen_h=kl_budget_penalty(budget.kl_hat_h, budget.tau_h, budget.lambda_h),
        ib=ib, rep=rep, teach=teach, beta=beta, mu=mu, kappa=kappa)


# -- AI policy ----------------------------------------------------------------

@dataclass
class AiPolicy:
    arch: str
    cell: GRUCell | None
    mlp: MLP | None
    msg_embed: Embedding
    action_head: Linear
    value_head: Linear
    hidden_size: int

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: int = 64,
               arch: str = "gru") -> "AiPolicy":
        if arch == "gru":
            cell, mlp = GRUCell(AI_INPUT, hidden, rng), None
        else:
            cell, mlp = None, MLP([AI_INPUT, hidden, hidden], rng)
        return cls(arch=arch, cell=cell, mlp=mlp,
                   msg_embed=Embedding(len(HUMAN_VOCAB), 16, rng),
                   action_head=Linear(hidden, 4, rng),
                   value_head=Linear(hidden, 1, rng), hidden_size=hidden)

    def modules(self) -> dict:
        mods = {"msg_embed": self.msg_embed, "action_head": self.action_head,
                "value_head": self.value_head}
        if self.cell is not None:
            mods["cell"] = self.cell
        if self.mlp is not None:
            mods["mlp"] = self.mlp
        return mods

    def input_vector(self, ego_feats: np.ndarray, heading: str,
                     msg: Message) -> np.ndarray:
        head = np.zeros(4)
        head["NESW".index(heading)] = 1.0
        emb = self.msg_embed.embed_tokens(
            [HUMAN_VOCAB.index(t) + 1 for t in msg.tokens])
        return np.concatenate([ego_feats, head, emb])

    def hidden_forward(self, x: np.ndarray, h: np.ndarray):
        if self.arch == "gru":
            return self.cell.forward(x, h)
        out, cache = self.mlp.forward(x)
        return np.tanh(out), ("mlp", cache, out)

    def hidden_backward(self, cache, dh):
        if self.arch == "gru":
            grads, dx, dhprev = self.cell.backward(cache, dh)
            return {"cell": grads}
        _, mlp_cache, out = cache
        dout = dh * (1.0 - np.tanh(out) ** 2)
        grads, _ = self.mlp.backward(mlp_cache, dout)
        return {"mlp": grads}

    def step(self, x: np.ndarray, h: np.ndarray):
        """Batched policy step: returns (dist, value, new_hidden)."""
        h_new, _ = self.hidden_forward(x, h)
        logits, _ = self.action_head.forward(h_new)
        v, _ = self.value_head.forward(h_new)
        return softmax(logits), np.asarray(v).reshape(-1), h_new


@dataclass
class Components:
    ai: AiPolicy
    surrogate: SurrogateNets
    generator: MLP
    decoder: Linear
    encoders: LatentEncoders
    instructor: InstructorNets
    table: ProtocolTable
    tau: float  # current protocol temperature

    def checkpoint_modules(self) -> dict:
        mods = {}
        for prefix, group in (("ai", self.ai.modules()),
                              ("sur", self.surrogate.modules()),
                              ("enc", self.encoders.modules()),
                              ("ins", self.instructor.modules())):
            for k, v in group.items():
                mods[f"{prefix}.{k}"] = v
        mods["generator"] = self.generator
        mods["decoder"] = self.decoder
        return mods


def make_components(cfg: TrainConfig, rng: np.random.Generator) -> Components:
    human_in = su.VIEW_FEATURES + su.EMBED_DIM + su.EMBED_DIM
    return Components(
        ai=AiPolicy.create(rng, hidden=cfg.hidden_size, arch=cfg.arch),
        surrogate=SurrogateNets.create(rng),
        generator=proto.make_generator(cfg.code_dim, rng),
        decoder=proto.make_decoder(cfg.code_dim, rng),
        encoders=LatentEncoders.create(
            rng, human_in=human_in, ai_in=AI_INPUT,
            mapper_type=cfg.mapper_type, mapper_width=cfg.mapper_width),
        instructor=InstructorNets.create(rng),
        table=build_initial_table(cfg.surrogate),
        tau=cfg.tau_start,
    )


# -- rollouts -----------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """Flat per-step arrays for one episode plus episode aggregates."""
    ai_inputs: list = field(default_factory=list)      # (AI_INPUT,)
    ai_hidden_prev: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    action_dists: list = field(default_factory=list)
    # human side
    human_ctx: list = field(default_factory=list)
    human_msg_idx: list = field(default_factory=list)
    human_entries: list = field(default_factory=list)  # table entry used
    human_hidden: list = field(default_factory=list)   # hidden used by msg head
    human_logps: list = field(default_factory=list)
    human_msgs: list = field(default_factory=list)     # noisy token tuples
    # protocol
    ctx_vectors: list = field(default_factory=list)
    gumbels: list = field(default_factory=list)
    codes_hard: list = field(default_factory=list)
    ai_token_idx: list = field(default_factory=list)   # -1 = no message
    token_dists: list = field(default_factory=list)
    ai_msgs: list = field(default_factory=list)
    # instructor
    interventions: list = field(default_factory=list)
    gate_ps: list = field(default_factory=list)
    gate_inputs: list = field(default_factory=list)
    payload_idx: list = field(default_factory=list)
    # latents
    z_h: list = field(default_factory=list)
    z_a: list = field(default_factory=list)
    # bookkeeping
    collisions: int = 0
    tokens: int = 0
    success: bool = False
    steps: int = 0
    events: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    potentials: list = field(default_factory=list)  # Phi(state) after step
    init_potential: float = 0.0

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))


@dataclass
class RolloutBatch:
    episodes: list[EpisodeRecord]
    table_before: ProtocolTable
    table_after: ProtocolTable

    def flat(self, name: str) -> np.ndarray:
        return np.array([v for ep in self.episodes for v in getattr(ep, name)])

    @property
    def n_steps(self) -> int:
        return sum(ep.steps for ep in self.episodes)


def instructor_features(view, collided_recent: int, steps_since_progress: int,
                        step_count: int, last_intervened: bool) -> tuple:
    feats = np.zeros(STATE_FEATURES)
    feats[("near", "mid", "far").index(distance_bucket(view))] = 1.0
    feats[3 + "NESW".index(view.heading)] = 1.0
    feats[7] = float(collided_recent > 0)
    hist = np.array([collided_recent / 4.0, steps_since_progress / 10.0,
                     float(last_intervened), step_count / T_MAX])
    return feats, hist


def collect_rollouts(cfg: TrainConfig, comps: Components, n_episodes: int,
                     rng: np.random.Generator,
                     env_params: Optional[EnvParams] = None,
                     freeze_table: bool = False,
                     table_update_scale: float = 1.0,
                     ood: bool = False) -> RolloutBatch:
    """Run n_episodes in lockstep, batching all network forwards across the
    active episodes. Step order per episode: human view -> human message ->
    AI observes + message -> generator emits AI message -> instructor may
    intervene -> AI acts -> env steps -> reward with token cost."""
    if n_episodes == 0:
        return RolloutBatch([], comps.table, comps.table)
    baseline = cfg.mode == "baseline"
    env_params = env_params or cfg.env
    scfg = cfg.surrogate
    table_before = copy.deepcopy(comps.table)

    episodes = [EpisodeRecord() for _ in range(n_episodes)]
    states, human_states, ai_hiddens, enc_hiddens = [], [], [], []
    last_ai_msgs, last_interventions = [], []
    recent_collisions = [0] * n_episodes
    since_progress = [0] * n_episodes
    best_dist = []
    reward_windows = [[] for _ in range(n_episodes)]
    error_windows = [[] for _ in range(n_episodes)]

    for _ in range(n_episodes):
        density = gw.sample_density(env_params, rng)
        m = gw.generate_map(int(rng.integers(2 ** 31)), density,
                            width=env_params.width, height=env_params.height)
        st = gw.initial_state(m)
        states.append(st)
        hs = make_human_state(scfg, table=comps.table)
        if ood and baseline:
            hs.noise_mode = "shifted_unguided"
        human_states.append(hs)
        ai_hiddens.append(np.zeros(comps.ai.hidden_size))
        enc_hiddens.append(np.zeros(alignment.LATENT_DIM))
        last_ai_msgs.append(gw.EMPTY_AI_MESSAGE)
        last_interventions.append(NO_INTERVENTION)
        d0 = abs(m.goal[0] - st.pose[0]) + abs(m.goal[1] - st.pose[1])
        best_dist.append(d0)
        episodes[len(states) - 1].init_potential = \
            goal_potential(st.pose, st.heading, m.goal)

    active = list(range(n_episodes))
    shared_table = comps.table
    E_ai = comps.surrogate.ai_msg_embed.w["E"]
    E_int = comps.surrogate.intervention_embed.w["E"]

    def fast_sample(p: np.ndarray) -> int:
        return int(np.searchsorted(np.cumsum(p), rng.random()))

    for _t in range(T_MAX):
        if not active:
            break
        views = {i: gw.observe_human(states[i]) for i in active}

        # shared human-side input: view features, last AI message embedding,
        # last intervention embedding (also feeds the latent encoder)
        hum_xs = []
        for i in active:
            msg_tokens = last_ai_msgs[i].tokens
            ai_emb = E_ai[AI_VOCAB.index(msg_tokens[0]) + 1] if msg_tokens \
                else np.zeros(su.EMBED_DIM)
            u_idx = last_interventions[i].embed_index
            u_emb = E_int[u_idx] if u_idx > 0 else np.zeros(su.EMBED_DIM)
            hum_xs.append(np.concatenate([encode_view(views[i]), ai_emb, u_emb]))
        HX = np.stack(hum_xs)

        # human messages: batched recurrent step and message head
        H_sur_prev = np.stack([human_states[i].hidden for i in active])
        H_sur_new, _ = comps.surrogate.cell.forward(HX, H_sur_prev)
        head_logits, _ = comps.surrogate.msg_head.forward(H_sur_new)
        human_msgs = {}
        for k, i in enumerate(active):
            view = views[i]
            ctx = context_key(view, last_ai_msgs[i])
            entry = shared_table.entries.get(ctx)
            ep = episodes[i]
            if entry is None:
                tokens = su.default_hint_message(view)
                msg_idx = su.MESSAGE_INDEX.get(tokens, -1)
                logp = 0.0
                entry_used = np.ones(su.N_MESSAGES) / su.N_MESSAGES
            else:
                scores = np.log(entry + 1e-12) + head_logits[k]
                scores -= scores.max()
                dist = np.exp(scores)
                dist /= dist.sum()
                msg_idx = fast_sample(dist)
                tokens = su.CANDIDATE_MESSAGES[msg_idx]
                logp = float(np.log(dist[msg_idx] + 1e-12))
                entry_used = entry.copy()
            noisy = su.apply_noise(Message("human", tokens), scfg,
                                   human_states[i].noise_mode, rng)
            human_states[i] = HumanState(hidden=H_sur_new[k],
                                         table=shared_table,
                                         noise_mode=human_states[i].noise_mode)
            human_msgs[i] = noisy
            ep.human_ctx.append(ctx)
            ep.human_msg_idx.append(msg_idx)
            ep.human_entries.append(entry_used)
            ep.human_hidden.append(H_sur_new[k])
            ep.human_logps.append(logp)
            ep.human_msgs.append(noisy.tokens)

        # AI observation + policy step (batched)
        xs, hs_prev = [], []
        for i in active:
            ego = gw.observe_ai(states[i])
            x = comps.ai.input_vector(encode_ego_view(ego), states[i].heading,
                                      human_msgs[i])
            xs.append(x)
            hs_prev.append(ai_hiddens[i])
        X = np.stack(xs)
        Hp = np.stack(hs_prev)
        dists, values, H_new = comps.ai.step(X, Hp)

        # protocol generator: AI message (batched logits, per-episode sampling)
        ai_msgs = {i: gw.EMPTY_AI_MESSAGE for i in active}
        if not baseline:
            ctxs = []
            for k, i in enumerate(active):
                rewards_w = reward_windows[i][-cfg.error_window:] or [0.0]
                errors_w = error_windows[i][-cfg.error_window:] or [False]
                pctx = proto.build_context(
                    rewards_w, errors_w, dists[k], distance_bucket(views[i]),
                    states[i].heading, error_windows[i][-1] if error_windows[i] else False)
                ctxs.append(proto.generator_input(pctx))
            C = np.stack(ctxs)
            logits_all, _ = comps.generator.forward(C)
            gumbels = proto.sample_gumbel(logits_all.shape, rng)
            relaxed_all = softmax((logits_all + gumbels) / comps.tau, axis=-1)
            hard_idx = np.argmax(relaxed_all, axis=-1)
            hard_all = np.zeros_like(relaxed_all)
            hard_all[np.arange(len(active)), hard_idx] = 1.0
            token_logits, _ = comps.decoder.forward(hard_all)
            token_dists = softmax(token_logits, axis=-1)
            for k, i in enumerate(active):
                tok_idx = fast_sample(token_dists[k])
                ai_msgs[i] = Message("ai", (AI_VOCAB[tok_idx],))
                ep = episodes[i]
                ep.ctx_vectors.append(C[k])
                ep.gumbels.append(gumbels[k])
                ep.codes_hard.append(hard_all[k])
                ep.ai_token_idx.append(tok_idx)
                ep.token_dists.append(token_dists[k].copy())
                ep.ai_msgs.append(ai_msgs[i].tokens)
                # the AI message triggers a possible protocol-table shift
                if not freeze_table:
                    hstate = HumanState(hidden=human_states[i].hidden,
                                        table=shared_table,
                                        noise_mode=human_states[i].noise_mode)
                    hstate, changed = su.update_protocol_table(
                        hstate, "ai_message", views[i], scfg, rng,
                        payload=ai_msgs[i].tokens[0], ai_msg=ai_msgs[i],
                        p_update=scfg.p_update * table_update_scale)
                    if changed:
                        shared_table = hstate.table
        else:
            for i in active:
                ep = episodes[i]
                ep.ai_token_idx.append(-1)
                ep.ai_msgs.append(())

        # instructor intervention (batched gate)
        new_interventions = {i: NO_INTERVENTION for i in active}
        if not baseline:
            gate_xs = []
            for i in active:
                feats, hist = instructor_features(
                    views[i], recent_collisions[i], since_progress[i],
                    states[i].step_count, last_interventions[i].active)
                gate_xs.append(np.concatenate([feats, hist]))
            GX = np.stack(gate_xs)
            gate_logits, _ = comps.instructor.gate.forward(GX)
            gate_p = sigmoid(gate_logits.reshape(-1))
            payload_logits, _ = comps.instructor.payload_head.forward(GX)
            payload_dists = softmax(payload_logits, axis=-1)
            from .instructor import PAYLOADS
            for k, i in enumerate(active):
                ep = episodes[i]
                ep.gate_inputs.append(GX[k])
                ep.gate_ps.append(float(gate_p[k]))
                if gate_p[k] > cfg.instructor_threshold:
                    pidx = fast_sample(payload_dists[k])
                    payload = PAYLOADS[pidx]
                    kind = ("protocol_hint" if payload.startswith("protocol:")
                            else "strategy_hint")
                    new_interventions[i] = Intervention(kind, payload)
                    ep.payload_idx.append(pidx)
                    if not freeze_table:
                        hstate = HumanState(hidden=human_states[i].hidden,
                                            table=shared_table,
                                            noise_mode=human_states[i].noise_mode)
                        hstate, changed = su.update_protocol_table(
                            hstate, "instructor", views[i], scfg, rng,
                            payload=payload, ai_msg=last_ai_msgs[i],
                            p_update=scfg.p_update * table_update_scale)
                        if changed:
                            shared_table = hstate.table
                else:
                    ep.payload_idx.append(-1)
        # latents (batched, sharing the human-side input built above)
        EH = np.stack([enc_hiddens[i] for i in active])
        ZH, _ = comps.encoders.human_cell.forward(HX, EH)
        ZA, _ = comps.encoders.ai_mlp.forward(X)

        # act, step the environments, reward
        still_active = []
        for k, i in enumerate(active):
            ep = episodes[i]
            a_idx = fast_sample(dists[k])
            action = AiAction(a_idx)
            new_state, events = gw.step(states[i], action)
            tokens = human_msgs[i].token_count + ai_msgs[i].token_count
            reward = gw.compute_reward(events, tokens)

            ep.ai_inputs.append(X[k])
            ep.ai_hidden_prev.append(Hp[k])
            ep.actions.append(a_idx)
            ep.logps.append(float(np.log(dists[k][a_idx] + 1e-12)))
            ep.values.append(float(values[k]))
            ep.rewards.append(reward)
            ep.action_dists.append(dists[k].copy())
            ep.interventions.append(new_interventions[i])
            ep.z_h.append(ZH[k])
            ep.z_a.append(ZA[k])
            ep.tokens += tokens
            ep.collisions += int(events.collided)
            ep.steps += 1
            ep.events.append(events)
            ep.poses.append(new_state.pose)

            reward_windows[i].append(reward)
            error_windows[i].append(events.collided)
            recent_collisions[i] = min(4, recent_collisions[i] + 1) \
                if events.collided else max(0, recent_collisions[i] - 1)
            d = abs(new_state.map.goal[0] - new_state.pose[0]) + \
                abs(new_state.map.goal[1] - new_state.pose[1])
            ep.potentials.append(goal_potential(
                new_state.pose, new_state.heading, new_state.map.goal))
            if d < best_dist[i]:
                best_dist[i] = d
                since_progress[i] = 0
            else:
                since_progress[i] = min(10, since_progress[i] + 1)

            states[i] = new_state
            ai_hiddens[i] = H_new[k]
            enc_hiddens[i] = ZH[k]
            last_ai_msgs[i] = ai_msgs[i]
            last_interventions[i] = new_interventions[i]
            if new_state.done:
                ep.success = new_state.done_reason == "goal"
            else:
                still_active.append(i)
        active = still_active

    if not freeze_table:
        comps.table = shared_table
    return RolloutBatch(episodes=episodes, table_before=table_before,
                        table_after=shared_table)


# -- advantages ---------------------------------------------------------------

def gae_advantages(rewards: list[float], values: list[float], discount: float,
                   lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one finished episode."""
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        next_v = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + discount * next_v - values[t]
        last = delta + discount * lam * last
        adv[t] = last
    returns = adv + np.array(values)
    return adv, returns


def goal_potential(pose, heading: str, goal) -> float:
    """Phi(s) = -(distance to goal + 0.4 * turns needed to face a goal-ward
    direction); a pure function of state, so the induced shaping term is
    policy-invariant."""
    dr, dc = goal[0] - pose[0], goal[1] - pose[1]
    d = abs(dr) + abs(dc)
    if d == 0:
        return 0.0
    goalward = []
    if dr < 0:
        goalward.append("N")
    if dr > 0:
        goalward.append("S")
    if dc > 0:
        goalward.append("E")
    if dc < 0:
        goalward.append("W")
    hi = gw.HEADINGS.index(heading)
    mis = min(min((gw.HEADINGS.index(g) - hi) % 4,
                  (hi - gw.HEADINGS.index(g)) % 4) for g in goalward)
    return -(d + 0.4 * mis)


def shaped_rewards(ep: EpisodeRecord, cfg: TrainConfig) -> list[float]:
    """Rewards plus the potential-based shaping term, used only for advantage
    estimation."""
    if cfg.shaping_coef == 0.0:
        return ep.rewards
    out = []
    prev = ep.init_potential
    for r, phi in zip(ep.rewards, ep.potentials):
        out.append(r + cfg.shaping_coef * (cfg.discount * phi - prev))
        prev = phi
    return out


def batch_advantages(batch: RolloutBatch, cfg: TrainConfig):
    advs, rets = [], []
    for ep in batch.episodes:
        a, r = gae_advantages(shaped_rewards(ep, cfg), ep.values,
                              cfg.discount, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    adv = np.concatenate(advs) if advs else np.zeros(0)
    ret = np.concatenate(rets) if rets else np.zeros(0)
    if adv.size > 1 and adv.std() > 1e-8:
        adv = (adv - adv.mean()) / adv.std()
    return adv, ret


# -- PPO losses ---------------------------------------------------------------

def ppo_loss_terms(new_logp: np.ndarray, old_logp: np.ndarray,
                   adv: np.ndarray, clip_eps: float):
    """Clipped surrogate value and the per-sample gradient w.r.t. new_logp."""
    ratio = np.exp(new_logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    loss = -np.minimum(unclipped, clipped).mean()
    take_unclipped = unclipped <= clipped
    dlogp = np.where(take_unclipped, -adv * ratio, 0.0) / len(new_logp)
    return float(loss), dlogp


def update_ai_policy(cfg: TrainConfig, comps: Components, batch: RolloutBatch,
                     prior: Optional[AiPolicy], budget: BudgetState,
                     opt: dict[str, Adam], lr: float) -> dict:
    """PPO passes over the batch with the KL-budget hinge folded in."""
    X = batch.flat("ai_inputs")
    if X.size == 0:
        return {"task": 0.0, "kl": 0.0}
    Hp = batch.flat("ai_hidden_prev")
    actions = batch.flat("actions").astype(int)
    old_logp = batch.flat("logps")
    adv, returns = batch_advantages(batch, cfg)
    N = len(actions)

    prior_dists = None
    if prior is not None:
        ph, _ = prior.hidden_forward(X, Hp)
        plog, _ = prior.action_head.forward(ph)
        prior_dists = softmax(plog, axis=-1)

    last_task = last_kl = 0.0
    for _ in range(cfg.ppo_passes):
        h_new, hcache = comps.ai.hidden_forward(X, Hp)
        logits, acache = comps.ai.action_head.forward(h_new)
        dist = softmax(logits, axis=-1)
        v, vcache = comps.ai.value_head.forward(h_new)
        v = np.asarray(v).reshape(-1)
        logp = np.log(dist[np.arange(N), actions] + 1e-12)

        surr, dlogp = ppo_loss_terms(logp, old_logp, adv, cfg.clip_eps)
        vloss = 0.5 * float(np.mean((v - returns) ** 2))
        entropy = float(-np.mean(np.sum(dist * np.log(dist + 1e-12), axis=-1)))
        last_task = surr + cfg.vf_coef * vloss - cfg.ent_coef * entropy

        # d loss / d logits
        onehot = np.zeros_like(dist)
        onehot[np.arange(N), actions] = 1.0
        dlogits = dlogp[:, None] * (onehot - dist)
        # entropy bonus gradient: d(-ent_coef * H)/dlogits
        dH_dp = -(np.log(dist + 1e-12) + 1.0) / N
        dlogits += -cfg.ent_coef * softmax_backward(dist, dH_dp)
        # KL budget hinge (subgradient active only above the budget)
        if prior_dists is not None:
            kls = categorical_kl(dist, prior_dists)
            last_kl = float(kls.mean())
            if last_kl > budget.tau_a and budget.lambda_a > 0:
                du = (np.log(dist + 1e-12) - np.log(prior_dists + 1e-12) + 1.0) / N
                dlogits += budget.lambda_a * softmax_backward(dist, du)
        dv = cfg.vf_coef * (v - returns) / N

        a_grads, dh1 = comps.ai.action_head.backward(acache, dlogits)
        v_grads, _ = comps.ai.value_head.backward(vcache, dv[:, None])
        # the value gradient stays in its head: letting it flow into the
        # shared trunk swamps the policy gradient and stalls learning
        hid_grads = comps.ai.hidden_backward(hcache, dh1)

        opt["action_head"].update(comps.ai.action_head.w, a_grads, lr)
        opt["value_head"].update(comps.ai.value_head.w, v_grads, lr)
        for name, grads in hid_grads.items():
            opt[name].update(getattr(comps.ai, name).w, grads, lr)
    return {"task": float(last_task), "kl": float(last_kl)}


def human_message_dists(nets: SurrogateNets, entries: np.ndarray,
                        hiddens: np.ndarray) -> np.ndarray:
    logits, cache = nets.msg_head.forward(hiddens)
    scores = np.log(entries + 1e-12) + logits
    p = softmax(scores, axis=-1)
    return p, cache


def update_surrogate(cfg: TrainConfig, comps: Components, batch: RolloutBatch,
                     prior: Optional[SurrogateNets],
                     prior_table: Optional[ProtocolTable],
                     budget: BudgetState, opt: Adam, lr: float) -> dict:
    """PPO on the learned message head, with the human KL hinge."""
    idxs = batch.flat("human_msg_idx").astype(int)
    keep = idxs >= 0
    if not np.any(keep):
        return {"task": 0.0, "kl": 0.0}
    entries = batch.flat("human_entries")[keep]
    hiddens = batch.flat("human_hidden")[keep]
    old_logp = batch.flat("human_logps")[keep]
    idxs = idxs[keep]
    adv, _ = batch_advantages(batch, cfg)
    adv = adv[keep]
    N = len(idxs)

    prior_dists = None
    if prior is not None:
        # the prior is conditioned on the *current* protocol table: the
        # budget constrains optimizer-driven drift of the learned message
        # head, not the human's own protocol-table adaptation
        p_logits, _ = prior.msg_head.forward(hiddens)
        scores = np.log(entries + 1e-12) + p_logits
        prior_dists = softmax(scores, axis=-1)

    last_task = last_kl = 0.0
    for _ in range(cfg.ppo_passes):
        dist, cache = human_message_dists(comps.surrogate, entries, hiddens)
        logp = np.log(dist[np.arange(N), idxs] + 1e-12)
        surr, dlogp = ppo_loss_terms(logp, old_logp, adv, cfg.clip_eps)
        last_task = surr
        onehot = np.zeros_like(dist)
        onehot[np.arange(N), idxs] = 1.0
        dscores = dlogp[:, None] * (onehot - dist)
        if prior_dists is not None:
            kls = categorical_kl(dist, prior_dists)
            last_kl = float(kls.mean())
            if last_kl > budget.tau_h and budget.lambda_h > 0:
                du = (np.log(dist + 1e-12) - np.log(prior_dists + 1e-12) + 1.0) / N
                dscores += budget.lambda_h * softmax_backward(dist, du)
        grads, _ = comps.surrogate.msg_head.backward(cache, dscores)
        opt.update(comps.surrogate.msg_head.w, grads, lr)
    return {"task": float(last_task), "kl": float(last_kl)}


def update_generator(cfg: TrainConfig, comps: Components, batch: RolloutBatch,
                     opt: dict[str, Adam], lr: float) -> dict:
    """Advantage-weighted message log-likelihood plus the IB regularizer,
    straight-through from hard codes back to generator logits."""
    tok_idx = batch.flat("ai_token_idx").astype(int)
    keep = tok_idx >= 0
    if not np.any(keep):
        return {"ib": 0.0}
    C = batch.flat("ctx_vectors")
    G = batch.flat("gumbels")
    adv_all, _ = batch_advantages(batch, cfg)
    adv = adv_all[keep]
    tok = tok_idx[keep]
    N = len(tok)

    logits, gcache = comps.generator.forward(C)
    relaxed = softmax((logits + G) / comps.tau, axis=-1)
    hard_idx = np.argmax(relaxed, axis=-1)
    hard = np.zeros_like(relaxed)
    hard[np.arange(len(hard_idx)), hard_idx] = 1.0
    tlogits, dcache = comps.decoder.forward(hard)
    tdist = softmax(tlogits, axis=-1)

    ib = proto.ib_loss(tdist)
    onehot = np.zeros_like(tdist)
    onehot[np.arange(N), tok] = 1.0
    # policy-gradient term on message emission
    dtlogits = (-adv[:, None] / N) * (onehot - tdist)
    # IB gradient through the token distributions
    dib = proto.ib_loss_grad(tdist)
    dtlogits += cfg.beta_ib * softmax_backward(tdist, dib)

    d_grads, dhard = comps.decoder.backward(dcache, dtlogits)
    # straight-through: treat dhard as the relaxed sample's cotangent
    dlogits = softmax_backward(relaxed, dhard) / comps.tau
    g_grads, _ = comps.generator.backward(gcache, dlogits)
    opt["decoder"].update(comps.decoder.w, d_grads, lr)
    opt["generator"].update(comps.generator.w, g_grads, lr)
    comps.tau = proto.anneal(proto.AnnealSchedule(
        cfg.tau_start, cfg.tau_end, cfg.anneal_gamma), comps.tau)
    return {"ib": float(ib)}


def update_mapper(cfg: TrainConfig, comps: Components, batch: RolloutBatch,
                  opt: Adam, lr: float, rng: np.random.Generator) -> dict:
    z_h = batch.flat("z_h")
    z_a = batch.flat("z_a")
    if len(z_h) == 0:
        return {"rep": 0.0}
    n = min(cfg.rep_batch, len(z_h))
    sel = rng.choice(len(z_h), size=n, replace=False)
    z_h, z_a = z_h[sel], z_a[sel]
    mapped, mcache = comps.encoders.map_latents(z_h)
    lb = LatentBatch(z_h=z_h, z_a=z_a, mapped=mapped)
    parts = rep_loss(lb, cfg.rep_target)
    dmapped = cfg.mu_rep * rep_loss_mapped_grad(lb, cfg.rep_target)
    grads, _ = comps.encoders.mapper.backward(mcache, dmapped)
    opt.update(comps.encoders.mapper.w, grads, lr)
    return {"rep": float(parts.total), "w2": parts.w2_sq, "cca": parts.cca_rho}


def update_instructor(cfg: TrainConfig, comps: Components, batch: RolloutBatch,
                      opt: dict[str, Adam], lr: float) -> dict:
    gate_x = batch.flat("gate_inputs")
    if gate_x.size == 0:
        return {"teach": 0.0}
    intervened = np.array([u.active for ep in batch.episodes
                           for u in ep.interventions], dtype=float)
    adv, _ = batch_advantages(batch, cfg)
    N = len(intervened)
    logits, cache = comps.instructor.gate.forward(gate_x)
    p = sigmoid(logits.reshape(-1))
    # -adv * dlogp(decision)/dlogit  +  kappa * dp/dlogit
    dlogit = (-adv * (intervened - p) + cfg.kappa_teach * p * (1 - p)) / N
    grads, _ = comps.instructor.gate.backward(cache, dlogit[:, None])
    opt["gate"].update(comps.instructor.gate.w, grads, lr)

    pidx = batch.flat("payload_idx").astype(int)
    keep = pidx >= 0
    if np.any(keep):
        px = gate_x[keep]
        plogits, pcache = comps.instructor.payload_head.forward(px)
        pdist = softmax(plogits, axis=-1)
        onehot = np.zeros_like(pdist)
        onehot[np.arange(keep.sum()), pidx[keep]] = 1.0
        dpl = (-adv[keep][:, None] / max(keep.sum(), 1)) * (onehot - pdist)
        pgrads, _ = comps.instructor.payload_head.backward(pcache, dpl)
        opt["payload_head"].update(comps.instructor.payload_head.w, pgrads, lr)
    teach = teach_loss([u for ep in batch.episodes for u in ep.interventions])
    return {"teach": float(teach)}


def estimate_kl_ai(comps: Components, prior: AiPolicy,
                   batch: RolloutBatch) -> float:
    X = batch.flat("ai_inputs")
    if X.size == 0:
        return 0.0
    Hp = batch.flat("ai_hidden_prev")
    h, _ = comps.ai.hidden_forward(X, Hp)
    logits, _ = comps.ai.action_head.forward(h)
    dist = softmax(logits, axis=-1)
    ph, _ = prior.hidden_forward(X, Hp)
    plog, _ = prior.action_head.forward(ph)
    pdist = softmax(plog, axis=-1)
    return float(categorical_kl(dist, pdist).mean())


def estimate_kl_human(comps: Components, prior: SurrogateNets,
                      prior_table: ProtocolTable, batch: RolloutBatch) -> float:
    idxs = batch.flat("human_msg_idx").astype(int)
    keep = idxs >= 0
    if not np.any(keep):
        return 0.0
    hiddens = batch.flat("human_hidden")[keep]
    entries = batch.flat("human_entries")[keep]
    cur, _ = human_message_dists(comps.surrogate, entries, hiddens)
    # prior conditioned on the same table entries; see update_surrogate
    plogits, _ = prior.msg_head.forward(hiddens)
    pdist = softmax(np.log(entries + 1e-12) + plogits, axis=-1)
    return float(categorical_kl(cur, pdist).mean())


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    components: Components
    priors: tuple  # (AiPolicy, SurrogateNets, ProtocolTable)
    budget: BudgetState
    log: list[dict]
    initial_surrogate_flat: np.ndarray
    final_surrogate_flat: np.ndarray


def surrogate_flat(nets: SurrogateNets) -> np.ndarray:
    return np.concatenate([m.flatten() for _, m in sorted(nets.modules().items())])


def train(cfg: TrainConfig, seed: int,
          log_path=None, progress: bool = False) -> TrainResult:
    """Algorithm: rollout, then alternating sub-updates (surrogate, AI policy,
    generator, mapper, instructor), then projected dual ascent."""
    rng = np.random.default_rng(seed)
    comps = make_components(cfg, rng)
    baseline = cfg.mode == "baseline"
    if baseline:
        scfg = copy.deepcopy(cfg.surrogate)
        scfg.p_update = 0.0
        scfg.token_flip = 0.0
        scfg.count_drift = 0.0
        cfg = copy.deepcopy(cfg)
        cfg.surrogate = scfg

    budget = BudgetState(tau_a=cfg.tau_a, tau_h=cfg.tau_h,
                         eta_lambda=cfg.eta_lambda)
    opts_ai = {k: Adam() for k in ("cell", "mlp", "action_head", "value_head")}
    opt_sur = Adam()
    opts_gen = {"generator": Adam(), "decoder": Adam()}
    opt_map = Adam()
    opts_ins = {"gate": Adam(), "payload_head": Adam()}

    prior_ai: Optional[AiPolicy] = None
    prior_sur: Optional[SurrogateNets] = None
    prior_table: Optional[ProtocolTable] = None
    init_sur_flat = surrogate_flat(comps.surrogate)
    log: list[dict] = []
    logf = open(log_path, "w") if log_path else None

    try:
        for epoch in range(cfg.epochs):
            pretraining = epoch < cfg.pretrain_epochs
            batch = collect_rollouts(
                cfg, comps, cfg.episodes_per_epoch, rng,
                freeze_table=baseline,
                table_update_scale=1.0 / (1.0 + budget.lambda_h))
            if not np.all(np.isfinite(batch.flat("rewards") if batch.episodes else np.zeros(1))):
                raise FloatingPointError("non-finite rewards in rollout")

            stats_sur = {"task": 0.0, "kl": 0.0}
            if not baseline:
                # dual-scaled trust region: as lambda_h grows, optimizer
                # pressure on the human model shrinks
                stats_sur = update_surrogate(
                    cfg, comps, batch, prior_sur, prior_table, budget,
                    opt_sur, cfg.lr_surrogate / (1.0 + budget.lambda_h))
            # cosine floor on the policy lr late in training plus dual
            # scaling, so post-snapshot drift settles inside the KL budget
            frac = epoch / max(cfg.epochs - 1, 1)
            decay = 1.0 if frac < 0.5 else 1.0 - 0.8 * (frac - 0.5) / 0.5
            lr_ai = cfg.lr_ai * decay / (1.0 + budget.lambda_a)
            stats_ai = update_ai_policy(cfg, comps, batch, prior_ai, budget,
                                        opts_ai, lr_ai)
            stats_gen = {"ib": 0.0}
            stats_map = {"rep": 0.0}
            stats_ins = {"teach": 0.0}
            if not baseline and not pretraining:
                stats_gen = update_generator(cfg, comps, batch, opts_gen,
                                             cfg.lr_generator)
                stats_map = update_mapper(cfg, comps, batch, opt_map,
                                          cfg.lr_mapper, rng)
                stats_ins = update_instructor(cfg, comps, batch, opts_ins,
                                              cfg.lr_instructor)

            if epoch == cfg.pretrain_epochs - 1 or \
                    (cfg.pretrain_epochs == 0 and epoch == 0 and prior_ai is None):
                prior_ai = copy.deepcopy(comps.ai)
                prior_sur = copy.deepcopy(comps.surrogate)
                prior_table = copy.deepcopy(comps.table)

            kl_a_raw = estimate_kl_ai(comps, prior_ai, batch) if prior_ai else 0.0
            kl_h_raw = 0.0
            if not baseline and prior_sur is not None:
                kl_h_raw = estimate_kl_human(comps, prior_sur, prior_table,
                                             batch)
            # single-batch KL estimates are high-variance; track an EMA so the
            # dual variables respond to the trend rather than batch noise
            if prior_ai is not None and not pretraining:
                kl_a = KL_EMA * budget.kl_hat_a + (1 - KL_EMA) * kl_a_raw
                kl_h = KL_EMA * budget.kl_hat_h + (1 - KL_EMA) * kl_h_raw
            else:
                kl_a, kl_h = kl_a_raw, kl_h_raw
            budget.kl_hat_a, budget.kl_hat_h = kl_a, kl_h
            if prior_ai is not None and not pretraining:
                if baseline:
                    budget = dual_update(budget, kl_a - budget.tau_a, 0.0)
                    budget.lambda_h = 0.0
                else:
                    budget = dual_update(budget, kl_a - budget.tau_a,
                                         kl_h - budget.tau_h)
                budget.kl_hat_a, budget.kl_hat_h = kl_a, kl_h

            sr = float(np.mean([ep.success for ep in batch.episodes])) \
                if batch.episodes else 0.0
            breakdown = composite_loss(
                task=stats_ai["task"] + stats_sur["task"], budget=budget,
                ib=stats_gen["ib"] if not baseline else 0.0,
                rep=stats_map["rep"] if not baseline else 0.0,
                teach=stats_ins["teach"] if not baseline else 0.0,
                beta=0.0 if baseline else cfg.beta_ib,
                mu=0.0 if baseline else cfg.mu_rep,
                kappa=0.0 if baseline else cfg.kappa_teach)
            if not np.isfinite(breakdown.total):
                raise FloatingPointError(
                    f"non-finite composite loss: {asdict(breakdown)}")
            entry = {
                "epoch": epoch, "sr": sr,
                "return": float(np.mean([ep.episode_return
                                         for ep in batch.episodes] or [0.0])),
                "tokens_per_episode": float(np.mean(
                    [ep.tokens for ep in batch.episodes] or [0.0])),
                "kl_a": kl_a, "kl_h": kl_h,
                "lambda_a": budget.lambda_a, "lambda_h": budget.lambda_h,
                "loss": {"task": breakdown.task, "kl_pen_a": breakdown.kl_pen_a,
                         "kl_pen_h": breakdown.kl_pen_h, "ib": breakdown.ib,
                         "rep": breakdown.rep, "teach": breakdown.teach,
                         "total": breakdown.total},
                "tau_proto": comps.tau,
            }
            log.append(entry)
            if logf:
                logf.write(json.dumps(entry) + "\n")
            if progress and epoch % 25 == 0:
                print(f"epoch {epoch}: sr={sr:.2f} ret={entry['return']:.1f} "
                      f"klA={kl_a:.4f} klH={kl_h:.4f}")
    finally:
        if logf:
            logf.close()

    return TrainResult(components=comps,
                       priors=(prior_ai, prior_sur, prior_table),
                       budget=budget, log=log,
                       initial_surrogate_flat=init_sur_flat,
                       final_surrogate_flat=surrogate_flat(comps.surrogate))
