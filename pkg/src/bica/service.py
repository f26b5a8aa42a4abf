"""Session service: live MapTalk episodes (a real human replaces the
surrogate), navigator sessions, and run-report access for the dashboard.
JSON request/response plus a server-push event stream per live episode.
"""
from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from . import gridworld as gw
from . import navigator as nav
from . import protocol as proto
from . import surrogate as su
from .gridworld import (AI_VOCAB, HUMAN_VOCAB, AiAction, Message, T_MAX,
                        encode_ego_view)
from .instructor import NO_INTERVENTION, PAYLOADS, Intervention
from .neural import load_checkpoint, sigmoid, softmax
from .surrogate import context_key, distance_bucket
from .trainer import (Components, TrainConfig, goal_potential,
                      instructor_features, make_components)


# -- live MapTalk episodes ----------------------------------------------------

@dataclass
class LiveEpisode:
    """One human-in-the-loop episode with exclusive per-session state."""
    cfg: TrainConfig
    comps: Components
    rng: np.random.Generator
    state: gw.MapState
    ai_hidden: np.ndarray
    last_ai_msg: Message = gw.EMPTY_AI_MESSAGE
    last_intervention: Intervention = NO_INTERVENTION
    reward_window: list = field(default_factory=list)
    error_window: list = field(default_factory=list)
    recent_collisions: int = 0
    since_progress: int = 0
    best_dist: int = 0
    events: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    total_reward: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def emit(self, kind: str, payload: dict) -> dict:
        event = {"seq": len(self.events), "kind": kind, **payload}
        self.events.append(event)
        return event

    def human_view(self) -> dict:
        view = gw.observe_human(self.state)
        return {
            "grid": self.state.map.obstacles.astype(int).tolist(),
            "pose": list(self.state.pose),
            "heading": self.state.heading,
            "goal": list(self.state.map.goal),
            "step": self.state.step_count,
            "done": self.state.done,
            "last_ai_msg": list(self.last_ai_msg.tokens),
            "intervention": (self.last_intervention.payload
                             if self.last_intervention.active else None),
            "total_reward": self.total_reward,
        }

    def step(self, tokens: tuple[str, ...]) -> dict:
        """Advance one exchange: the human message is given, the AI replies,
        the instructor may intervene, the AI acts, the env steps."""
        if self.state.done:
            raise ValueError("episode finished")
        human_msg = Message("human", tokens)   # validates vocabulary
        view = gw.observe_human(self.state)

        ego = gw.observe_ai(self.state)
        x = self.comps.ai.input_vector(encode_ego_view(ego),
                                       self.state.heading, human_msg)
        dists, values, h_new = self.comps.ai.step(x[None, :],
                                                  self.ai_hidden[None, :])
        dist = dists[0]

        ai_msg = gw.EMPTY_AI_MESSAGE
        if self.cfg.mode != "baseline":
            pctx = proto.build_context(
                self.reward_window[-self.cfg.error_window:] or [0.0],
                self.error_window[-self.cfg.error_window:] or [False],
                dist, distance_bucket(view), self.state.heading,
                self.error_window[-1] if self.error_window else False)
            c = proto.generator_input(pctx)
            logits, _ = self.comps.generator.forward(c[None, :])
            g = proto.sample_gumbel(logits.shape, self.rng)
            relaxed = softmax((logits + g) / self.comps.tau, axis=-1)
            hard = np.zeros_like(relaxed)
            hard[0, int(np.argmax(relaxed[0]))] = 1.0
            token_logits, _ = self.comps.decoder.forward(hard)
            tdist = softmax(token_logits, axis=-1)[0]
            tok = AI_VOCAB[int(np.searchsorted(np.cumsum(tdist),
                                               self.rng.random()))]
            ai_msg = Message("ai", (tok,))

        intervention = NO_INTERVENTION
        if self.cfg.mode != "baseline":
            feats, hist = instructor_features(
                view, self.recent_collisions, self.since_progress,
                self.state.step_count, self.last_intervention.active)
            gx = np.concatenate([feats, hist])
            p = float(sigmoid(self.comps.instructor.gate.forward(gx)[0])[0])
            if p > self.cfg.instructor_threshold:
                pd = softmax(self.comps.instructor.payload_head.forward(gx)[0])
                payload = PAYLOADS[int(self.rng.choice(len(pd), p=pd))]
                kind = ("protocol_hint" if payload.startswith("protocol:")
                        else "strategy_hint")
                intervention = Intervention(kind, payload)

        a_idx = int(self.rng.choice(len(dist), p=dist))
        action = AiAction(a_idx)
        new_state, events = gw.step(self.state, action)
        n_tokens = human_msg.token_count + ai_msg.token_count
        reward = gw.compute_reward(events, n_tokens)

        self.reward_window.append(reward)
        self.error_window.append(events.collided)
        self.recent_collisions = (min(4, self.recent_collisions + 1)
                                  if events.collided
                                  else max(0, self.recent_collisions - 1))
        d = abs(new_state.map.goal[0] - new_state.pose[0]) + \
            abs(new_state.map.goal[1] - new_state.pose[1])
        if d < self.best_dist:
            self.best_dist = d
            self.since_progress = 0
        else:
            self.since_progress = min(10, self.since_progress + 1)
        self.total_reward += reward

        self.trace.append({
            "step": self.state.step_count,
            "pose": list(new_state.pose),
            "action": a_idx,
            "human_msg": list(tokens),
            "ai_msg": list(ai_msg.tokens),
            "reward": float(reward),
            "collided": bool(events.collided),
            "reached_goal": bool(events.reached_goal),
            "intervention": bool(intervention.active),
        })
        self.state = new_state
        self.ai_hidden = h_new[0]
        self.last_ai_msg = ai_msg
        self.last_intervention = intervention

        self.emit("ai_message", {"tokens": list(ai_msg.tokens)})
        if intervention.active:
            self.emit("intervention", {"payload": intervention.payload})
        self.emit("action", {"action": action.name})
        self.emit("reward", {"reward": float(reward),
                             "total": self.total_reward})
        if new_state.done:
            self.emit("done", {"reason": new_state.done_reason,
                               "steps": new_state.step_count,
                               "total_reward": self.total_reward})
        return {
            "ai_msg": list(ai_msg.tokens),
            "action": action.name,
            "reward": float(reward),
            "collided": bool(events.collided),
            "done": new_state.done,
            "done_reason": new_state.done_reason,
            "view": self.human_view(),
            "intervention": (intervention.payload
                             if intervention.active else None),
        }


def make_live_episode(cfg: TrainConfig, comps: Components,
                      seed: int) -> LiveEpisode:
    rng = np.random.default_rng(seed)
    density = gw.sample_density(cfg.env, rng)
    m = gw.generate_map(int(rng.integers(2 ** 31)), density,
                        width=cfg.env.width, height=cfg.env.height)
    st = gw.initial_state(m)
    ep = LiveEpisode(cfg=cfg, comps=comps, rng=rng, state=st,
                     ai_hidden=np.zeros(comps.ai.hidden_size),
                     best_dist=abs(m.goal[0] - st.pose[0])
                     + abs(m.goal[1] - st.pose[1]))
    ep.emit("start", {"map": gw.map_to_text(m), "view": ep.human_view()})
    return ep


# -- image encoding -----------------------------------------------------------

def image_png_base64(img: np.ndarray) -> str:
    from PIL import Image
    arr = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


# -- request bodies -----------------------------------------------------------

class CreateMapTalk(BaseModel):
    seed: int = 0
    mode: str = "bica"


class SubmitMessage(BaseModel):
    tokens: list[str]


class CreateNavigator(BaseModel):
    seed: int = 0


class SubmitClick(BaseModel):
    x: float
    y: float


# -- app ----------------------------------------------------------------------

def create_app(cfg: Optional[TrainConfig] = None,
               checkpoint: Optional[str] = None,
               runs_dir: str = "runs",
               trace_dir: Optional[str] = None) -> FastAPI:
    cfg = cfg or TrainConfig()
    comps = make_components(cfg, np.random.default_rng(0))
    if checkpoint:
        load_checkpoint(checkpoint, comps.checkpoint_modules())
    app = FastAPI(title="bica session service")
    maptalk: dict[str, LiveEpisode] = {}
    navigators: dict[str, nav.NavSession] = {}
    nav_locks: dict[str, threading.Lock] = {}

    def get_episode(sid: str) -> LiveEpisode:
        if sid not in maptalk:
            raise HTTPException(404, f"unknown session {sid}")
        return maptalk[sid]

    @app.post("/sessions/maptalk")
    def create_maptalk(body: CreateMapTalk):
        scfg = cfg if body.mode == cfg.mode else TrainConfig(mode=body.mode)
        sid = uuid.uuid4().hex[:12]
        maptalk[sid] = make_live_episode(scfg, comps, body.seed)
        ep = maptalk[sid]
        return {"session_id": sid, "mode": body.mode,
                "map": gw.map_to_text(ep.state.map),
                "view": ep.human_view(),
                "human_vocab": list(HUMAN_VOCAB),
                "ai_vocab": list(AI_VOCAB),
                "max_tokens_per_message": gw.MAX_TOKENS_PER_MESSAGE}

    @app.get("/sessions/maptalk/{sid}/view")
    def get_view(sid: str):
        return get_episode(sid).human_view()

    @app.post("/sessions/maptalk/{sid}/message")
    def submit_message(sid: str, body: SubmitMessage):
        ep = get_episode(sid)
        with ep.lock:
            try:
                return ep.step(tuple(body.tokens))
            except ValueError as exc:
                raise HTTPException(422, detail={
                    "error": str(exc),
                    "valid_tokens": list(HUMAN_VOCAB),
                    "max_tokens": gw.MAX_TOKENS_PER_MESSAGE})

    @app.get("/sessions/maptalk/{sid}/events")
    def get_events(sid: str, since: int = -1):
        """Events with sequence numbers strictly greater than `since`."""
        ep = get_episode(sid)
        return {"events": [ev for ev in ep.events if ev["seq"] > since]}

    @app.get("/sessions/maptalk/{sid}/stream")
    def stream_events(sid: str):
        ep = get_episode(sid)

        def gen():
            seq = 0
            idle = 0.0
            while idle < 30.0:
                if seq < len(ep.events):
                    for ev in ep.events[seq:]:
                        yield f"id: {ev['seq']}\ndata: {json.dumps(ev)}\n\n"
                    seq = len(ep.events)
                    idle = 0.0
                    if ep.state.done:
                        return
                else:
                    time.sleep(0.05)
                    idle += 0.05
        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/sessions/maptalk/{sid}/trace")
    def get_trace(sid: str):
        ep = get_episode(sid)
        if trace_dir:
            os.makedirs(trace_dir, exist_ok=True)
            gw.write_trace(os.path.join(trace_dir, f"{sid}.jsonl"), ep.trace)
        return {"records": ep.trace}

    @app.post("/sessions/navigator")
    def create_navigator(body: CreateNavigator):
        sid = uuid.uuid4().hex[:12]
        session = nav.NavSession.create(body.seed)
        navigators[sid] = session
        nav_locks[sid] = threading.Lock()
        return {"session_id": sid,
                "anchors": session.anchor_xy.tolist(),
                "suggestions": [r.to_json() for r in
                                session.suggest_regions()],
                "budget": session.budget}

    @app.get("/sessions/navigator/{sid}/suggestions")
    def get_suggestions(sid: str):
        if sid not in navigators:
            raise HTTPException(404, f"unknown session {sid}")
        return {"suggestions": [r.to_json() for r in
                                navigators[sid].suggest_regions()]}

    @app.post("/sessions/navigator/{sid}/click")
    def submit_click(sid: str, body: SubmitClick):
        if sid not in navigators:
            raise HTTPException(404, f"unknown session {sid}")
        session = navigators[sid]
        with nav_locks[sid]:
            try:
                it = session.click(np.array([body.x, body.y]))
            except (ValueError, RuntimeError) as exc:
                raise HTTPException(422, str(exc))
            img = session.world.decode(it.z)
            return {"image_id": it.image_id,
                    "image_png": image_png_base64(img),
                    "score": it.score,
                    "preference": it.preference,
                    "clicks_used": len(session.log),
                    "suggestions": [r.to_json() for r in
                                    session.suggest_regions()]}

    @app.get("/sessions/navigator/{sid}/metrics")
    def navigator_metrics(sid: str):
        if sid not in navigators:
            raise HTTPException(404, f"unknown session {sid}")
        return nav.session_metrics(navigators[sid])

    @app.get("/runs")
    def list_runs():
        if not os.path.isdir(runs_dir):
            return {"runs": []}
        out = []
        for name in sorted(os.listdir(runs_dir)):
            path = os.path.join(runs_dir, name, "report.json")
            if os.path.isfile(path):
                out.append(name)
        return {"runs": out}

    @app.get("/runs/{name}")
    def get_run(name: str):
        path = os.path.join(runs_dir, name, "report.json")
        if not os.path.isfile(path) or "/" in name or ".." in name:
            raise HTTPException(404, f"unknown run {name}")
        with open(path) as f:
            return json.load(f)

    return app
