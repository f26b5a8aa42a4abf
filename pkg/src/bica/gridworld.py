"""MapTalk gridworld: partially observable 8x8 navigation with two-way messaging.

The AI moves on the grid with a 3x3 egocentric view; the human side sees the
whole map and communicates with short discrete messages. Reward trades off
steps, collisions, goal completion and token usage.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

T_MAX = 80
WALL = 2  # sentinel for out-of-bounds cells in egocentric views

# Human vocabulary: directions, counts, landmarks, macro commands.
HUMAN_DIRECTIONS = ("N", "E", "S", "W")
HUMAN_COUNTS = ("1", "2", "3", "4")
HUMAN_LANDMARKS = ("J", "D")
HUMAN_MACROS = ("TURN-A", "ALIGN")
HUMAN_VOCAB = HUMAN_DIRECTIONS + HUMAN_COUNTS + HUMAN_LANDMARKS + HUMAN_MACROS

# AI vocabulary: requests and proposals for coordination.
AI_VOCAB = (
    "REQ-DIR", "REQ-DIST", "REQ-LANDMARK",
    "PROP-FWD", "PROP-TURN-L", "PROP-TURN-R",
    "ACK", "HELP",
)

MAX_TOKENS_PER_MESSAGE = 2

HEADINGS = ("N", "E", "S", "W")
# row/col deltas for each heading
HEADING_DELTAS = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
# LEFT follows N -> W -> S -> E -> N
LEFT_OF = {"N": "W", "W": "S", "S": "E", "E": "N"}
RIGHT_OF = {v: k for k, v in LEFT_OF.items()}


class AiAction(Enum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STAY = 3


@dataclass(frozen=True)
class Message:
    """A discrete message from one side of the channel."""
    side: str  # "human" | "ai"
    tokens: tuple[str, ...]

    def __post_init__(self):
        vocab = HUMAN_VOCAB if self.side == "human" else AI_VOCAB
        for t in self.tokens:
            if t not in vocab:
                raise ValueError(f"token {t!r} not in {self.side} vocabulary")
        if len(self.tokens) > MAX_TOKENS_PER_MESSAGE:
            raise ValueError("messages are limited to 2 tokens")

    @property
    def token_count(self) -> int:
        return len(self.tokens)


EMPTY_HUMAN_MESSAGE = Message("human", ())
EMPTY_AI_MESSAGE = Message("ai", ())


@dataclass(frozen=True)
class MapInstance:
    width: int
    height: int
    obstacles: np.ndarray  # bool, shape (height, width)
    start: tuple[int, int]  # (row, col)
    start_heading: str
    goal: tuple[int, int]
    density: float
    seed: int

    def is_free(self, r: int, c: int) -> bool:
        return (0 <= r < self.height and 0 <= c < self.width
                and not self.obstacles[r, c])


@dataclass
class MapState:
    map: MapInstance
    pose: tuple[int, int]
    heading: str
    step_count: int = 0
    done: bool = False
    done_reason: Optional[str] = None  # "goal" | "timeout"


@dataclass(frozen=True)
class StepEvents:
    moved: bool
    collided: bool
    reached_goal: bool


@dataclass(frozen=True)
class EgoView:
    """3x3 occupancy patch rotated so 'up' is the agent's heading."""
    patch: np.ndarray  # int, 0 free / 1 obstacle / WALL out-of-bounds
    heading: str
    goal_visible: bool


@dataclass(frozen=True)
class FullView:
    """Complete map state as seen by the human."""
    obstacles: np.ndarray
    pose: tuple[int, int]
    heading: str
    goal: tuple[int, int]
    step_count: int


@dataclass(frozen=True)
class EnvParams:
    width: int = 8
    height: int = 8
    density_low: float = 0.2
    density_high: float = 0.3


def bfs_reachable(obstacles: np.ndarray, start: tuple[int, int],
                  goal: tuple[int, int]) -> bool:
    """Heading-free reachability check over the four grid moves."""
    h, w = obstacles.shape
    seen = np.zeros_like(obstacles, dtype=bool)
    q = deque([start])
    seen[start] = True
    while q:
        r, c = q.popleft()
        if (r, c) == goal:
            return True
        for dr, dc in HEADING_DELTAS.values():
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not obstacles[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                q.append((nr, nc))
    return False


def shortest_path_length(obstacles: np.ndarray, start: tuple[int, int],
                         goal: tuple[int, int]) -> Optional[int]:
    """BFS distance in grid moves, or None if unreachable."""
    h, w = obstacles.shape
    dist = {start: 0}
    q = deque([start])
    while q:
        r, c = q.popleft()
        if (r, c) == goal:
            return dist[(r, c)]
        for dr, dc in HEADING_DELTAS.values():
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not obstacles[nr, nc] and (nr, nc) not in dist:
                dist[(nr, nc)] = dist[(r, c)] + 1
                q.append((nr, nc))
    return None


class MapGenerationError(RuntimeError):
    pass


def generate_map(seed: int, density: float, width: int = 8, height: int = 8,
                 max_attempts: int = 500) -> MapInstance:
    """Rejection-sample obstacle layouts until start and goal are connected."""
    if not 0.0 <= density < 1.0:
        raise ValueError("density must be in [0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        obstacles = rng.random((height, width)) < density
        free = np.argwhere(~obstacles)
        if len(free) < 2:
            continue
        idx = rng.choice(len(free), size=2, replace=False)
        start = tuple(int(v) for v in free[idx[0]])
        goal = tuple(int(v) for v in free[idx[1]])
        heading = HEADINGS[rng.integers(4)]
        if bfs_reachable(obstacles, start, goal):
            return MapInstance(width=width, height=height, obstacles=obstacles,
                               start=start, start_heading=heading, goal=goal,
                               density=float(density), seed=int(seed))
    raise MapGenerationError(
        f"no reachable start/goal pair after {max_attempts} attempts at density {density}")


def initial_state(map_instance: MapInstance) -> MapState:
    return MapState(map=map_instance, pose=map_instance.start,
                    heading=map_instance.start_heading)


def step(state: MapState, action: AiAction) -> tuple[MapState, StepEvents]:
    """Advance one environment step. Stepping a done state is a contract error."""
    if state.done:
        raise RuntimeError("cannot step a finished episode")
    pose, heading = state.pose, state.heading
    moved = collided = False
    if action is AiAction.LEFT:
        heading = LEFT_OF[heading]
    elif action is AiAction.RIGHT:
        heading = RIGHT_OF[heading]
    elif action is AiAction.FORWARD:
        dr, dc = HEADING_DELTAS[heading]
        nr, nc = pose[0] + dr, pose[1] + dc
        if state.map.is_free(nr, nc):
            pose = (nr, nc)
            moved = True
        else:
            collided = True
    step_count = state.step_count + 1
    reached_goal = pose == state.map.goal
    done = reached_goal or step_count >= T_MAX
    reason = "goal" if reached_goal else ("timeout" if done else None)
    events = StepEvents(moved=moved, collided=collided, reached_goal=reached_goal)
    return MapState(map=state.map, pose=pose, heading=heading,
                    step_count=step_count, done=done, done_reason=reason), events


def compute_reward(events: StepEvents, tokens_this_step: int) -> float:
    """r = -1*step - 5*collision + 50*goal - 0.05*tokens."""
    if tokens_this_step < 0:
        raise ValueError("token count must be nonnegative")
    return (-1.0
            - 5.0 * float(events.collided)
            + 50.0 * float(events.reached_goal)
            - 0.05 * tokens_this_step)


def observe_ai(state: MapState) -> EgoView:
    """3x3 patch around the agent, rotated so the agent's heading points up."""
    m = state.map
    r0, c0 = state.pose
    patch = np.full((3, 3), WALL, dtype=int)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < m.height and 0 <= c < m.width:
                patch[dr + 1, dc + 1] = int(m.obstacles[r, c])
    # rotate so that the heading direction maps to "up"
    k = {"N": 0, "E": 1, "S": 2, "W": 3}[state.heading]
    patch = np.rot90(patch, k=k) if k else patch
    goal_visible = (abs(m.goal[0] - r0) <= 1 and abs(m.goal[1] - c0) <= 1)
    return EgoView(patch=np.ascontiguousarray(patch), heading=state.heading,
                   goal_visible=goal_visible)


EGO_FEATURES = 28


def encode_ego_view(view: EgoView) -> np.ndarray:
    """Feature vector for the AI's nets: per-cell occupancy one-hots plus the
    goal-visible flag."""
    feats = np.zeros(EGO_FEATURES)
    flat = view.patch.ravel()
    for i, v in enumerate(flat):
        feats[i * 3 + int(v)] = 1.0
    feats[27] = float(view.goal_visible)
    return feats


def observe_human(state: MapState) -> FullView:
    return FullView(obstacles=state.map.obstacles.copy(), pose=state.pose,
                    heading=state.heading, goal=state.map.goal,
                    step_count=state.step_count)


def shift_environment(params: EnvParams, shift_level: str) -> EnvParams:
    """OOD raises density above the training band and enlarges the grid."""
    if shift_level == "in_distribution":
        return EnvParams()
    if shift_level == "ood":
        return EnvParams(width=10, height=10, density_low=0.35, density_high=0.35)
    raise ValueError(f"unknown shift level {shift_level!r}")


def sample_density(params: EnvParams, rng: np.random.Generator) -> float:
    if params.density_low == params.density_high:
        return params.density_low
    return float(rng.uniform(params.density_low, params.density_high))


# -- serialization ------------------------------------------------------------

def map_to_text(m: MapInstance) -> str:
    lines = [f"{m.width} {m.height} {m.density} {m.seed}"]
    for r in range(m.height):
        row = []
        for c in range(m.width):
            if (r, c) == m.start:
                row.append("S")
            elif (r, c) == m.goal:
                row.append("G")
            elif m.obstacles[r, c]:
                row.append("#")
            else:
                row.append(".")
        lines.append("".join(row))
    lines.append(f"heading {m.start_heading}")
    return "\n".join(lines) + "\n"


def map_from_text(text: str) -> MapInstance:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    w, h, density, seed = lines[0].split()
    width, height = int(w), int(h)
    obstacles = np.zeros((height, width), dtype=bool)
    start = goal = None
    for r, line in enumerate(lines[1:1 + height]):
        for c, ch in enumerate(line):
            if ch == "#":
                obstacles[r, c] = True
            elif ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
    heading = "N"
    for ln in lines[1 + height:]:
        if ln.startswith("heading"):
            heading = ln.split()[1]
    if start is None or goal is None:
        raise ValueError("map text missing start or goal")
    return MapInstance(width=width, height=height, obstacles=obstacles,
                       start=start, start_heading=heading, goal=goal,
                       density=float(density), seed=int(seed))


def trace_record(step_idx: int, state: MapState, action: Optional[AiAction],
                 human_msg: Message, ai_msg: Message, reward: float,
                 events: Optional[StepEvents],
                 intervention: Optional[dict] = None) -> dict:
    """One line of an episode trace (line-delimited JSON)."""
    return {
        "step": step_idx,
        "pose": list(state.pose),
        "heading": state.heading,
        "action": action.name if action is not None else None,
        "human_msg": list(human_msg.tokens),
        "ai_msg": list(ai_msg.tokens),
        "reward": reward,
        "events": {
            "moved": events.moved, "collided": events.collided,
            "reached_goal": events.reached_goal,
        } if events is not None else None,
        "intervention": intervention,
    }


def write_trace(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
