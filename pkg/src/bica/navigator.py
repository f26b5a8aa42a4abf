"""Latent navigator: the second collaboration task. A 16-dim latent world
decodes to 32x32 grayscale images scored by a hidden oracle; the AI side
projects the space to 2-D, suggests exploration regions, and the human
(surrogate or live) clicks points in the projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from .alignment import cca_corr
from .neural import MLP, softmax

LATENT_DIM = 16
IMAGE_SIZE = 32
PROJ_HIDDEN = 64
N_ANCHORS = 50         # seed anchors so 2-D clicks can be lifted
LIFT_K = 5             # nearest anchors used to lift a click
N_SUGGESTIONS = 3
INTERACTION_BUDGET = 100
BETA_VAE = 4.0
MIN_REGION_RADIUS = 0.08
DISCOVERY_GRID = 6
PREFERENCE_SIGMA = 0.1
CLICK_TEMPERATURE = 0.3


# -- world --------------------------------------------------------------------

@dataclass
class LatentWorld:
    """Procedurally generated decoder plus a hidden scoring oracle.

    The decoder renders smooth frequency mixtures so nearby latents look
    alike; the oracle is a sparse linear + pairwise interaction over 4 hidden
    factors, squashed to (0, 1). Both are deterministic per seed.
    """
    seed: int
    decoder_w: np.ndarray = field(init=False)
    oracle_idx: np.ndarray = field(init=False)
    oracle_coef: np.ndarray = field(init=False)
    oracle_pair: float = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        yy, xx = np.meshgrid(np.linspace(0, 1, IMAGE_SIZE),
                             np.linspace(0, 1, IMAGE_SIZE), indexing="ij")
        basis = []
        for _ in range(LATENT_DIM):
            fx, fy = rng.uniform(0.5, 4.0, size=2)
            ph = rng.uniform(0, 2 * math.pi)
            basis.append(np.sin(2 * math.pi * (fx * xx + fy * yy) + ph))
        self.decoder_w = np.stack([b.ravel() for b in basis])
        self.oracle_idx = rng.choice(LATENT_DIM, size=4, replace=False)
        self.oracle_coef = rng.uniform(0.8, 1.6, size=4) * rng.choice([-1, 1], 4)
        self.oracle_pair = float(rng.uniform(0.5, 1.2))

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (LATENT_DIM,):
            raise ValueError("latent must have 16 dimensions")
        img = (z @ self.decoder_w).reshape(IMAGE_SIZE, IMAGE_SIZE)
        return expit(img / math.sqrt(LATENT_DIM))

    def score(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        f = z[self.oracle_idx]
        raw = float(f @ self.oracle_coef
                    + self.oracle_pair * f[0] * f[1]
                    - 0.1 * np.sum(z * z))
        return float(expit(raw))


# -- projection and lifting ---------------------------------------------------

@dataclass
class ProjectionNet:
    """Deterministic 16 -> 64 -> 2 projection used for display and clicking;
    tanh keeps the canvas bounded in [-1, 1]^2."""
    net: MLP

    @classmethod
    def create(cls, rng: np.random.Generator) -> "ProjectionNet":
        return cls(MLP([LATENT_DIM, PROJ_HIDDEN, 2], rng))

    def project(self, z: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(np.atleast_2d(np.asarray(z, dtype=float)))
        return np.tanh(out).reshape(-1, 2).squeeze()


def lift_click(click_xy: np.ndarray, anchor_xy: np.ndarray,
               anchor_z: np.ndarray, k: int = LIFT_K) -> np.ndarray:
    """Approximate inverse of the projection: inverse-distance-weighted
    average of the latents of the k nearest anchors. A click exactly on an
    anchor's projection returns that anchor's latent."""
    if len(anchor_z) == 0:
        raise ValueError("need at least one anchor point")
    d = np.linalg.norm(anchor_xy - click_xy[None, :], axis=1)
    if d.min() == 0.0:
        return anchor_z[int(np.argmin(d))].copy()
    order = np.argsort(d)[:min(k, len(d))]
    w = 1.0 / d[order]
    w /= w.sum()
    return (w[:, None] * anchor_z[order]).sum(axis=0)


# -- sessions -----------------------------------------------------------------

@dataclass
class Region:
    center: tuple[float, float]
    radius: float
    expected: float
    value: float
    count: int

    def contains(self, xy: np.ndarray) -> bool:
        return bool(np.linalg.norm(np.asarray(xy) - np.asarray(self.center))
                    <= self.radius)

    def to_json(self) -> dict:
        return {"center": list(self.center), "radius": self.radius,
                "expected": self.expected, "value": self.value,
                "count": self.count}


@dataclass
class Interaction:
    regions: list[Region]
    click_xy: np.ndarray
    z: np.ndarray
    image_id: int
    score: float
    preference: float


@dataclass
class NavSession:
    """One navigation session: anchors, the running interaction log, and the
    suggestion policy state. Interaction budget 100."""
    world: LatentWorld
    projector: ProjectionNet
    rng: np.random.Generator
    anchor_z: np.ndarray
    anchor_xy: np.ndarray
    log: list[Interaction] = field(default_factory=list)
    budget: int = INTERACTION_BUDGET
    # isotropic latent jitter applied on top of the deterministic lift;
    # without it every sample stays inside the convex hull of the seed
    # anchors and high-score latents can be unreachable
    jitter: float = 0.25

    @classmethod
    def create(cls, seed: int, n_anchors: int = N_ANCHORS) -> "NavSession":
        rng = np.random.default_rng(seed)
        world = LatentWorld(seed)
        projector = ProjectionNet.create(np.random.default_rng(seed + 1))
        anchor_z = rng.normal(size=(n_anchors, LATENT_DIM))
        anchor_xy = np.stack([projector.project(z) for z in anchor_z])
        return cls(world=world, projector=projector, rng=rng,
                   anchor_z=anchor_z, anchor_xy=anchor_xy)

    def suggest_regions(self, n: int = N_SUGGESTIONS, grid: int = 6,
                        bonus_c: float = 0.3) -> list[Region]:
        """Grid-binned empirical mean score with a count-based exploration
        bonus c/sqrt(n+1); cold start covers the canvas in thirds."""
        if not self.log:
            third = 2.0 / 3.0
            return [Region(center=(-1.0 + third * (i + 0.5), 0.0),
                           radius=max(third / 2, MIN_REGION_RADIUS),
                           expected=0.5, value=0.5, count=0)
                    for i in range(3)]
        xy = np.stack([it.click_xy for it in self.log])
        scores = np.array([it.score for it in self.log])
        edges = np.linspace(-1.0, 1.0, grid + 1)
        cells = []
        for i in range(grid):
            for j in range(grid):
                inside = ((xy[:, 0] >= edges[i]) & (xy[:, 0] < edges[i + 1])
                          & (xy[:, 1] >= edges[j]) & (xy[:, 1] < edges[j + 1]))
                cnt = int(inside.sum())
                mean = float(scores[inside].mean()) if cnt else 0.5
                cells.append(Region(
                    center=((edges[i] + edges[i + 1]) / 2,
                            (edges[j] + edges[j + 1]) / 2),
                    radius=max((edges[1] - edges[0]) / 2, MIN_REGION_RADIUS),
                    expected=mean,
                    value=mean + bonus_c / math.sqrt(cnt + 1),
                    count=cnt))
        cells.sort(key=lambda c: -c.value)
        return cells[:n]

    def click(self, xy: Sequence[float],
              regions: Optional[list[Region]] = None) -> Interaction:
        xy = np.asarray(xy, dtype=float)
        if xy.shape != (2,) or not np.all(np.isfinite(xy)):
            raise ValueError("click must be a finite 2-D point")
        if len(self.log) >= self.budget:
            raise RuntimeError("interaction budget exhausted")
        if regions is None:
            regions = self.suggest_regions()
        z = lift_click(xy, self.anchor_xy, self.anchor_z)
        if self.jitter > 0:
            z = z + self.rng.normal(scale=self.jitter, size=LATENT_DIM)
        score = self.world.score(z)
        pref = float(np.clip(score + self.rng.normal(scale=PREFERENCE_SIGMA),
                             0.0, 1.0))
        it = Interaction(regions=regions, click_xy=xy, z=z,
                         image_id=len(self.log), score=score, preference=pref)
        self.log.append(it)
        # clicked points become anchors so later lifts stay local
        self.anchor_z = np.vstack([self.anchor_z, z])
        self.anchor_xy = np.vstack([self.anchor_xy, self.projector.project(z)])
        return it


# -- surrogate clickers -------------------------------------------------------

def greedy_click(session: NavSession,
                 temperature: float = CLICK_TEMPERATURE,
                 n_candidates: int = 16) -> Interaction:
    """Oracle-guided surrogate: propose candidate clicks (inside suggested
    regions plus a few uniform probes), score their lifted latents, and pick
    by softmax over the oracle estimates at the given temperature."""
    regions = session.suggest_regions()
    best_xy = None
    if session.log:
        best_xy = max(session.log, key=lambda it: it.score).click_xy
    cands = []
    for i in range(n_candidates):
        if best_xy is not None and i < n_candidates // 2:
            # hill-climb around the best click found so far
            xy = best_xy + session.rng.normal(scale=0.1, size=2)
        elif i < 3 * n_candidates // 4:
            r = regions[i % len(regions)]
            xy = np.array(r.center) + session.rng.uniform(
                -r.radius, r.radius, size=2)
        else:
            xy = session.rng.uniform(-1.0, 1.0, size=2)
        cands.append(np.clip(xy, -1.0, 1.0))
    scores = np.array([
        session.world.score(lift_click(c, session.anchor_xy, session.anchor_z))
        for c in cands])
    p = softmax(scores / temperature)
    idx = int(session.rng.choice(len(cands), p=p))
    return session.click(cands[idx], regions=regions)


def random_click(session: NavSession) -> Interaction:
    return session.click(session.rng.uniform(-1.0, 1.0, size=2))


def run_session(seed: int, n_clicks: int = INTERACTION_BUDGET,
                policy: str = "greedy") -> NavSession:
    session = NavSession.create(seed)
    step = greedy_click if policy == "greedy" else random_click
    for _ in range(n_clicks):
        step(session)
    return session


# -- session metrics ----------------------------------------------------------

def probe_quantiles(world: LatentWorld, n_probe: int = 600,
                    ) -> tuple[float, float]:
    """(top-decile cut, reference score) of the oracle over a fixed probe
    set; session-independent quality anchors."""
    rng = np.random.default_rng(world.seed + 2)
    Z = rng.normal(size=(n_probe, LATENT_DIM))
    scores = np.array([world.score(z) for z in Z])
    cut = float(np.quantile(scores, 0.9))
    return cut, cut


def session_metrics(session: NavSession) -> dict:
    """The five per-session metrics: exploration efficiency, representation
    CCA, preference correlation, discovery rate, cognitive compatibility."""
    log = session.log
    if not log:
        raise ValueError("session has no interactions")
    scores = np.array([it.score for it in log])
    best = scores.max()
    decile_cut, reference = probe_quantiles(session.world)
    # efficiency: how productively the interaction budget was spent -- mean
    # clicked oracle score relative to the world's reference score (robust to
    # single lucky clicks, unlike first-hit-time definitions)
    efficiency = float(scores.mean() / reference)

    # latents of clicks vs latents of the suggested-region centers seen
    click_z = np.stack([it.z for it in log])
    center_z = np.stack([
        lift_click(np.array(r.center), session.anchor_xy, session.anchor_z)
        for it in log for r in it.regions[:1]])
    rep_cca = cca_corr(click_z, center_z)

    prefs = np.array([it.preference for it in log])
    if np.std(scores) > 1e-12 and np.std(prefs) > 1e-12:
        pref_corr = float(sps.spearmanr(scores, prefs).statistic)
    else:
        pref_corr = 0.0

    # discovery: how often clicks land latents in the oracle's top decile
    discovery = float(np.mean(scores >= decile_cut))

    inside = [any(r.contains(it.click_xy) for r in it.regions) for it in log]
    compatibility = float(np.mean(inside))

    return {"exploration_efficiency": float(efficiency),
            "representation_cca": float(rep_cca),
            "preference_correlation": pref_corr,
            "discovery_rate": float(discovery),
            "cognitive_compatibility": compatibility,
            "best_score": float(best)}


# -- representation objective -------------------------------------------------

def vae_loss(recon: float, kl: float, beta: float = BETA_VAE) -> float:
    """Reconstruction plus beta-weighted KL; beta defaults to 4 to encourage
    disentangled display axes."""
    if recon < 0 or kl < 0:
        raise ValueError("loss terms must be nonnegative")
    return recon + beta * kl


def gaussian_kl_to_standard(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dimensions."""
    return float(0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar))
