"""Representation alignment numerics: exact empirical squared 2-Wasserstein
distance, first canonical correlation with ridge stabilization, the combined
representation loss, and HSIC with RBF kernels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .neural import GRUCell, Linear, MLP

LATENT_DIM = 32
CCA_RIDGE = 1e-4


@dataclass
class LatentBatch:
    z_h: np.ndarray       # (n, d) human latents
    z_a: np.ndarray       # (n, d) AI latents
    mapped: np.ndarray    # (n, d) mapper output T(z_h)


@dataclass(frozen=True)
class RepLossParts:
    w2_sq: float
    cca_rho: float

    @property
    def total(self) -> float:
        return self.w2_sq + (1.0 - self.cca_rho)


def wasserstein2_sq(A: np.ndarray, B: np.ndarray,
                    return_assignment: bool = False):
    """Exact squared W2 between two equal-size empirical measures: optimal
    assignment on the squared-distance cost matrix, mean matched cost."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] == 0:
        raise ValueError("empty batch")
    if A.shape != B.shape:
        raise ValueError("batches must have identical shape")
    diff = A[:, None, :] - B[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    value = float(cost[rows, cols].mean())
    if return_assignment:
        return value, cols[np.argsort(rows)]
    return value


def wasserstein2_sq_grad(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """d W2^2 / d A with the optimal matching held fixed (envelope theorem)."""
    _, assignment = wasserstein2_sq(A, B, return_assignment=True)
    n = A.shape[0]
    return 2.0 * (A - B[assignment]) / n


def cca_corr(X: np.ndarray, Y: np.ndarray, ridge: float = CCA_RIDGE) -> float:
    """First canonical correlation of centered X, Y with ridge on both
    covariance blocks. Degenerate inputs stay finite (never NaN)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    Cxx = Xc.T @ Xc / max(n - 1, 1) + ridge * np.eye(X.shape[1])
    Cyy = Yc.T @ Yc / max(n - 1, 1) + ridge * np.eye(Y.shape[1])
    Cxy = Xc.T @ Yc / max(n - 1, 1)
    # whiten both blocks, take the top singular value of the cross block
    ex, Ux = np.linalg.eigh(Cxx)
    ey, Uy = np.linalg.eigh(Cyy)
    Wx = Ux @ np.diag(1.0 / np.sqrt(np.clip(ex, 1e-12, None))) @ Ux.T
    Wy = Uy @ np.diag(1.0 / np.sqrt(np.clip(ey, 1e-12, None))) @ Uy.T
    M = Wx @ Cxy @ Wy
    s = np.linalg.svd(M, compute_uv=False)
    return float(np.clip(s[0], 0.0, 1.0))


def rep_loss(batch: LatentBatch, rep_target: str = "mapped_self") -> RepLossParts:
    """W2^2 between human latents and their mapped image (or the AI latents,
    per config), plus the CCA mismatch term."""
    target = batch.z_h if rep_target == "mapped_self" else batch.z_a
    w2 = wasserstein2_sq(target, batch.mapped)
    rho = cca_corr(batch.z_h, batch.z_a)
    return RepLossParts(w2_sq=w2, cca_rho=rho)


def rep_loss_mapped_grad(batch: LatentBatch,
                         rep_target: str = "mapped_self") -> np.ndarray:
    """Gradient of the W2^2 term w.r.t. the mapped latents."""
    target = batch.z_h if rep_target == "mapped_self" else batch.z_a
    return wasserstein2_sq_grad(batch.mapped, target)


def median_bandwidth(X: np.ndarray) -> float:
    diff = X[:, None, :] - X[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    upper = d2[np.triu_indices_from(d2, k=1)]
    med = np.median(upper[upper > 0]) if np.any(upper > 0) else 1.0
    return float(np.sqrt(med / 2.0)) or 1.0


def _rbf_kernel(X: np.ndarray, bandwidth: float) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def hsic_rbf(X: np.ndarray, Y: np.ndarray,
             bandwidth_x: Optional[float] = None,
             bandwidth_y: Optional[float] = None) -> float:
    """HSIC = trace(Kc Lc) / (n-1)^2 with RBF kernels and double centering."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.ndim == 2 and X.shape[1] != Y.shape[1] and X.shape[0] != Y.shape[0]:
        raise ValueError("sample counts must match")
    n = X.shape[0]
    if n < 4:
        raise ValueError("HSIC needs at least 4 samples")
    bx = median_bandwidth(X) if bandwidth_x is None else bandwidth_x
    by = median_bandwidth(Y) if bandwidth_y is None else bandwidth_y
    K = _rbf_kernel(X, bx)
    L = _rbf_kernel(Y, by)
    H = np.eye(n) - np.ones((n, n)) / n
    Kc = H @ K @ H
    Lc = H @ L @ H
    return float(np.trace(Kc @ Lc) / (n - 1) ** 2)


def hsic_permutation_pvalue(X: np.ndarray, Y: np.ndarray, n_perm: int,
                            rng: np.random.Generator) -> float:
    """One-sided permutation test p-value for dependence."""
    stat = hsic_rbf(X, Y)
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(Y))
        if hsic_rbf(X, Y[perm]) >= stat:
            count += 1
    return (count + 1) / (n_perm + 1)


# -- latent encoders ----------------------------------------------------------

@dataclass
class LatentEncoders:
    """Human-side recurrent encoder and AI-side feed-forward encoder producing
    paired per-step latents, plus the representation mapper."""
    human_cell: GRUCell
    ai_mlp: MLP
    mapper: Linear | MLP

    @classmethod
    def create(cls, rng: np.random.Generator, human_in: int, ai_in: int,
               d: int = LATENT_DIM, mapper_type: str = "linear",
               mapper_width: int = 64) -> "LatentEncoders":
        if mapper_type == "linear":
            mapper = Linear(d, d, rng)
        else:
            mapper = MLP([d, mapper_width, d], rng)
        return cls(human_cell=GRUCell(human_in, d, rng),
                   ai_mlp=MLP([ai_in, d, d], rng), mapper=mapper)

    def modules(self) -> dict:
        return {"human_cell": self.human_cell, "ai_mlp": self.ai_mlp,
                "mapper": self.mapper}

    def encode_step(self, human_x: np.ndarray, human_hidden: np.ndarray,
                    ai_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z_h, _ = self.human_cell.forward(human_x, human_hidden)
        z_a, _ = self.ai_mlp.forward(ai_x)
        return z_h, z_a

    def map_latents(self, z_h: np.ndarray):
        return self.mapper.forward(z_h)
