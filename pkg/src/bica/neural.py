"""Minimal differentiable substrate: linear stacks, a gated recurrent cell,
embeddings, softmax heads and Adam.

Every module follows the same contract: a dict of named parameter arrays,
`forward(...) -> (output, cache)` and `backward(cache, dout) -> (grads, *dinputs)`.
Gradients are verified against central finite differences in the test suite.
Inputs may be a single vector or a (batch, dim) matrix.
"""
from __future__ import annotations

import json
import struct
from typing import Callable

import numpy as np
from scipy.special import expit


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=float))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax; strictly positive, sums to 1 along `axis`."""
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient through softmax given output p and upstream dp."""
    dot = np.sum(p * dp, axis=-1, keepdims=True)
    return p * (dp - dot)


def _as2d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                  fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base: named parameter arrays with flatten/unflatten and checkpointing."""

    def __init__(self):
        self.w: dict[str, np.ndarray] = {}

    def param_names(self) -> list[str]:
        return sorted(self.w)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w[k].ravel() for k in self.param_names()]) \
            if self.w else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> None:
        i = 0
        for k in self.param_names():
            n = self.w[k].size
            self.w[k] = flat[i:i + n].reshape(self.w[k].shape).copy()
            i += n
        if i != flat.size:
            raise ValueError("flat vector size mismatch")

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.w.items()}

    def copy(self):
        import copy
        other = copy.deepcopy(self)
        return other


class Linear(Module):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator):
        super().__init__()
        self.nin, self.nout = nin, nout
        self.w = {
            "W": _uniform_init(rng, (nout, nin), nin),
            "b": _uniform_init(rng, (nout,), nin),
        }

    def forward(self, x):
        x2, squeeze = _as2d(x)
        y = x2 @ self.w["W"].T + self.w["b"]
        cache = (x2, squeeze)
        return (y[0] if squeeze else y), cache

    def backward(self, cache, dy):
        x2, squeeze = cache
        dy2, _ = _as2d(dy)
        grads = {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}
        dx = dy2 @ self.w["W"]
        return grads, (dx[0] if squeeze else dx)


class MLP(Module):
    """Feed-forward stack with tanh between layers (linear output)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        super().__init__()
        self.sizes = list(sizes)
        self.n_layers = len(sizes) - 1
        for i in range(self.n_layers):
            self.w[f"W{i}"] = _uniform_init(rng, (sizes[i + 1], sizes[i]), sizes[i])
            self.w[f"b{i}"] = _uniform_init(rng, (sizes[i + 1],), sizes[i])

    def forward(self, x):
        x2, squeeze = _as2d(x)
        acts = [x2]
        h = x2
        for i in range(self.n_layers):
            h = h @ self.w[f"W{i}"].T + self.w[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return (h[0] if squeeze else h), (acts, squeeze)

    def backward(self, cache, dy):
        acts, squeeze = cache
        dy2, _ = _as2d(dy)
        grads = {}
        dh = dy2
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                dh = dh * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] = dh.T @ acts[i]
            grads[f"b{i}"] = dh.sum(axis=0)
            dh = dh @ self.w[f"W{i}"]
        return grads, (dh[0] if squeeze else dh)


class GRUCell(Module):
    """Standard gated recurrence: update/reset gates and tanh candidate."""

    def __init__(self, nin: int, nh: int, rng: np.random.Generator):
        super().__init__()
        self.nin, self.nh = nin, nh
        for gate in ("z", "r", "n"):
            self.w[f"W{gate}"] = _uniform_init(rng, (nh, nin), nin)
            self.w[f"U{gate}"] = _uniform_init(rng, (nh, nh), nh)
            self.w[f"b{gate}"] = _uniform_init(rng, (nh,), nin)

    def forward(self, x, h):
        x2, squeeze = _as2d(x)
        h2, _ = _as2d(h)
        z = sigmoid(x2 @ self.w["Wz"].T + h2 @ self.w["Uz"].T + self.w["bz"])
        r = sigmoid(x2 @ self.w["Wr"].T + h2 @ self.w["Ur"].T + self.w["br"])
        s = h2 @ self.w["Un"].T + self.w["bn"]
        n = np.tanh(x2 @ self.w["Wn"].T + r * s)
        h_new = (1.0 - z) * n + z * h2
        cache = (x2, h2, z, r, s, n, squeeze)
        return (h_new[0] if squeeze else h_new), cache

    def backward(self, cache, dh_new):
        x2, h2, z, r, s, n, squeeze = cache
        d, _ = _as2d(dh_new)
        grads = self.zero_grads()
        dn = d * (1.0 - z)
        dz = d * (h2 - n)
        dh = d * z
        da_n = dn * (1.0 - n ** 2)
        grads["Wn"] = da_n.T @ x2
        dx = da_n @ self.w["Wn"]
        dr = da_n * s
        ds = da_n * r
        grads["Un"] = ds.T @ h2
        grads["bn"] = ds.sum(axis=0)
        dh = dh + ds @ self.w["Un"]
        da_r = dr * r * (1.0 - r)
        grads["Wr"] = da_r.T @ x2
        grads["Ur"] = da_r.T @ h2
        grads["br"] = da_r.sum(axis=0)
        dx += da_r @ self.w["Wr"]
        dh += da_r @ self.w["Ur"]
        da_z = dz * z * (1.0 - z)
        grads["Wz"] = da_z.T @ x2
        grads["Uz"] = da_z.T @ h2
        grads["bz"] = da_z.sum(axis=0)
        dx += da_z @ self.w["Wz"]
        dh += da_z @ self.w["Uz"]
        if squeeze:
            return grads, dx[0], dh[0]
        return grads, dx, dh


class Embedding(Module):
    """Token embeddings; index 0 is the empty-message token and stays zero."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size, self.dim = vocab_size, dim
        E = _uniform_init(rng, (vocab_size + 1, dim), dim)
        E[0] = 0.0
        self.w = {"E": E}

    def forward(self, idx):
        idx = np.asarray(idx, dtype=int)
        if np.any(idx < 0) or np.any(idx > self.vocab_size):
            raise ValueError("token index out of vocabulary")
        return self.w["E"][idx], idx

    def backward(self, cache, dout):
        idx = cache
        grads = self.zero_grads()
        np.add.at(grads["E"], idx, dout)
        grads["E"][0] = 0.0  # empty token pinned to zero
        return grads, None

    def embed_tokens(self, indices: list[int]) -> np.ndarray:
        """Sum of embeddings; empty list maps to the zero vector."""
        if not indices:
            return np.zeros(self.dim)
        out, _ = self.forward(np.asarray(indices))
        return out.sum(axis=0)


class Adam:
    """First-order moment-based optimizer over a dict of parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** self.t)
            vhat = self.v[k] / (1 - self.beta2 ** self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def finite_difference_grad(f: Callable[[np.ndarray], float],
                           x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    g = np.zeros_like(x, dtype=float)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_param_gradients(module: Module, loss_and_grads: Callable[[], tuple[float, dict]],
                          h: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare analytic parameter gradients to central differences.

    `loss_and_grads` evaluates the scalar loss at the module's current
    parameters and returns (loss, grads-dict). Returns the worst relative error.
    """
    _, grads = loss_and_grads()
    worst = 0.0
    for k in module.param_names():
        def f(arr):
            return loss_and_grads()[0]
        num = finite_difference_grad(f, module.w[k], h=h)
        denom = max(np.abs(num).max(), np.abs(grads[k]).max(), 1e-8)
        err = np.abs(num - grads[k]).max() / denom
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient mismatch on {k}: rel err {err:.3e}")
    return worst


# -- checkpointing ------------------------------------------------------------

MAGIC = b"BICA"


def save_checkpoint(path, modules: dict[str, Module]) -> None:
    """Named-shape registry + flat little-endian float64 array."""
    registry = {}
    flats = []
    offset = 0
    for mname in sorted(modules):
        mod = modules[mname]
        for k in mod.param_names():
            arr = mod.w[k]
            registry[f"{mname}.{k}"] = {"offset": offset, "shape": list(arr.shape)}
            flats.append(arr.ravel())
            offset += arr.size
    flat = np.concatenate(flats) if flats else np.zeros(0)
    header = json.dumps({"registry": registry, "total": int(flat.size)}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, modules: dict[str, Module]) -> None:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError("bad checkpoint magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        flat = np.frombuffer(f.read(), dtype="<f8")
    if flat.size != header["total"]:
        raise ValueError("checkpoint payload truncated")
    for mname in sorted(modules):
        mod = modules[mname]
        for k in mod.param_names():
            entry = header["registry"][f"{mname}.{k}"]
            off = entry["offset"]
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            mod.w[k] = flat[off:off + n].reshape(shape).copy()
