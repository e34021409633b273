"""Differentiation over flat parameter vectors.

Provides exactly the three directional products the saddle-point matvecs
need -- gradient, Jacobian-times-vector (``rop``) and vector-times-Jacobian
(``lop``) -- for functions built from affine layers, ReLUs and a few fixed
heads.  ``rop`` propagates (value, tangent) pairs forward; ``lop`` and
``gradient`` run a reverse sweep over activations taped during the forward
pass.  Parameters always live in a single flat float64 vector; each model
keeps a layout registry mapping layers to slices of it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linops import Vector, as_vector, check_length

# ---------------------------------------------------------------------------
# Batched parametric models: y_k = f(x_k; w) for a fixed batch of inputs.
# ---------------------------------------------------------------------------


@dataclass
class MlpTape:
    """Activations and ReLU masks recorded by one forward pass."""

    acts: list        # acts[l]: input to layer l, shape (n, width_l)
    masks: list       # masks[l]: ReLU mask after layer l (hidden layers only)
    out: np.ndarray   # final output, shape (n, out_dim)


class Mlp:
    """Fully-connected ReLU network over a flat parameter vector.

    ``widths = (d_in, h_1, ..., d_out)``; ReLU sits between affine layers,
    the last layer is linear.  Layer l holds a weight block of shape
    (widths[l+1], widths[l]) followed by its bias, so the parameter count
    is sum over layers of (in+1)*out.
    """

    def __init__(self, widths: Sequence[int]):
        widths = tuple(int(x) for x in widths)
        if len(widths) < 2 or any(x < 1 for x in widths):
            raise ValueError(f"need at least two positive widths, got {widths}")
        self.widths = widths
        self.in_dim = widths[0]
        self.out_dim = widths[-1]
        # layout registry: per layer (weight slice, weight shape, bias slice)
        self.layout = []
        off = 0
        for din, dout in zip(widths[:-1], widths[1:]):
            w_sl = slice(off, off + din * dout)
            off += din * dout
            b_sl = slice(off, off + dout)
            off += dout
            self.layout.append((w_sl, (dout, din), b_sl))
        self.n_params = off

    @property
    def n_layers(self) -> int:
        return len(self.layout)

    def layout_hash(self) -> int:
        return zlib.crc32(("mlp:" + ",".join(map(str, self.widths))).encode())

    def unpack(self, w: Vector):
        """Views of the per-layer (W, b) blocks; no copies."""
        check_length(w, self.n_params, "params")
        return [(w[w_sl].reshape(shape), w[b_sl]) for w_sl, shape, b_sl in self.layout]

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> Vector:
        """He-style initialization; biases start at zero."""
        w = np.zeros(self.n_params)
        for (w_sl, shape, _), width in zip(self.layout, self.widths[:-1]):
            w[w_sl] = rng.standard_normal(shape[0] * shape[1]) * scale * np.sqrt(2.0 / width)
        return w

    def forward(self, w: Vector, X: np.ndarray) -> np.ndarray:
        return self.tape(w, X).out

    def tape(self, w: Vector, X: np.ndarray) -> MlpTape:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input width {X.shape[1]} != {self.in_dim}")
        layers = self.unpack(w)
        acts, masks = [X], []
        a = X
        for l, (W, b) in enumerate(layers):
            z = a @ W.T + b
            if l < self.n_layers - 1:
                mask = z > 0.0          # subgradient 0 at the ReLU kink
                a = z * mask
                masks.append(mask)
                acts.append(a)
            else:
                a = z
        return MlpTape(acts, masks, a)

    def jvp(self, w: Vector, X: np.ndarray, v: Vector, tape: MlpTape | None = None) -> np.ndarray:
        """Directional derivative of the batched output along parameter tangent v."""
        tape = tape or self.tape(w, X)
        check_length(v, self.n_params, "tangent")
        da = np.zeros_like(tape.acts[0])  # inputs are fixed data
        layers = self.unpack(w)
        tangents = self.unpack(v)
        for l, ((W, _), (dW, db)) in enumerate(zip(layers, tangents)):
            dz = da @ W.T + tape.acts[l] @ dW.T + db
            da = dz * tape.masks[l] if l < self.n_layers - 1 else dz
        return da

    def vjp(self, w: Vector, X: np.ndarray, U: np.ndarray, tape: MlpTape | None = None) -> Vector:
        """Adjoint product: flat parameter gradient of <U, output>."""
        tape = tape or self.tape(w, X)
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        layers = self.unpack(w)
        grad = np.zeros(self.n_params)
        g = U
        for l in range(self.n_layers - 1, -1, -1):
            w_sl, shape, b_sl = self.layout[l]
            grad[w_sl] = (g.T @ tape.acts[l]).ravel()
            grad[b_sl] = g.sum(axis=0)
            if l > 0:
                g = (g @ layers[l][0]) * tape.masks[l - 1]
        return grad


class IdentityOffset:
    """Trivial model y_k = w - x_k: the decision vector shifted by each sample.

    Lets parameter-space constraint families reuse the data-dependent
    machinery: the sample is the offset, the head sees w - x_k.
    """

    def __init__(self, dim: int):
        self.n_params = dim
        self.in_dim = dim
        self.out_dim = dim

    def forward(self, w: Vector, X: np.ndarray) -> np.ndarray:
        return w[None, :] - np.atleast_2d(X)

    def tape(self, w, X):
        return None

    def jvp(self, w: Vector, X: np.ndarray, v: Vector, tape=None) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(v, (n, self.n_params))

    def vjp(self, w: Vector, X: np.ndarray, U: np.ndarray, tape=None) -> Vector:
        return np.atleast_2d(U).sum(axis=0)


# ---------------------------------------------------------------------------
# DiffFunction: a vector-valued map of the flat parameters with exact
# forward and adjoint directional products.
# ---------------------------------------------------------------------------


class DiffFunction:
    """Interface: value(w), rop(w, v) = J v, lop(w, u) = u^T J."""

    n_params: int
    n_outputs: int
    structure: str = ""

    def value(self, w: Vector) -> Vector:
        raise NotImplementedError

    def rop(self, w: Vector, v: Vector) -> Vector:
        raise NotImplementedError

    def lop(self, w: Vector, u: Vector) -> Vector:
        raise NotImplementedError


def value(f: DiffFunction, w: Vector) -> Vector:
    w = as_vector(w, "params")
    check_length(w, f.n_params, "params")
    out = np.atleast_1d(np.asarray(f.value(w), dtype=np.float64))
    check_length(out, f.n_outputs, "output")
    return out


def rop(f: DiffFunction, w: Vector, v: Vector) -> Vector:
    w = as_vector(w, "params")
    v = as_vector(v, "direction")
    check_length(w, f.n_params, "params")
    check_length(v, f.n_params, "direction")
    return np.atleast_1d(np.asarray(f.rop(w, v), dtype=np.float64))


def lop(f: DiffFunction, w: Vector, u: Vector) -> Vector:
    w = as_vector(w, "params")
    u = as_vector(u, "adjoint")
    check_length(w, f.n_params, "params")
    check_length(u, f.n_outputs, "adjoint")
    return np.asarray(f.lop(w, u), dtype=np.float64)


def gradient(f: DiffFunction, w: Vector) -> Vector:
    """Reverse-mode gradient of a scalar function."""
    if f.n_outputs != 1:
        raise ValueError(f"gradient needs a scalar function, got {f.n_outputs} outputs")
    return lop(f, w, np.ones(1))


class _Taped:
    """Mixin caching one model tape per parameter vector.

    Saddle-point matvecs call rop/lop many times at a fixed w; re-taping
    every call would double the work of每 every product.
    """

    def _tape_for(self, w: Vector):
        cached = getattr(self, "_tape_w", None)
        if cached is not None and cached.shape == w.shape and np.array_equal(cached, w):
            return self._tape_cache
        tape = self.model.tape(w, self.X)
        self._tape_w = w.copy()
        self._tape_cache = tape
        return tape


class ModelOutputs(_Taped, DiffFunction):
    """Stacked model outputs over a fixed input batch, flattened sample-major."""

    def __init__(self, model, X):
        self.model = model
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.n_params = model.n_params
        self.n_outputs = self.X.shape[0] * model.out_dim
        self.structure = f"outputs[{self.X.shape[0]}x{model.out_dim}]"

    def value(self, w):
        return self.model.forward(w, self.X).ravel()

    def rop(self, w, v):
        return self.model.jvp(w, self.X, v, self._tape_for(w)).ravel()

    def lop(self, w, u):
        U = u.reshape(self.X.shape[0], self.model.out_dim)
        return self.model.vjp(w, self.X, U, self._tape_for(w))


class SquaredErrorRisk(_Taped, DiffFunction):
    """Mean squared coordinate error over a labeled batch (scalar).

    Equals the average over samples of ||pred - y||^2 / out_dim.
    """

    n_outputs = 1

    def __init__(self, model, X, Y):
        self.model = model
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if self.Y.shape != (self.X.shape[0], model.out_dim):
            raise ValueError(f"label shape {self.Y.shape} does not match batch")
        self.n_params = model.n_params
        self.structure = f"mse[{self.X.shape[0]}]"

    def value(self, w):
        diff = self.model.forward(w, self.X) - self.Y
        return np.array([np.mean(diff * diff)])

    def rop(self, w, v):
        tape = self._tape_for(w)
        diff = self.model.forward(w, self.X) - self.Y
        dpred = self.model.jvp(w, self.X, v, tape)
        return np.array([2.0 * np.sum(diff * dpred) / diff.size])

    def lop(self, w, u):
        tape = self._tape_for(w)
        diff = self.model.forward(w, self.X) - self.Y
        return self.model.vjp(w, self.X, (2.0 / diff.size) * diff, tape) * u[0]


class ScaledResiduals(_Taped, DiffFunction):
    """Flattened prediction residuals scaled so ||r||^2 equals the mean risk."""

    def __init__(self, model, X, Y):
        self.model = model
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        self.n_params = model.n_params
        self.n_outputs = self.Y.size
        self.scale = 1.0 / np.sqrt(self.Y.size)
        self.structure = f"residuals[{self.Y.shape[0]}x{model.out_dim}]"

    def value(self, w):
        return (self.model.forward(w, self.X) - self.Y).ravel() * self.scale

    def rop(self, w, v):
        return self.model.jvp(w, self.X, v, self._tape_for(w)).ravel() * self.scale

    def lop(self, w, u):
        U = u.reshape(self.Y.shape) * self.scale
        return self.model.vjp(w, self.X, U, self._tape_for(w))


class LinearMap(DiffFunction):
    """f(w) = A w (+ optional shift)."""

    def __init__(self, A, shift=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.shift = np.zeros(self.A.shape[0]) if shift is None else as_vector(shift)
        self.n_params = self.A.shape[1]
        self.n_outputs = self.A.shape[0]
        self.structure = f"linear[{self.A.shape[0]}x{self.A.shape[1]}]"

    def value(self, w):
        return self.A @ w + self.shift

    def rop(self, w, v):
        return self.A @ v

    def lop(self, w, u):
        return u @ self.A


class QuadraticDistance(DiffFunction):
    """f(w) = 0.5 ||w - x0||^2 (scalar)."""

    n_outputs = 1

    def __init__(self, x0):
        self.x0 = as_vector(x0, "anchor")
        self.n_params = self.x0.shape[0]
        self.structure = f"quad_dist[{self.n_params}]"

    def value(self, w):
        d = w - self.x0
        return np.array([0.5 * (d @ d)])

    def rop(self, w, v):
        return np.array([(w - self.x0) @ v])

    def lop(self, w, u):
        return u[0] * (w - self.x0)


# ---------------------------------------------------------------------------
# Flat-parameter checkpoints: little-endian float64 payload behind a small
# header of (magic, count, layout hash).
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"HTFLATW1"


def save_params(path, w: Vector, layout_hash: int = 0) -> None:
    w = as_vector(w, "params")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<QQ", w.shape[0], layout_hash & 0xFFFFFFFFFFFFFFFF))
        fh.write(w.astype("<f8").tobytes())


def load_params(path, expect_hash: int | None = None) -> Vector:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a parameter checkpoint: bad magic {magic!r}")
        n, h = struct.unpack("<QQ", fh.read(16))
        if expect_hash is not None and h != (expect_hash & 0xFFFFFFFFFFFFFFFF):
            raise ValueError(f"layout hash mismatch: file has {h:#x}, expected {expect_hash:#x}")
        data = np.frombuffer(fh.read(8 * n), dtype="<f8")
        if data.shape[0] != n:
            raise ValueError("truncated checkpoint")
    return data.astype(np.float64)
