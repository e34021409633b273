"""Data-dependent constraint pools and active-set selection.

A pool couples a set of unlabeled samples with a head that maps the model
output for one sample to a vector of constraint residuals, each tagged as
an equality or an inequality (``C <= 0`` convention).  Each training
iteration picks an active subset of samples, either uniformly or by mining
the worst violators, optionally drops satisfied inequalities, and stacks
the remaining (sample, constraint) pairs into one differentiable function
of the flat parameters for the saddle-point machinery.

Stacking order is always sample-major, constraint-minor, so multiplier
indices are reproducible across runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .linops import Vector

EQUALITY = "eq"
INEQUALITY = "ineq"

# 17-joint skeleton used by the pose constraint family
JOINT_NAMES = (
    "pelvis", "spine", "chest", "neck", "head",
    "left shoulder", "left elbow", "left hand",
    "right shoulder", "right elbow", "right hand",
    "left hip", "left knee", "left heel",
    "right hip", "right knee", "right heel",
)

# six mirrored-length constraints: each row names the two joint pairs whose
# distances must match (arms, forearms, legs, calves, chest-to-shoulders,
# pelvis-to-hips)
SYMMETRY_ROWS = (
    ("left shoulder", "left elbow", "right shoulder", "right elbow"),
    ("left elbow", "left hand", "right elbow", "right hand"),
    ("left hip", "left knee", "right hip", "right knee"),
    ("left knee", "left heel", "right knee", "right heel"),
    ("chest", "left shoulder", "chest", "right shoulder"),
    ("pelvis", "left hip", "pelvis", "right hip"),
)


@dataclass(frozen=True)
class JointIndexTable:
    """The 6x4 joint(j, m) index table behind the symmetry constraints."""

    rows: tuple

    @classmethod
    def default(cls) -> "JointIndexTable":
        name_to_idx = {n: i for i, n in enumerate(JOINT_NAMES)}
        return cls(tuple(tuple(name_to_idx[n] for n in row) for row in SYMMETRY_ROWS))

    def __post_init__(self):
        if len(self.rows) != 6 or any(len(r) != 4 for r in self.rows):
            raise ValueError("joint table must be 6 rows of 4 indices")
        if any(i < 0 or i >= len(JOINT_NAMES) for r in self.rows for i in r):
            raise ValueError("joint index out of range")


def symmetry_residuals(pose: Vector, table: JointIndexTable | None = None) -> Vector:
    """Six signed length differences for one 17x3 pose (flat, length 51)."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (51,):
        raise ValueError(f"pose must have 51 coordinates, got shape {pose.shape}")
    table = table or JointIndexTable.default()
    y = pose.reshape(17, 3)
    out = np.empty(6)
    for j, (a, b, c, d) in enumerate(table.rows):
        out[j] = np.linalg.norm(y[a] - y[b]) - np.linalg.norm(y[c] - y[d])
    return out


def hypersphere_residuals(w: Vector, centers, radius: float) -> Vector:
    """Residual i = ||w - c_i|| - radius."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    w = np.asarray(w, dtype=np.float64)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[1] != w.shape[0]:
        raise ValueError(f"center dim {centers.shape[1]} != w dim {w.shape[0]}")
    return np.linalg.norm(w[None, :] - centers, axis=1) - radius


# ---------------------------------------------------------------------------
# Constraint heads: batched residuals of the model output with exact
# forward/adjoint directional products.
# ---------------------------------------------------------------------------


class SymmetryHead:
    """Maps a batch of flat poses (n, 51) to the six symmetry residuals."""

    n_constraints = 6
    in_dim = 51

    def __init__(self, table: JointIndexTable | None = None):
        self.table = table or JointIndexTable.default()
        rows = np.asarray(self.table.rows)
        self._a, self._b, self._c, self._d = rows.T

    def _units(self, Y):
        y = Y.reshape(-1, 17, 3)
        d1 = y[:, self._a] - y[:, self._b]          # (n, 6, 3)
        d2 = y[:, self._c] - y[:, self._d]
        n1 = np.linalg.norm(d1, axis=2)
        n2 = np.linalg.norm(d2, axis=2)
        u1 = d1 / np.maximum(n1, 1e-30)[:, :, None]
        u2 = d2 / np.maximum(n2, 1e-30)[:, :, None]
        return n1, n2, u1, u2

    def value(self, Y):
        n1, n2, _, _ = self._units(Y)
        return n1 - n2

    def jvp(self, Y, dY):
        _, _, u1, u2 = self._units(Y)
        dy = np.asarray(dY).reshape(-1, 17, 3)
        t1 = np.sum(u1 * (dy[:, self._a] - dy[:, self._b]), axis=2)
        t2 = np.sum(u2 * (dy[:, self._c] - dy[:, self._d]), axis=2)
        return t1 - t2

    def vjp(self, Y, U):
        _, _, u1, u2 = self._units(Y)
        n = u1.shape[0]
        out = np.zeros((n, 17, 3))
        contrib1 = U[:, :, None] * u1                # (n, 6, 3)
        contrib2 = U[:, :, None] * u2
        for j in range(6):
            out[:, self._a[j]] += contrib1[:, j]
            out[:, self._b[j]] -= contrib1[:, j]
            out[:, self._c[j]] -= contrib2[:, j]
            out[:, self._d[j]] += contrib2[:, j]
        return out.reshape(n, 51)


class SphereRadiusHead:
    """Single residual ||y|| - radius per sample (y = offset from a center)."""

    n_constraints = 1

    def __init__(self, radius: float):
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")
        self.radius = radius

    def _norms(self, Y):
        return np.maximum(np.linalg.norm(Y, axis=1), 1e-30)

    def value(self, Y):
        return (self._norms(Y) - self.radius)[:, None]

    def jvp(self, Y, dY):
        return (np.einsum("nd,nd->n", Y, dY) / self._norms(Y))[:, None]

    def vjp(self, Y, U):
        return (U[:, 0] / self._norms(Y))[:, None] * Y


class BoundHead:
    """Residuals y_i - cap_i per tracked output coordinate; meant to be
    tagged as inequalities (violated when the coordinate exceeds its cap)."""

    def __init__(self, coords: Sequence[int], caps: Sequence[float]):
        self.coords = np.asarray(coords, dtype=int)
        self.caps = np.asarray(caps, dtype=np.float64)
        self.n_constraints = len(self.coords)

    def value(self, Y):
        return Y[:, self.coords] - self.caps

    def jvp(self, Y, dY):
        return np.asarray(dY)[:, self.coords]

    def vjp(self, Y, U):
        out = np.zeros_like(Y)
        out[:, self.coords] = U
        return out


# ---------------------------------------------------------------------------
# Pools and active sets
# ---------------------------------------------------------------------------


@dataclass
class ConstraintPool:
    """Unlabeled samples plus a tagged constraint head."""

    samples: np.ndarray
    head: object
    kinds: tuple

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        self.kinds = tuple(self.kinds)
        if self.samples.shape[0] < 1:
            raise ValueError("pool needs at least one sample")
        if len(self.kinds) != self.head.n_constraints:
            raise ValueError("one kind tag per constraint required")
        if any(k not in (EQUALITY, INEQUALITY) for k in self.kinds):
            raise ValueError(f"kinds must be {EQUALITY!r} or {INEQUALITY!r}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.head.n_constraints


@dataclass(frozen=True)
class ActiveSet:
    """Explicit (sample, constraint) pairs, sample-major."""

    sample_indices: np.ndarray
    constraint_indices: np.ndarray
    max_samples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sample_indices",
                           np.asarray(self.sample_indices, dtype=np.intp))
        object.__setattr__(self, "constraint_indices",
                           np.asarray(self.constraint_indices, dtype=np.intp))
        if self.sample_indices.shape != self.constraint_indices.shape:
            raise ValueError("index arrays must have matching length")
        if self.max_samples is not None and self.n_active_samples > self.max_samples:
            raise ValueError("active set exceeds its sample bound")

    @property
    def n_pairs(self) -> int:
        return self.sample_indices.shape[0]

    @property
    def n_active_samples(self) -> int:
        return np.unique(self.sample_indices).shape[0]

    @classmethod
    def cross(cls, sample_idx, n_constraints: int, max_samples: int | None = None):
        """All constraints for each listed sample, sample-major."""
        sample_idx = np.sort(np.asarray(sample_idx, dtype=np.intp))
        ks = np.repeat(sample_idx, n_constraints)
        js = np.tile(np.arange(n_constraints, dtype=np.intp), len(sample_idx))
        return cls(ks, js, max_samples)

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.sample_indices.astype("<i8").tobytes())
        h.update(self.constraint_indices.astype("<i8").tobytes())
        return h.hexdigest()[:12]


def _check_active(pool: ConstraintPool, active: ActiveSet) -> None:
    if active.n_pairs == 0:
        return
    if active.sample_indices.min() < 0 or active.sample_indices.max() >= pool.n_samples:
        raise IndexError("active sample index out of range")
    if active.constraint_indices.min() < 0 or active.constraint_indices.max() >= pool.n_constraints:
        raise IndexError("active constraint index out of range")


def violation_matrix(pool: ConstraintPool, model, w: Vector) -> np.ndarray:
    """All residuals C_jk as an (n_samples, n_constraints) matrix."""
    return np.atleast_2d(pool.head.value(model.forward(w, pool.samples)))


def evaluate(pool: ConstraintPool, model, w: Vector, active: ActiveSet) -> Vector:
    """Stacked residuals over the active pairs, sample-major order."""
    _check_active(pool, active)
    if active.n_pairs == 0:
        return np.zeros(0)
    uniq, rows = np.unique(active.sample_indices, return_inverse=True)
    vals = np.atleast_2d(pool.head.value(model.forward(w, pool.samples[uniq])))
    return vals[rows, active.constraint_indices]


def select_random(pool: ConstraintPool, batch: int, rng_seed) -> ActiveSet:
    """Uniform sample-without-replacement of ``batch`` pool samples."""
    if not 1 <= batch <= pool.n_samples:
        raise ValueError(f"batch must be in [1, {pool.n_samples}], got {batch}")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(pool.n_samples, size=batch, replace=False)
    return ActiveSet.cross(idx, pool.n_constraints, max_samples=batch)


def per_sample_median_violation(pool: ConstraintPool, model, w: Vector) -> Vector:
    return np.median(np.abs(violation_matrix(pool, model, w)), axis=1)


def select_mined(pool: ConstraintPool, model, w: Vector, n_keep: int) -> ActiveSet:
    """The n_keep samples with the largest median absolute residual.

    The mined objective sums per-sample medians over the chosen subset, so
    it is separable across samples and the greedy top-n_keep selection is
    exact.  Ties break toward the lower sample index.
    """
    if not 1 <= n_keep <= pool.n_samples:
        raise ValueError(f"n_keep must be in [1, {pool.n_samples}], got {n_keep}")
    med = per_sample_median_violation(pool, model, w)
    order = np.argsort(-med, kind="stable")[:n_keep]
    return ActiveSet.cross(order, pool.n_constraints, max_samples=n_keep)


def filter_inequalities(pool: ConstraintPool, model, w: Vector, active: ActiveSet) -> ActiveSet:
    """Drop satisfied inequality pairs; violated ones stay as equalities."""
    _check_active(pool, active)
    if active.n_pairs == 0:
        return active
    kinds = np.asarray(pool.kinds)
    is_ineq = kinds[active.constraint_indices] == INEQUALITY
    if not is_ineq.any():
        return active
    vals = evaluate(pool, model, w, active)
    keep = ~(is_ineq & (vals <= 0.0))
    return ActiveSet(active.sample_indices[keep], active.constraint_indices[keep],
                     active.max_samples)


class StackedConstraints(ad.DiffFunction):
    """Active residuals as one differentiable function of the parameters."""

    def __init__(self, pool: ConstraintPool, model, active: ActiveSet):
        _check_active(pool, active)
        self.pool = pool
        self.model = model
        self.active = active
        self._uniq, self._rows = np.unique(active.sample_indices, return_inverse=True)
        self.X = pool.samples[self._uniq]
        self._cols = active.constraint_indices
        self.n_params = model.n_params
        self.n_outputs = active.n_pairs
        self.structure = (f"constraints[{active.n_pairs} pairs / "
                          f"{len(self._uniq)} samples]")
        self._tape_w = None

    def _y_and_tape(self, w):
        # one cached tape per parameter vector: saddle-point matvecs call
        # rop/lop many times at the same w
        if self._tape_w is None or not np.array_equal(self._tape_w, w):
            self._tape = self.model.tape(w, self.X)
            self._tape_w = w.copy()
        tape = self._tape
        y = tape.out if tape is not None else self.model.forward(w, self.X)
        return y, tape

    def value(self, w):
        y, _ = self._y_and_tape(w)
        return np.atleast_2d(self.pool.head.value(y))[self._rows, self._cols]

    def rop(self, w, v):
        y, tape = self._y_and_tape(w)
        dY = self.model.jvp(w, self.X, v, tape)
        return np.atleast_2d(self.pool.head.jvp(y, dY))[self._rows, self._cols]

    def lop(self, w, u):
        y, tape = self._y_and_tape(w)
        U = np.zeros((len(self._uniq), self.pool.n_constraints))
        np.add.at(U, (self._rows, self._cols), u)
        dY = self.pool.head.vjp(y, U)
        return self.model.vjp(w, self.X, dY, tape)


def active_constraint_function(pool: ConstraintPool, model, active: ActiveSet) -> StackedConstraints:
    return StackedConstraints(pool, model, active)


def load_samples_csv(path) -> np.ndarray:
    """Pool samples from a CSV of one sample row per line."""
    data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if data.size == 0:
        raise ValueError(f"no samples in {path}")
    return data
