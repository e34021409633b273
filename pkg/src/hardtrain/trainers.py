"""Outer optimization loops over soft penalties and hard constraint steps.

Five methods: plain SGD and Adam on the penalized objective (soft), and the
saddle-point step in its plain, Gauss-Newton and Adam-scaled variants
(hard).  A problem object supplies the model, the constraint pool and
factories for batch risk / residual functions; soft and hard runs that
share a seed consume identical data and constraint batch streams, so the
two regimes can be compared pairwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import constraints as cs
from . import kkt
from .krylov import SolverConfig
from .linops import Vector

SOFT_SGD = "soft_sgd"
SOFT_ADAM = "soft_adam"
HARD_SGD = "hard_sgd"
HARD_GN = "hard_gn"
HARD_ADAM = "hard_adam"
METHODS = (SOFT_SGD, SOFT_ADAM, HARD_SGD, HARD_GN, HARD_ADAM)

_HARD_VARIANT = {HARD_SGD: kkt.SGD, HARD_GN: kkt.GAUSS_NEWTON, HARD_ADAM: kkt.ADAM}


class TrainingDiverged(RuntimeError):
    """A metric went non-finite; carries the last finite parameters."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class AdamState:
    """First/second moment estimates with their update counter."""

    m: Vector
    v: Vector
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_update(state: AdamState, grad: Vector, lr: float):
    """One moment update; returns the new state and the parameter step.

    The step is -lr * f * m / (sqrt(v) + eps) with the shared bias
    correction f = sqrt(1 - beta2^t) / (1 - beta1^t) at the new counter.
    """
    grad = np.asarray(grad, dtype=np.float64)
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    t = state.t + 1
    f = math.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    dw = -lr * f * m / (np.sqrt(v) + state.eps)
    return replace(state, m=m, v=v, t=t), dw


@dataclass
class SoftWeights:
    """Penalty weight per constraint definition."""

    lambdas: np.ndarray

    def __post_init__(self):
        self.lambdas = np.atleast_1d(np.asarray(self.lambdas, dtype=np.float64))
        if (self.lambdas < 0).any():
            raise ValueError("penalty weights must be non-negative")

    @classmethod
    def uniform(cls, n_constraints: int, value: float) -> "SoftWeights":
        return cls(np.full(n_constraints, float(value)))


@dataclass
class TrainConfig:
    method: str
    lr: float = 1e-3
    soft_lambda: float = 1.0
    epochs: int = 1
    iterations: int | None = None   # direct count; required for data-free problems
    batch_data: int = 128
    batch_constraints: int = 128
    mine: bool = False
    n_mined: int = 16
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(rtol=1e-8))
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; pick one of {METHODS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.soft_lambda < 0:
            raise ValueError("soft_lambda must be non-negative")


@dataclass
class IterationRow:
    iteration: int
    risk: float
    pred_error: float
    median_violation: float
    active_delta: float
    solver_iters: int
    solver_status: str
    step_norm: float
    active_fingerprint: str

    def finite(self) -> bool:
        return all(math.isfinite(x) for x in
                   (self.risk, self.pred_error, self.median_violation,
                    self.active_delta, self.step_norm))


@dataclass
class TrainReport:
    method: str
    seed: int
    initial_row: IterationRow
    rows: list
    final_params: Vector
    best_params: Vector
    best_val_error: float

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


# ---------------------------------------------------------------------------
# Objectives and single steps
# ---------------------------------------------------------------------------


def soft_objective(w: Vector, problem, data_idx, active: cs.ActiveSet,
                   weights: SoftWeights) -> float:
    """Batch risk plus weighted squared residuals over the active pairs."""
    risk = float(ad.value(problem.risk_function(data_idx), w)[0])
    if active.n_pairs == 0:
        return risk
    cvals = cs.evaluate(problem.pool, problem.model, w, active)
    lam = weights.lambdas[active.constraint_indices]
    return risk + float(lam @ (cvals * cvals))


def soft_gradient(w: Vector, problem, data_idx, active: cs.ActiveSet,
                  weights: SoftWeights) -> Vector:
    g = ad.gradient(problem.risk_function(data_idx), w)
    if active.n_pairs == 0:
        return g
    fn = cs.active_constraint_function(problem.pool, problem.model, active)
    cvals = ad.value(fn, w)
    lam = weights.lambdas[active.constraint_indices]
    return g + ad.lop(fn, w, 2.0 * lam * cvals)


def step_soft(method: str, w: Vector, problem, data_idx, active: cs.ActiveSet,
              cfg: TrainConfig, weights: SoftWeights,
              adam: AdamState | None = None):
    """One penalized-objective step; returns (w', adam')."""
    g = soft_gradient(w, problem, data_idx, active, weights)
    if method == SOFT_SGD:
        return w - cfg.lr * g, adam
    adam, dw = adam_update(adam, g, cfg.lr)
    return w + dw, adam


@dataclass
class HardStep:
    w: Vector
    adam: AdamState | None
    multipliers: Vector
    solver_iters: int
    solver_status: str
    before_median: float
    after_median: float
    skipped: bool


def step_hard(method: str, w: Vector, problem, data_idx, active: cs.ActiveSet,
              cfg: TrainConfig, adam: AdamState | None = None) -> HardStep:
    """One saddle-point step; records active medians before and after."""
    variant = _HARD_VARIANT[method]
    if active.n_pairs > 0:
        fn = cs.active_constraint_function(problem.pool, problem.model, active)
        cvals = ad.value(fn, w)
        before = float(np.median(np.abs(cvals)))
    else:
        fn, cvals, before = None, np.zeros(0), 0.0

    kwargs = dict(w=w, damping=1.0 / cfg.lr, variant=variant,
                  constraint_fn=fn, constraint_values=cvals)
    if variant == kkt.SGD:
        kwargs["risk_grad"] = ad.gradient(problem.risk_function(data_idx), w)
    elif variant == kkt.GAUSS_NEWTON:
        kwargs["residual_fn"] = problem.residual_function(data_idx)
    else:
        g = ad.gradient(problem.risk_function(data_idx), w)
        adam, _ = adam_update(adam, g, cfg.lr)
        kwargs.update(adam_m=adam.m, adam_v=adam.v, adam_t=adam.t - 1,
                      adam_beta1=adam.beta1, adam_beta2=adam.beta2,
                      adam_eps=adam.eps)

    step, _ = kkt.solve_step_with_retry(kkt.KktState(**kwargs), cfg.solver)
    if step is None:
        return HardStep(w, adam, np.zeros(active.n_pairs), 0, "skipped",
                        before, before, True)
    w_new = w + step.dw
    after = before
    if fn is not None:
        after = float(np.median(np.abs(
            cs.evaluate(problem.pool, problem.model, w_new, active))))
    return HardStep(w_new, adam, step.multipliers, step.solution.iters,
                    step.solution.status, before, after, False)


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------


def _pool_median_violation(problem, w: Vector) -> float:
    custom = getattr(problem, "pool_median_violation", None)
    if custom is not None:
        return float(custom(w))
    return float(np.median(np.abs(
        cs.violation_matrix(problem.pool, problem.model, w))))


def _select(problem, w, cfg: TrainConfig, cseed) -> cs.ActiveSet:
    if cfg.mine:
        active = cs.select_mined(problem.pool, problem.model, w, cfg.n_mined)
    else:
        batch = min(cfg.batch_constraints, problem.pool.n_samples)
        active = cs.select_random(problem.pool, batch, cseed)
    return cs.filter_inequalities(problem.pool, problem.model, w, active)


def train(cfg: TrainConfig, problem, w0: Vector | None = None) -> TrainReport:
    """Run the configured method; deterministic for a fixed seed.

    The seed splits into an init stream and a batch stream; the batch
    stream is consumed identically by every method (one data batch and one
    constraint-selection seed per iteration), so paired soft/hard runs see
    the same batches.  ``w0`` overrides the problem's own initialization,
    e.g. to fine-tune a constrained run from an unconstrained checkpoint.
    """
    n_train = getattr(problem, "n_train", 0)
    if cfg.iterations is None and n_train == 0:
        raise ValueError("data-free problems need cfg.iterations")
    init_ss, batch_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_batch = np.random.default_rng(batch_ss)
    w = problem.initial_params(np.random.default_rng(init_ss)) if w0 is None else w0.copy()
    adam = AdamState.zeros(len(w)) if cfg.method in (SOFT_ADAM, HARD_ADAM) else None
    weights = SoftWeights.uniform(problem.pool.n_constraints, cfg.soft_lambda)

    def schedule():
        if cfg.iterations is not None:
            for _ in range(cfg.iterations):
                yield None
            return
        batch = min(cfg.batch_data, n_train)
        for _ in range(cfg.epochs):
            perm = rng_batch.permutation(n_train)
            for lo in range(0, n_train - batch + 1, batch):
                yield perm[lo:lo + batch]

    val0 = float(problem.prediction_error(w))
    initial_row = IterationRow(0, float(ad.value(problem.risk_function(None), w)[0]),
                               val0, _pool_median_violation(problem, w),
                               0.0, 0, "init", 0.0, "-")
    rows: list = []
    best_w, best_val = w.copy(), val0
    report = lambda: TrainReport(cfg.method, cfg.seed, initial_row, rows,
                                 w, best_w, best_val)

    it = 0
    for data_idx in schedule():
        it += 1
        w_prev = w
        cseed = int(rng_batch.integers(2 ** 63))  # drawn even when mining ignores it
        active = _select(problem, w, cfg, cseed)

        if cfg.method in (SOFT_SGD, SOFT_ADAM):
            before = float(np.median(np.abs(cs.evaluate(
                problem.pool, problem.model, w, active)))) if active.n_pairs else 0.0
            w_new, adam = step_soft(cfg.method, w, problem, data_idx, active, cfg,
                                    weights, adam)
            after = float(np.median(np.abs(cs.evaluate(
                problem.pool, problem.model, w_new, active)))) if active.n_pairs else 0.0
            solver_iters, solver_status = 0, "-"
            multipliers_ok = True
        else:
            hstep = step_hard(cfg.method, w, problem, data_idx, active, cfg, adam)
            w_new, adam = hstep.w, hstep.adam
            before, after = hstep.before_median, hstep.after_median
            solver_iters, solver_status = hstep.solver_iters, hstep.solver_status
            multipliers_ok = np.all(np.isfinite(hstep.multipliers))

        if not multipliers_ok or not np.all(np.isfinite(w_new)):
            raise TrainingDiverged(f"non-finite step at iteration {it}", report())
        step_norm = float(np.linalg.norm(w_new - w))
        w = w_new
        val = float(problem.prediction_error(w))
        row = IterationRow(it, float(ad.value(problem.risk_function(data_idx), w)[0]),
                           val, _pool_median_violation(problem, w),
                           after - before, solver_iters, solver_status,
                           step_norm, active.fingerprint())
        if not row.finite():
            w = w_prev  # keep the last finite parameters as the checkpoint
            raise TrainingDiverged(f"non-finite metrics at iteration {it}", report())
        rows.append(row)
        if val < best_val:
            best_val, best_w = val, w.copy()
    return report()
