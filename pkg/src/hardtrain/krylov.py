"""Krylov solvers for symmetric indefinite systems.

Two solvers over the matvec-only operator abstraction:

* :func:`minres` -- classic minimal-residual iteration (Paige & Saunders).
* :func:`minres_qlp` -- the QLP variant (Choi, Paige & Saunders), which keeps
  working when the operator is singular or severely ill-conditioned and then
  returns the minimum-length least-squares solution.

Both recompute the true residual ``b - Bx`` on exit and classify the result
from that, so ``status == "converged"`` always means the *recomputed*
residual is within ``rtol * ||b||``.  Systems that only converge in the
least-squares sense (singular, inconsistent) come back as
``"singular_min_length"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linops import LinearOperator, apply, as_vector, check_length

CONVERGED = "converged"
MAX_ITERS = "max_iters"
SINGULAR_MIN_LENGTH = "singular_min_length"
BREAKDOWN = "breakdown"

_EPS = np.finfo(np.float64).eps
_REALMIN = np.finfo(np.float64).tiny


@dataclass
class SolverConfig:
    """Tolerances and caps shared by both solvers.

    ``max_iters`` defaults to ``4 * dim`` capped at 2000 when left unset.
    The remaining knobs are the standard MINRES-QLP safeguards: a norm cap
    on the iterate, a condition-estimate cap, and the condition threshold
    at which the update recurrences transfer from MINRES to QLP form.
    """

    rtol: float = 1e-8
    max_iters: int | None = None
    breakdown_tol: float = 1e-14
    maxxnorm: float = 1e12
    acondlim: float = 1e15
    trancond: float = 1e7

    def __post_init__(self) -> None:
        if self.rtol <= 0:
            raise ValueError(f"rtol must be positive, got {self.rtol}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")

    def resolve_max_iters(self, dim: int) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return min(4 * dim, 2000)


@dataclass
class KrylovSolution:
    """Solver output.  ``residual_norm`` is ||b - Bx|| recomputed on exit;
    ``est_residual_norm`` is the solver's final internal estimate, and
    ``residual_estimates`` the per-iteration estimate trace (non-increasing).
    """

    x: np.ndarray
    residual_norm: float
    iters: int
    status: str
    est_residual_norm: float = 0.0
    anorm: float = 0.0
    acond: float = 1.0
    residual_estimates: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def ok(self) -> bool:
        return self.status in (CONVERGED, SINGULAR_MIN_LENGTH)


def _sym_givens(a: float, b: float):
    """Stable symmetric Givens rotation: returns (c, s, r) with r >= 0."""
    if b == 0.0:
        if a == 0.0:
            return 1.0, 0.0, 0.0
        return math.copysign(1.0, a), 0.0, abs(a)
    if a == 0.0:
        return 0.0, math.copysign(1.0, b), abs(b)
    if abs(b) > abs(a):
        t = a / b
        s = math.copysign(1.0, b) / math.sqrt(1.0 + t * t)
        c = s * t
        return c, s, b / s
    t = b / a
    c = math.copysign(1.0, a) / math.sqrt(1.0 + t * t)
    s = c * t
    return c, s, a / c


def _classify(op: LinearOperator, b: np.ndarray, x: np.ndarray, rtol: float,
              anorm: float, ls_flagged: bool, nonfinite: bool,
              iters: int, est_rnorm: float, acond: float,
              history: list) -> KrylovSolution:
    """Final verdict from the independently recomputed residual."""
    if nonfinite or not np.all(np.isfinite(x)):
        return KrylovSolution(x, float("inf"), iters, BREAKDOWN, est_rnorm,
                              anorm, acond, history)
    bnorm = float(np.linalg.norm(b))
    r = b - apply(op, x)
    rnorm = float(np.linalg.norm(r))
    if rnorm <= rtol * bnorm:
        status = CONVERGED
    else:
        arnorm = float(np.linalg.norm(apply(op, r)))
        # least-squares optimality: B r ~ 0 even though r itself is not
        if arnorm <= max(100.0 * rtol, 1e-8) * max(anorm, _REALMIN) * rnorm or ls_flagged:
            status = SINGULAR_MIN_LENGTH
        else:
            status = MAX_ITERS
    return KrylovSolution(x, rnorm, iters, status, est_rnorm, anorm, acond, history)


def minres(op: LinearOperator, b, cfg: SolverConfig | None = None) -> KrylovSolution:
    """Minimal-residual iterate of a symmetric system in span{b, Bb, ...}.

    Converges to B^-1 b on consistent nonsingular systems.  On singular
    systems it still minimizes the residual but does not control the
    null-space component of x; use :func:`minres_qlp` for those.
    """
    cfg = cfg or SolverConfig()
    b = as_vector(b, "rhs")
    check_length(b, op.dim, "rhs")
    n = op.dim
    maxit = cfg.resolve_max_iters(n)

    bnorm = float(np.linalg.norm(b))
    history = [bnorm]
    x = np.zeros(n)
    if bnorm == 0.0:
        return KrylovSolution(x, 0.0, 0, CONVERGED, 0.0, 0.0, 1.0, history)

    # Lanczos seeds
    r1 = b.copy()
    r2 = b.copy()
    y = b.copy()
    beta1 = bnorm
    oldb, beta = 0.0, beta1
    dbar, epsln, phibar = 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    tnorm2 = 0.0
    gmax, gmin = 0.0, float("inf")
    itn = 0
    nonfinite = False
    ls_flagged = False

    while itn < maxit:
        itn += 1
        v = y / beta
        y = apply(op, v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1 = r2
        r2 = y
        oldb = beta
        beta = float(np.linalg.norm(y))
        if not (math.isfinite(alfa) and math.isfinite(beta)):
            nonfinite = True
            break
        tnorm2 += alfa * alfa + oldb * oldb + beta * beta

        # previous rotation applied to the new tridiagonal column
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        root = math.hypot(gbar, dbar)       # -> ||B r_{k-1}|| / ||r_{k-1}||

        # current rotation
        gamma = max(math.hypot(gbar, beta), _EPS)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        gmax = max(gmax, gamma)
        gmin = min(gmin, gamma)
        anorm = math.sqrt(tnorm2)
        history.append(phibar)

        if phibar <= cfg.rtol * bnorm:
            break
        if anorm > 0 and root / anorm <= cfg.rtol:
            ls_flagged = True
            break
        if beta <= cfg.breakdown_tol * max(anorm, 1.0):
            break                            # invariant subspace reached
        if anorm * _EPS * (gmax / max(gmin, _REALMIN)) >= 0.1:
            break                            # no further progress possible

    anorm = math.sqrt(tnorm2)
    acond = gmax / max(gmin, _REALMIN)
    return _classify(op, b, x, cfg.rtol, anorm, ls_flagged, nonfinite,
                     itn, phibar, acond, history)


def _minres_qlp_pass(op: LinearOperator, b: np.ndarray, cfg: SolverConfig, maxit: int):
    """One MINRES-QLP sweep; returns (x, iters, flag, anorm, acond, rnorm_est,
    history, nonfinite)."""
    n = op.dim
    rtol = cfg.rtol

    beta1 = float(np.linalg.norm(b))
    history = [beta1]
    if beta1 == 0.0:
        return np.zeros(n), 0, 0, 0.0, 1.0, 0.0, history, False

    FLAG_GO = -2
    flag = FLAG_GO
    iters = 0
    qlp_iter = 0
    nonfinite = False

    # Lanczos state
    r1 = np.zeros(n)
    r2 = b.copy()
    r3 = b.copy()
    beta, betan = 0.0, beta1

    # left reflection state
    tau, taul, phi = 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    dltan, eplnn = 0.0, 0.0

    # right reflection state
    cr1, sr1 = -1.0, 0.0
    cr2, sr2 = -1.0, 0.0

    # QLP factors
    gama, gamal, gamal2 = 0.0, 0.0, 0.0
    eta, etal, etal2 = 0.0, 0.0, 0.0
    vepln, veplnl, veplnl2 = 0.0, 0.0, 0.0
    u, ul, ul2, ul3 = 0.0, 0.0, 0.0, 0.0

    # transfer snapshot (last MINRES-phase quantities)
    gamal_qlp = vepln_qlp = gama_qlp = ul_qlp = u_qlp = 0.0

    rnorm = betan
    xnorm, xl2norm = 0.0, 0.0
    anorm, acond = 0.0, 1.0
    relres = rnorm / (beta1 + 1e-50)
    gmin = gminl = 0.0

    x = np.zeros(n)
    w = np.zeros(n)
    wl = np.zeros(n)
    wl2 = np.zeros(n)
    xl2 = np.zeros(n)

    while flag == FLAG_GO and iters < maxit:
        iters += 1

        # --- Lanczos step ---------------------------------------------
        betal = beta
        beta = betan
        v = r3 / beta
        r3 = apply(op, v)
        if iters > 1:
            r3 = r3 - (beta / betal) * r1
        alfa = float(r3 @ v)
        r3 = r3 - (alfa / beta) * r2
        r1 = r2
        r2 = r3
        betan = float(np.linalg.norm(r3))
        if not (math.isfinite(alfa) and math.isfinite(betan)):
            nonfinite = True
            break
        if iters == 1 and betan == 0.0:
            if alfa == 0.0:
                break                      # B b = 0: x = 0 is minimum-length
            x = b / alfa                   # b is an eigenvector
            flag = 1
            history.append(0.0)
            break
        pnorm = math.sqrt(betal * betal + alfa * alfa + betan * betan)

        # --- previous left reflection Q_{k-1} -------------------------
        dbar = dltan
        dlta = cs * dbar + sn * alfa
        epln = eplnn
        gbar = sn * dbar - cs * alfa
        eplnn = sn * betan
        dltan = -cs * betan
        dlta_qlp = dlta

        # --- current left reflection Q_k ------------------------------
        gamal3 = gamal2
        gamal2 = gamal
        gamal = gama
        cs, sn, gama = _sym_givens(gbar, betan)
        gama_tmp = gama
        taul2 = taul
        taul = tau
        tau = cs * phi
        phi = sn * phi

        # --- previous right reflection P_{k-2,k} ----------------------
        if iters > 2:
            veplnl2 = veplnl
            etal2 = etal
            etal = eta
            dlta_tmp = sr2 * vepln - cr2 * dlta
            veplnl = cr2 * vepln + sr2 * dlta
            dlta = dlta_tmp
            eta = sr2 * gama
            gama = -cr2 * gama

        # --- current right reflection P_{k-1,k} -----------------------
        if iters > 1:
            cr1, sr1, gamal = _sym_givens(gamal, dlta)
            vepln = sr1 * gama
            gama = -cr1 * gama

        # --- solution-norm recurrences --------------------------------
        ul4 = ul3
        ul3 = ul2
        if iters > 2:
            ul2 = (taul2 - etal2 * ul4 - veplnl2 * ul3) / gamal2
        if iters > 1:
            ul = (taul - etal * ul3 - veplnl * ul2) / gamal
        xnorm_tmp = math.sqrt(xl2norm * xl2norm + ul2 * ul2 + ul * ul)
        # numerical-rank test: a gamma at roundoff level relative to the
        # operator scale means the Krylov space just hit the range of B;
        # dividing by it would inject an arbitrary null-space component
        gama_tol = 100.0 * _EPS * max(anorm, pnorm)
        if abs(gama) > max(_REALMIN, gama_tol) and xnorm_tmp < cfg.maxxnorm:
            u = (tau - eta * ul2 - vepln * ul) / gama
            if math.hypot(xnorm_tmp, u) > cfg.maxxnorm:
                u = 0.0
                flag = 6
        else:
            u = 0.0
            flag = 9
        xl2norm = math.hypot(xl2norm, ul2)
        xnorm = math.sqrt(xl2norm * xl2norm + ul * ul + u * u)

        # --- update w and x -------------------------------------------
        if acond < cfg.trancond and flag == FLAG_GO and qlp_iter == 0:
            # MINRES-style update while the system looks benign
            wl2 = wl
            wl = w
            w = (v - epln * wl2 - dlta_qlp * wl) / gama_tmp
            if xnorm < cfg.maxxnorm:
                x = x + tau * w
            else:
                flag = 6
        else:
            # QLP update; on the first QLP pass rebuild the trailing
            # direction vectors from the MINRES-phase snapshot
            qlp_iter += 1
            if qlp_iter == 1:
                xl2 = np.zeros(n)
                if iters > 1:
                    if iters > 3:
                        wl2 = gamal3 * wl2 + veplnl2 * wl + etal * w
                    if iters > 2:
                        wl = gamal_qlp * wl + vepln_qlp * w
                    w = gama_qlp * w
                    xl2 = x - wl * ul_qlp - w * u_qlp
            if iters == 1:
                wl2 = wl
                wl = v * sr1
                w = -v * cr1
            elif iters == 2:
                wl2 = wl
                wl = w * cr1 + v * sr1
                w = w * sr1 - v * cr1
            else:
                wl2 = wl
                wl = w
                w = wl2 * sr2 - v * cr2
                wl2 = wl2 * cr2 + v * sr2
                v = wl * cr1 + w * sr1
                w = wl * sr1 - w * cr1
                wl = v
            xl2 = xl2 + wl2 * ul2
            x = xl2 + wl * ul + w * u

        # --- next right reflection P_{k-1,k+1} ------------------------
        gamal_tmp = gamal
        cr2, sr2, gamal = _sym_givens(gamal, eplnn)

        # snapshot for a later MINRES->QLP transfer
        gamal_qlp = gamal_tmp
        vepln_qlp = vepln
        gama_qlp = gama
        ul_qlp = ul
        u_qlp = u

        # --- norm estimates and stopping tests ------------------------
        abs_gama = abs(gama)
        anorm = max(anorm, pnorm, gamal, abs_gama)
        if iters == 1:
            gmin = gama
            gminl = gmin
        else:
            gminl2 = gminl
            gminl = gmin
            gmin = min(gminl2, gamal, abs_gama)
        acondl = acond
        acond = anorm / max(gmin, _REALMIN)
        rnorml = rnorm
        if flag != 9:
            rnorm = phi
        relres = rnorm / (anorm * xnorm + beta1)
        rootl = math.hypot(gbar, dltan)
        relaresl = rootl / max(anorm, _REALMIN)
        history.append(rnorm)

        if flag == FLAG_GO or flag == 9:
            epsx = anorm * xnorm * _EPS
            if iters >= maxit:
                flag = 8
            if acond >= cfg.acondlim:
                flag = 7
            if xnorm >= cfg.maxxnorm:
                flag = 6
            if epsx >= beta1:
                flag = 5
            if 1.0 + relaresl <= 1.0:
                flag = 4
            if 1.0 + relres <= 1.0:
                flag = 3
            if relaresl <= rtol:
                flag = 2
            if rnorm <= rtol * beta1:
                flag = 1

    if flag == FLAG_GO:
        flag = 0
    return x, iters, flag, max(anorm, _REALMIN), acond, rnorm, history, nonfinite


def minres_qlp(op: LinearOperator, b, cfg: SolverConfig | None = None) -> KrylovSolution:
    """Minimum-length solution of a symmetric (possibly singular) system.

    Runs MINRES recurrences while the condition estimate stays below
    ``cfg.trancond``, then transfers to the QLP update form, which remains
    stable on singular and severely ill-conditioned problems and yields the
    minimum-norm least-squares solution.

    Singular *inconsistent* systems can defeat the direct sweep: the zero
    eigenvalue surfaces in the tridiagonal factor mid-run and the sweep has
    to stop before the range components are resolved.  When that happens a
    second sweep solves the always-consistent squared system B^2 y = B b,
    whose minimum-length solution is exactly the minimum-length least-squares
    solution of the original system.  ``iters`` counts both sweeps.
    """
    cfg = cfg or SolverConfig()
    b = as_vector(b, "rhs")
    check_length(b, op.dim, "rhs")
    maxit = cfg.resolve_max_iters(op.dim)

    x, iters, flag, anorm, acond, rnorm_est, history, nonfinite = \
        _minres_qlp_pass(op, b, cfg, maxit)
    sol = _classify(op, b, x, cfg.rtol, anorm, flag in (2, 4), nonfinite,
                    iters, rnorm_est, acond, history)
    if sol.status in (CONVERGED, BREAKDOWN) or flag in (1, 3, 5):
        # flags 1/3/5 mean the sweep converged as far as f64 allows; the
        # squared-system sweep would only trade a floor-level iterate for
        # one with cond^2 error amplification
        return sol
    if flag == 8:
        bnorm = float(np.linalg.norm(b))
        nrbe = sol.residual_norm / (anorm * np.linalg.norm(x) + bnorm)
        if nrbe <= 1e-10:
            # ran out of iterations but the normwise relative backward error
            # is at roundoff level: the iterate already sits on the
            # attainable floor, a second sweep cannot help
            return sol

    # Least-squares-type exit: the direct sweep may carry an uncontrolled
    # null-space component.  Re-solve through the squared system and keep
    # whichever iterate is least-squares better, shorter on ties.
    sq = LinearOperator(op.dim, lambda v: apply(op, apply(op, v)))
    x2, it2, flag2, anorm2, acond2, _, _, nonfinite2 = \
        _minres_qlp_pass(sq, apply(op, b), cfg, maxit)
    if nonfinite2 or not np.all(np.isfinite(x2)):
        return sol
    r1 = b - apply(op, x)
    r2 = b - apply(op, x2)
    if not _ls_better(np.linalg.norm(r2), np.linalg.norm(apply(op, r2)), np.linalg.norm(x2),
                      np.linalg.norm(r1), np.linalg.norm(apply(op, r1)), np.linalg.norm(x)):
        return sol
    rnorm2 = float(np.linalg.norm(r2))
    history = history + [min(history[-1], rnorm2)]
    return _classify(op, b, x2, cfg.rtol, anorm, flag2 in (1, 2, 3, 4), False,
                     iters + it2, rnorm2, max(acond, acond2), history)


def _ls_better(r2n, ar2n, x2n, r1n, ar1n, x1n) -> bool:
    """Is (r2n, ar2n, x2n) a better least-squares candidate than (r1n, ...)?

    Residual norms decide when they clearly differ.  When they are
    comparable, a drastically shorter iterate wins (minimum-length tie),
    and otherwise the smaller ||B r|| does: near the LS optimum the
    residual norm saturates, so ||B r|| is the only measure left that
    still separates a clean iterate from one polluted mid-sweep.
    """
    if r2n > r1n * (1.0 + 1e-6):
        return False
    if r2n < r1n * (1.0 - 1e-6):
        return True
    if x2n < 0.5 * x1n:
        return True
    if x1n < 0.5 * x2n:
        return False
    return ar2n <= ar1n
