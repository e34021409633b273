import numpy as np
import pytest

from hardtrain import autodiff as ad
from hardtrain import kkt, linops
from hardtrain.krylov import SolverConfig

from util import dense_random_mlp


def linear_constraints(G, c=None):
    """Analytic linear constraint stack C(w) = G w + c."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return ad.LinearMap(G, shift=c)


def sgd_state(w, grad, G, c=None, damping=1.0):
    fn = linear_constraints(G, c)
    return kkt.KktState(w=w, damping=damping, variant=kkt.SGD,
                        constraint_fn=fn, constraint_values=fn.value(w),
                        risk_grad=np.asarray(grad, dtype=float))


def dense_block(D, G):
    """Oracle: hand-assembled saddle-point matrix from analytic blocks."""
    n, m = D.shape[0], G.shape[0]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = D
    M[:n, n:] = G.T
    M[n:, :n] = G
    return M


def test_matvec_sgd_single_linear_constraint():
    w = np.zeros(2)
    state = sgd_state(w, grad=[0.0, 0.0], G=[[1.0, 0.0]])
    out = kkt.kkt_matvec_sgd(state, np.array([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out, [2.0, 1.0, 1.0])


def test_matvec_sgd_zero_jacobian_decouples():
    w = np.zeros(3)
    state = sgd_state(w, grad=np.zeros(3), G=np.zeros((2, 3)), damping=0.7)
    v = np.array([1.0, -2.0, 3.0, 4.0, 5.0])
    out = kkt.kkt_matvec_sgd(state, v)
    np.testing.assert_allclose(out, np.concatenate([0.7 * v[:3], np.zeros(2)]))


def test_sgd_operator_materializes_to_block_matrix():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((2, 3))
    state = sgd_state(np.zeros(3), grad=np.zeros(3), G=G, damping=1.3)
    got = linops.materialize(kkt.kkt_operator(state))
    expect = dense_block(1.3 * np.eye(3), G)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_matvec_gn_identity_residuals():
    n = 4
    w = np.zeros(n)
    state = kkt.KktState(w=w, damping=0.5, variant=kkt.GAUSS_NEWTON,
                         residual_fn=ad.LinearMap(np.eye(n)))
    v = np.arange(1.0, n + 1)
    np.testing.assert_allclose(kkt.kkt_matvec_gn(state, v), 1.5 * v)


def test_gn_operator_materializes_to_gauss_newton_block():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((6, 3))
    G = rng.standard_normal((2, 3))
    fn = linear_constraints(G)
    state = kkt.KktState(w=np.zeros(3), damping=0.8, variant=kkt.GAUSS_NEWTON,
                         residual_fn=ad.LinearMap(A),
                         constraint_fn=fn, constraint_values=fn.value(np.zeros(3)))
    got = linops.materialize(kkt.kkt_operator(state))
    expect = dense_block(A.T @ A + 0.8 * np.eye(3), G)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_gn_symmetry_probe_on_mlp_residuals():
    rng = np.random.default_rng(2)
    widths = dense_random_mlp(rng, max_width=12, in_dim=4, out_dim=3)
    mlp = ad.Mlp(widths)
    w = mlp.init_params(rng)
    X = rng.standard_normal((5, 4))
    Y = rng.standard_normal((5, 3))
    state = kkt.KktState(w=w, damping=0.3, variant=kkt.GAUSS_NEWTON,
                         residual_fn=ad.ScaledResiduals(mlp, X, Y))
    assert linops.symmetry_defect(kkt.kkt_operator(state), n_probes=50, seed=3) <= 1e-10


def test_matvec_adam_zero_moments():
    n = 3
    f = np.sqrt(1 - 0.999) / (1 - 0.9)
    state = kkt.KktState(w=np.zeros(n), damping=1.0, variant=kkt.ADAM,
                         adam_m=np.zeros(n), adam_v=np.zeros(n), adam_t=0)
    v = np.ones(n)
    np.testing.assert_allclose(kkt.kkt_matvec_adam(state, v), f * 1e-8 * v, rtol=1e-12)


def test_matvec_adam_uniform_second_moment_is_scaled_identity():
    n = 5
    c = 0.04
    state = kkt.KktState(w=np.zeros(n), damping=2.0, variant=kkt.ADAM,
                         adam_m=np.zeros(n), adam_v=np.full(n, c), adam_t=3)
    f = kkt.adam_correction(0.9, 0.999, 3)
    scale = 2.0 * f * (np.sqrt(c) + 1e-8)
    v = np.linspace(-1, 1, n)
    np.testing.assert_allclose(kkt.kkt_matvec_adam(state, v), scale * v, rtol=1e-12)


def test_adam_operator_materializes_to_diag_block():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((2, 3))
    fn = linear_constraints(G)
    mvec = rng.standard_normal(3)
    vvec = rng.uniform(0.0, 1.0, 3)
    state = kkt.KktState(w=np.zeros(3), damping=1.7, variant=kkt.ADAM,
                         constraint_fn=fn, constraint_values=fn.value(np.zeros(3)),
                         adam_m=mvec, adam_v=vvec, adam_t=5)
    f = kkt.adam_correction(0.9, 0.999, 5)
    D = np.diag(1.7 * f * (np.sqrt(vvec) + 1e-8))
    np.testing.assert_allclose(linops.materialize(kkt.kkt_operator(state)),
                               dense_block(D, G), atol=1e-12)


def test_rhs_sgd_sign_and_concat():
    state = sgd_state(np.zeros(2), grad=[1.0, 2.0], G=[[0.0, 0.0]], c=[3.0])
    np.testing.assert_allclose(kkt.kkt_rhs(state), [-1.0, -2.0, -3.0])


def test_rhs_gn_zero_residuals():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    state = kkt.KktState(w=np.zeros(2), damping=1.0, variant=kkt.GAUSS_NEWTON,
                         residual_fn=ad.LinearMap(A))
    np.testing.assert_allclose(kkt.kkt_rhs(state), np.zeros(2))


def test_rhs_adam_first_step_moment():
    g = np.array([2.0, -4.0])
    m1 = (1 - 0.9) * g       # first-moment update from zero moments
    state = kkt.KktState(w=np.zeros(2), damping=1.0, variant=kkt.ADAM,
                         adam_m=m1, adam_v=0.001 * g ** 2, adam_t=0)
    np.testing.assert_allclose(kkt.kkt_rhs(state), -0.1 * g)


def test_rhs_missing_pieces_raise():
    with pytest.raises(ValueError):
        kkt.kkt_rhs(kkt.KktState(w=np.zeros(2), damping=1.0, variant=kkt.SGD))
    with pytest.raises(ValueError):
        kkt.kkt_rhs(kkt.KktState(w=np.zeros(2), damping=1.0, variant=kkt.ADAM))


def test_solve_step_unconstrained_is_scaled_gradient_descent():
    grad = np.array([3.0, -1.0, 2.0])
    state = kkt.KktState(w=np.zeros(3), damping=4.0, variant=kkt.SGD, risk_grad=grad)
    step = kkt.solve_step(state, SolverConfig(rtol=1e-12))
    np.testing.assert_allclose(step.dw, -grad / 4.0, atol=1e-12)
    assert step.multipliers.size == 0


def test_solve_step_inactive_orthogonal_constraint():
    # constraint already satisfied and its normal is orthogonal to the
    # gradient: the step must match the unconstrained one with zero multiplier
    grad = np.array([1.0, 0.0])
    state = sgd_state(np.zeros(2), grad=grad, G=[[0.0, 1.0]], damping=2.0)
    step = kkt.solve_step(state, SolverConfig(rtol=1e-12))
    np.testing.assert_allclose(step.dw, -grad / 2.0, atol=1e-10)
    np.testing.assert_allclose(step.multipliers, [0.0], atol=1e-10)


def test_solve_step_violated_linear_constraint():
    # C(w) = w0 - 1, violated at w=0; after the step the linearized
    # constraint must be satisfied to solver tolerance
    state = sgd_state(np.zeros(2), grad=[0.2, -0.3], G=[[1.0, 0.0]], c=[-1.0])
    step = kkt.solve_step(state, SolverConfig(rtol=1e-12))
    lin_residual = state.constraint_values + np.array([[1.0, 0.0]]) @ step.dw
    assert abs(lin_residual[0]) <= 1e-10


def test_solve_step_matches_dense_kkt_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n, m = 6, 3
        G = rng.standard_normal((m, n))
        c = rng.standard_normal(m)
        grad = rng.standard_normal(n)
        state = sgd_state(rng.standard_normal(n), grad=grad, G=G, c=c, damping=1.5)
        M = dense_block(1.5 * np.eye(n), G)
        rhs = np.concatenate([-grad, -state.constraint_values])
        expect = np.linalg.solve(M, rhs)
        step = kkt.solve_step(state, SolverConfig(rtol=1e-12))
        sol = np.concatenate([step.dw, step.multipliers])
        assert np.linalg.norm(sol - expect) <= 1e-8 * np.linalg.norm(expect)


def test_solve_step_invariant_to_constraint_ordering():
    rng = np.random.default_rng(5)
    n, m = 5, 3
    G = rng.standard_normal((m, n))
    c = rng.standard_normal(m)
    grad = rng.standard_normal(n)
    w = rng.standard_normal(n)
    perm = np.array([2, 0, 1])
    s1 = sgd_state(w, grad=grad, G=G, c=c)
    s2 = sgd_state(w, grad=grad, G=G[perm], c=c[perm])
    cfg = SolverConfig(rtol=1e-12)
    st1 = kkt.solve_step(s1, cfg)
    st2 = kkt.solve_step(s2, cfg)
    np.testing.assert_allclose(st1.dw, st2.dw, atol=1e-9)
    np.testing.assert_allclose(st1.multipliers[perm], st2.multipliers, atol=1e-9)


def test_all_variants_pass_symmetry_probe():
    rng = np.random.default_rng(6)
    G = rng.standard_normal((2, 4))
    fn = linear_constraints(G)
    common = dict(constraint_fn=fn, constraint_values=fn.value(np.zeros(4)))
    states = [
        kkt.KktState(w=np.zeros(4), damping=1.0, variant=kkt.SGD,
                     risk_grad=np.zeros(4), **common),
        kkt.KktState(w=np.zeros(4), damping=1.0, variant=kkt.GAUSS_NEWTON,
                     residual_fn=ad.LinearMap(rng.standard_normal((5, 4))), **common),
        kkt.KktState(w=np.zeros(4), damping=1.0, variant=kkt.ADAM,
                     adam_m=np.zeros(4), adam_v=rng.uniform(0, 1, 4), adam_t=2, **common),
    ]
    for state in states:
        assert linops.symmetry_defect(kkt.kkt_operator(state), n_probes=50, seed=1) <= 1e-10


def test_breakdown_propagates_with_diagnostics():
    class Bad(ad.DiffFunction):
        n_params = 2
        n_outputs = 1

        def value(self, w):
            return np.array([1.0])

        def rop(self, w, v):
            return np.array([np.nan])

        def lop(self, w, u):
            return np.full(2, np.nan)

    state = kkt.KktState(w=np.zeros(2), damping=1.0, variant=kkt.SGD,
                         risk_grad=np.ones(2), constraint_fn=Bad(),
                         constraint_values=np.array([1.0]))
    with pytest.raises(kkt.SolverBreakdown, match="iterations"):
        kkt.solve_step(state)


def test_retry_policy_doubles_damping_then_skips():
    rng = np.random.default_rng(7)
    G = rng.standard_normal((2, 4))
    state = sgd_state(rng.standard_normal(4), grad=rng.standard_normal(4), G=G)
    # a one-iteration budget cannot reach the acceptance residual
    step, retried = kkt.solve_step_with_retry(state, SolverConfig(rtol=1e-14, max_iters=1))
    assert step is None and retried
    # a sane budget accepts without retrying
    step, retried = kkt.solve_step_with_retry(state, SolverConfig(rtol=1e-10))
    assert step is not None and not retried


def test_state_validation():
    with pytest.raises(ValueError, match="damping"):
        kkt.KktState(w=np.zeros(2), damping=0.0)
    with pytest.raises(ValueError, match="variant"):
        kkt.KktState(w=np.zeros(2), damping=1.0, variant="newton")
