import numpy as np
import pytest
import scipy.optimize

from lqd import (
    CondensedQp,
    DimensionMismatch,
    InfeasibleConstraints,
    InputBounds,
    MpcController,
    QPNotConverged,
    ScenarioConfig,
    active_set_solve,
    augment_discrete,
    build_control_model,
    condense,
    prediction_maps,
    qp_solve,
    solve,
    stack_mimo,
)
from lqd.qp import _null_space


def _random_lq(seed: int, n_s: int = 3, n_u: int = 2):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_s, n_s))
    a *= 0.9 / max(np.abs(np.linalg.eigvals(a)))
    b = rng.standard_normal((n_s, n_u))
    w = rng.standard_normal((n_s + n_u, n_s + n_u))
    q = w.T @ w + 0.1 * np.eye(n_s + n_u)
    return a, b, q, rng


def _riccati_plan(a, b, q, q_k, x0):
    """Backward dynamic programming over the same stage costs, as an independent oracle."""
    n_s, n_u = b.shape
    q_xx, q_xu, q_uu = q[:n_s, :n_s], q[:n_s, n_s:], q[n_s:, n_s:]
    p, s = np.zeros((n_s, n_s)), np.zeros(n_s)
    gains = []
    for lin in q_k[::-1]:
        h_uu = q_uu + b.T @ p @ b
        h_ux = q_xu.T + b.T @ p @ a
        h_xx = q_xx + a.T @ p @ a
        h_u = lin[n_s:] + b.T @ s
        h_x = lin[:n_s] + a.T @ s
        k_fb = -np.linalg.solve(h_uu, h_ux)
        k_ff = -np.linalg.solve(h_uu, h_u)
        p = h_xx + h_ux.T @ k_fb
        s = h_x + h_ux.T @ k_ff
        gains.append((k_fb, k_ff))
    x = np.asarray(x0, dtype=float)
    plan = []
    for k_fb, k_ff in reversed(gains):
        u = k_fb @ x + k_ff
        plan.append(u)
        x = a @ x + b @ u
    return np.concatenate(plan)


def _stage_sum(a, b, q, q_k, x0, u_seq):
    x = np.asarray(x0, dtype=float)
    total = 0.0
    for lin, u in zip(q_k, u_seq.reshape(len(q_k), -1)):
        w = np.concatenate([x, u])
        total += 0.5 * w @ q @ w + lin @ w
        x = a @ x + b @ u
    return total


def _clip_plan(bounds: InputBounds, plan, u_prev):
    out = []
    prev = np.asarray(u_prev, dtype=float)
    for u in plan:
        lo = np.maximum(bounds.u_min, prev + bounds.du_min)
        hi = np.minimum(bounds.u_max, prev + bounds.du_max)
        prev = np.clip(u, lo, hi)
        out.append(prev)
    return np.concatenate(out)


def test_bounds_broadcast_scalars() -> None:
    bnd = InputBounds(-1.0, [1.0, 2.0], -0.5, 0.5)
    assert bnd.n_u == 2
    np.testing.assert_array_equal(bnd.u_min, [-1.0, -1.0])
    np.testing.assert_array_equal(bnd.u_max, [1.0, 2.0])


def test_bounds_errors() -> None:
    with pytest.raises(InfeasibleConstraints):
        InputBounds(1.0, 0.0, -1.0, 1.0)
    with pytest.raises(InfeasibleConstraints):
        InputBounds(0.0, 1.0, 1.0, -1.0)
    with pytest.raises(InfeasibleConstraints):
        InputBounds(0.0, 1.0, 0.1, 1.0)
    with pytest.raises(DimensionMismatch):
        InputBounds([0.0, 0.0], [1.0, 1.0, 1.0], -1.0, 1.0)


def test_bounds_violation() -> None:
    bnd = InputBounds(-1.0, 1.0, -0.5, 0.5)
    assert bnd.violation([[0.2], [0.6]]) == 0.0
    assert bnd.violation([[0.4], [1.2]]) == pytest.approx(0.3)
    assert bnd.violation([[0.0]], u_prev=[2.0]) == pytest.approx(1.5)


def test_condensed_qp_shapes() -> None:
    with pytest.raises(DimensionMismatch):
        CondensedQp(np.eye(3), np.zeros(3), InputBounds.unbounded(2), 2)
    with pytest.raises(DimensionMismatch):
        condense(np.eye(2), np.ones((2, 1)), np.eye(2), n=2)


def test_prediction_maps_reproduce_simulation() -> None:
    a, b, _, rng = _random_lq(0)
    n = 5
    u = rng.standard_normal(n * 2)
    x0 = rng.standard_normal(3)
    powers, gammas = prediction_maps(a, b, n)

    x = x0
    for k in range(n):
        np.testing.assert_allclose(powers[k] @ x0 + gammas[k] @ u, x, atol=1e-12)
        x = a @ x + b @ u[2 * k : 2 * k + 2]


@pytest.mark.parametrize("seed", range(10))
def test_condense_matches_riccati(seed) -> None:
    a, b, q, rng = _random_lq(seed)
    n = 6
    q_k = rng.standard_normal((n, 5))
    x0 = rng.standard_normal(3)
    qp = condense(a, b, q, None, q_k, x0, n)

    u_star = np.linalg.solve(qp.h, -qp.g)
    u_dp = _riccati_plan(a, b, q, q_k, x0)
    np.testing.assert_allclose(u_star, u_dp, rtol=1e-8, atol=1e-8)
    assert qp.ridge == 0.0


def test_condensed_objective_matches_stage_sum() -> None:
    a, b, q, rng = _random_lq(4)
    n = 4
    q_k = rng.standard_normal((n, 5))
    x0 = rng.standard_normal(3)
    qp = condense(a, b, q, None, q_k, x0, n)
    offset = _stage_sum(a, b, q, q_k, x0, np.zeros(n * 2))

    for _ in range(3):
        u = rng.standard_normal(n * 2)
        assert qp.objective(u) + offset == pytest.approx(_stage_sum(a, b, q, q_k, x0, u), rel=1e-10)


def test_condense_references() -> None:
    a, b, q, rng = _random_lq(5)
    m = rng.standard_normal((5, 2))
    refs = rng.standard_normal((3, 2))
    with_refs = condense(a, b, q, m, None, None, 3, references=refs)
    direct = condense(a, b, q, None, refs @ m.T, None, 3)
    np.testing.assert_allclose(with_refs.g, direct.g)

    with pytest.raises(DimensionMismatch):
        condense(a, b, q, None, None, None, 3, references=refs)


def test_singular_hessian_gets_ridge() -> None:
    qp = condense([[1.0]], [[0.0]], np.zeros((2, 2)), n=2)
    assert qp.ridge == pytest.approx(1e-9)
    np.testing.assert_allclose(qp.h, 1e-9 * np.eye(2))


def test_unconstrained_solve() -> None:
    a, b, q, rng = _random_lq(6)
    qp = condense(a, b, q, None, rng.standard_normal((4, 5)), rng.standard_normal(3), 4)
    np.testing.assert_allclose(qp_solve(qp), np.linalg.solve(qp.h, -qp.g), atol=1e-10)


def test_box_bounds() -> None:
    qp = CondensedQp(np.eye(2), [-5.0, -5.0], InputBounds(-1.0, 1.0, -np.inf, np.inf), 2)
    sol = active_set_solve(qp)
    np.testing.assert_allclose(sol.u, [1.0, 1.0])
    assert len(sol.active) == 2


def test_rate_bounds_from_previous_input() -> None:
    qp = CondensedQp(np.eye(2), [-5.0, -5.0], InputBounds(-10.0, 10.0, -0.5, 0.5), 2)
    np.testing.assert_allclose(qp_solve(qp), [0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(qp_solve(qp, [3.0]), [3.5, 4.0], atol=1e-12)


def test_lower_bounds() -> None:
    qp = CondensedQp(np.eye(2), [4.0, -0.5], InputBounds(-1.0, 1.0, -np.inf, np.inf), 2)
    np.testing.assert_allclose(qp_solve(qp), [-1.0, 0.5], atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_constrained_solution_beats_feasible_plans(seed) -> None:
    a, b, q, rng = _random_lq(seed)
    n = 5
    bounds = InputBounds([-0.5, -1.0], [0.5, 1.0], -0.3, 0.3)
    qp = condense(a, b, q, None, 3.0 * rng.standard_normal((n, 5)), rng.standard_normal(3), n, bounds=bounds)
    u_prev = np.array([0.2, -0.2])

    u_star = qp_solve(qp, u_prev)
    assert bounds.violation(u_star, u_prev) <= 1e-9
    best = qp.objective(u_star)
    for _ in range(50):
        candidate = _clip_plan(bounds, rng.standard_normal((n, 2)), u_prev)
        assert best <= qp.objective(candidate) + 1e-9
    perturbed = _clip_plan(bounds, u_star.reshape(n, 2) + 1e-3 * rng.standard_normal((n, 2)), u_prev)
    assert best <= qp.objective(perturbed) + 1e-9


def test_warm_start_is_repaired() -> None:
    qp = CondensedQp(np.eye(2), [-5.0, -5.0], InputBounds(-1.0, 1.0, -np.inf, np.inf), 2)
    np.testing.assert_allclose(qp_solve(qp, warm_start=[9.0, -9.0]), [1.0, 1.0])


def test_infeasible_previous_input() -> None:
    qp = CondensedQp(np.eye(1), [0.0], InputBounds(-1.0, 1.0, -1.0, 1.0), 1)
    with pytest.raises(InfeasibleConstraints):
        qp_solve(qp, [5.0])


def test_iteration_cap() -> None:
    qp = CondensedQp(np.eye(2), [-5.0, -5.0], InputBounds(-1.0, 1.0, -np.inf, np.inf), 2)
    with pytest.raises(QPNotConverged):
        active_set_solve(qp, max_iter=1)


def test_controller_gradient_matches_condense() -> None:
    a, b, q, rng = _random_lq(7, n_s=2, n_u=1)
    sys = augment_discrete(a, b, np.zeros((1, 1)), np.ones((1, 2)), 0, 1)
    m = rng.standard_normal((3, 1))
    x_hat = rng.standard_normal(2)
    ctrl = MpcController(sys, q, m, 4)

    expected = condense(a, b, q, m, None, x_hat, 4, references=np.full((4, 1), 0.7))
    np.testing.assert_allclose(ctrl.gradient(x_hat, [0.7]), expected.g, atol=1e-12)
    np.testing.assert_allclose(ctrl.gradient(x_hat, np.full((4, 1), 0.7)), expected.g, atol=1e-12)


def test_controller_plan() -> None:
    a, b, q, rng = _random_lq(8, n_s=2, n_u=1)
    sys = augment_discrete(a, b, np.zeros((1, 1)), np.ones((1, 2)), 0, 1)
    bounds = InputBounds(-0.2, 0.2, -0.1, 0.1)
    ctrl = MpcController(sys, q, rng.standard_normal((3, 1)), 5, bounds)

    plan = ctrl.solve(rng.standard_normal(2), [3.0], [0.0])
    assert plan.shape == (5, 1)
    assert bounds.violation(plan, [0.0]) <= 1e-9

    again = ctrl.solve(np.zeros(2), [0.0], plan[0])
    assert bounds.violation(again, plan[0]) <= 1e-9
    ctrl.reset()
    assert "horizon=5" in repr(ctrl)


def test_box_qp_matches_projected_gradient() -> None:
    rng = np.random.default_rng(11)
    basis, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    h = basis @ np.diag(np.linspace(1.0, 10.0, 10)) @ basis.T
    g = 5.0 * rng.standard_normal(10)
    qp = CondensedQp(h, g, InputBounds(-1.0, 1.0, -np.inf, np.inf, n_u=1), 10)

    # projected gradient with step 1/L contracts by 1 - mu/L = 0.9 per iteration
    u = np.zeros(10)
    for _ in range(2000):
        u = np.clip(u - 0.1 * (h @ u + g), -1.0, 1.0)

    assert abs(qp.objective(qp_solve(qp)) - qp.objective(u)) <= 1e-7


@pytest.fixture(scope="module")
def cement_controller():
    scenario = ScenarioConfig.cement_mill()
    coeffs = stack_mimo(build_control_model(scenario))
    res = solve(coeffs, scenario.q_c)
    sys = augment_discrete(res.a, res.b_o, coeffs.d_o, coeffs.c_c, coeffs.m_bar, coeffs.n_u)
    return MpcController(sys, res.q, res.m, scenario.horizon, scenario.bounds)


def _assert_kkt(qp: CondensedQp, u, u_prev) -> None:
    """Checks feasibility and that ``-grad`` is a nonnegative combination of the tight rows."""
    g_rows, b_rows = qp.constraint_rows(u_prev)
    lhs = g_rows @ u
    assert np.max(lhs - b_rows) <= 1e-8

    tight = np.abs(lhs - b_rows) <= 1e-9 * (1.0 + np.abs(b_rows))
    grad = qp.h @ u + qp.g
    if tight.any():
        _, residual = scipy.optimize.nnls(g_rows[tight].T, -grad)
    else:
        residual = np.linalg.norm(grad)
    scale = 1.0 + np.abs(qp.g).max() + np.linalg.norm(qp.h, np.inf) * np.abs(u).max()
    assert residual <= 1e-6 * scale, (residual, scale)


def test_null_space_of_box_and_rate_rows() -> None:
    qp = CondensedQp(np.eye(8), np.zeros(8), InputBounds(-1.0, 1.0, -0.5, 0.5, n_u=2), 4)
    g_rows, _ = qp.constraint_rows([0.0, 0.0])
    # box rows pin u_0 and u_4, rate rows tie u_1 ~ u_3 ~ u_5 and u_2 ~ u_4
    working = [0, 4, 8 + 3, 8 + 5, 8 + 4]
    z = _null_space(g_rows[working], 8)

    assert z.shape == (8, 3)
    np.testing.assert_allclose(z.T @ z, np.eye(3), atol=1e-15)
    np.testing.assert_array_equal(g_rows[working] @ z, 0.0)
    assert _null_space(g_rows[:0], 8).shape == (8, 8)


def test_null_space_falls_back_for_general_rows() -> None:
    a_w = np.array([[1.0, 2.0, 0.0, -1.0]])
    z = _null_space(a_w, 4)
    assert z.shape == (4, 3)
    np.testing.assert_allclose(a_w @ z, 0.0, atol=1e-14)


def test_cement_mill_hessian_is_near_singular(cement_controller) -> None:
    qp = cement_controller.qp
    assert qp.h.shape == (200, 200)
    eig = np.linalg.eigvalsh(qp.h)
    assert eig.min() >= 1e-10
    assert eig.max() / eig.min() > 1e6


@pytest.mark.parametrize("refs", [[5.0, 500.0], [-5.0, -500.0], [1.0, 50.0]])
def test_cement_mill_qp_kkt(cement_controller, refs) -> None:
    ctrl = cement_controller
    qp = ctrl.qp.with_gradient(ctrl.gradient(np.zeros(ctrl.sys.n_state), refs))
    u_prev = np.zeros(2)
    sol = active_set_solve(qp, u_prev)
    _assert_kkt(qp, sol.u, u_prev)


def test_cement_mill_qp_with_coinciding_box_and_rate_bounds(cement_controller) -> None:
    ctrl = cement_controller
    qp = ctrl.qp.with_gradient(ctrl.gradient(np.zeros(ctrl.sys.n_state), [5.0, 500.0]))
    # u_prev + du_max meets u_max in the first stage
    u_prev = np.array([18.0, -18.0])
    cold = active_set_solve(qp, u_prev)
    _assert_kkt(qp, cold.u, u_prev)

    # a ramp that reaches the box at full rate keeps box and rate rows tight together
    ramp = np.minimum(10.0 + 2.0 * np.arange(1, 101), 20.0)
    u_prev = np.array([10.0, 10.0])
    warm = active_set_solve(qp, u_prev, warm_start=np.repeat(ramp, 2))
    _assert_kkt(qp, warm.u, u_prev)
    again = active_set_solve(qp, u_prev)
    assert qp.objective(warm.u) == pytest.approx(qp.objective(again.u), rel=1e-7, abs=1e-6)


def test_cement_mill_receding_horizon(cement_controller) -> None:
    ctrl = cement_controller
    ctrl.reset()
    x_hat = np.zeros(ctrl.sys.n_state)
    u_prev = np.zeros(2)
    for refs in ([1.0, 50.0], [1.0, 50.0], [-1.0, -50.0], [0.0, 0.0]):
        plan = ctrl.solve(x_hat, refs, u_prev)
        assert ctrl.qp.bounds.violation(plan, u_prev) <= 1e-8
        u_prev = plan[0]
        x_hat = ctrl.sys.a_tilde @ x_hat + ctrl.sys.b_tilde @ u_prev
    ctrl.reset()
