import numpy as np
import pytest
import scipy.linalg

from lqd import (
    ButcherTableau,
    DimensionMismatch,
    InvalidStepCount,
    InvalidTableau,
    Method,
    NonFiniteValue,
    SingularStageSystem,
    compare,
    discretize_timed,
    expm,
    solve,
    solve_fixed_step,
    solve_matrix_exp,
    solve_step_doubling,
    stack_mimo,
    stage_coefficients,
    step_doubling_series,
)
from lqd.constants import TABLEAUS
from tests import DELAYED_INTEGRATOR, FIRST_ORDER, INTEGRATOR, random_system, scalar_system

OUTPUTS = ("a", "b_o", "q", "m", "r_ww")


def _rel(x: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(x - ref, np.inf) / max(1.0, np.linalg.norm(ref, np.inf)))


@pytest.mark.parametrize("name", sorted(TABLEAUS))
def test_builtin_tableaus(name) -> None:
    tab = ButcherTableau.from_name(name)
    assert tab.name == name
    assert tab.b.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(tab.c, tab.a.sum(axis=1))
    assert tab.explicit == (name not in ("backward_euler", "implicit_midpoint", "gauss2"))


def test_tableau_errors() -> None:
    with pytest.raises(InvalidTableau):
        ButcherTableau.from_name("rk99")
    with pytest.raises(InvalidTableau):
        ButcherTableau([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.6])
    with pytest.raises(InvalidTableau):
        ButcherTableau([[0.0]], [0.5, 0.5])


def test_tableau_resolve() -> None:
    assert ButcherTableau.resolve(None).name == "rk4"
    assert ButcherTableau.resolve("HEUN").name == "heun"
    tab = ButcherTableau([[0.0]], [1.0], name="mine")
    assert ButcherTableau.resolve(tab) is tab


@pytest.mark.parametrize("scale", [1e-3, 0.1, 1.0, 5.0, 60.0])
def test_expm_matches_scipy(scale) -> None:
    x = np.random.default_rng(int(scale * 1000)).standard_normal((6, 6))
    x *= scale / np.linalg.norm(x, 1)
    ref = scipy.linalg.expm(x)
    assert np.linalg.norm(expm(x) - ref, 1) <= 1e-10 * np.linalg.norm(ref, 1)


def test_expm_edge_cases() -> None:
    np.testing.assert_array_equal(expm(np.zeros((0, 0))), np.zeros((0, 0)))
    np.testing.assert_allclose(expm(np.zeros((3, 3))), np.eye(3), atol=1e-15)
    with pytest.raises(NonFiniteValue):
        expm([[np.nan]])
    with pytest.raises(DimensionMismatch):
        expm(np.ones((2, 3)))


def test_implicit_midpoint_stage_coefficients() -> None:
    tab = ButcherTableau.from_name("implicit_midpoint")
    h, a = 0.1, -2.0
    sc = stage_coefficients(tab, h, [[a]], [[0.5 * a]])
    expected = (1 + h * a / 2) / (1 - h * a / 2)
    assert sc.lambda_[0, 0] == pytest.approx(expected, rel=1e-14)
    assert sc.omega is None


def test_explicit_stage_coefficients_reproduce_taylor() -> None:
    tab = ButcherTableau.from_name("rk4")
    gen = np.array([[-1.0, 0.3], [0.0, -0.5]])
    h = 0.05
    sc = stage_coefficients(tab, h, gen, gen)
    hg = h * gen
    taylor = np.eye(2) + hg + hg @ hg / 2 + hg @ hg @ hg / 6 + hg @ hg @ hg @ hg / 24
    np.testing.assert_allclose(sc.lambda_, taylor, rtol=1e-14)


def test_singular_stage_system() -> None:
    tab = ButcherTableau.from_name("backward_euler")
    with pytest.raises(SingularStageSystem):
        stage_coefficients(tab, 1.0, [[1.0]], [[0.0]])


@pytest.mark.parametrize("method", list(Method))
def test_integrator_closed_form(method) -> None:
    coeffs = stack_mimo(scalar_system(INTEGRATOR, g_c=[[1.0]]))
    res = solve(coeffs, [[1.0]], method=method, n=16, j=4)
    np.testing.assert_allclose(res.a, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(res.b_o, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(res.q, [[1.0, 0.5], [0.5, 1.0 / 3.0]], atol=1e-12)
    np.testing.assert_allclose(res.m, [[-1.0], [-0.5]], atol=1e-12)
    np.testing.assert_allclose(res.r_ww, [[1.0]], atol=1e-12)
    # int_0^1 t dt
    assert res.rho_w == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("method", list(Method))
def test_delayed_integrator_closed_form(method) -> None:
    coeffs = stack_mimo(scalar_system(DELAYED_INTEGRATOR))
    res = solve(coeffs, [[1.0]], method=method, n=16, j=4)
    np.testing.assert_allclose(res.b_o, [[0.5, 0.5]], atol=1e-12)
    assert res.r_ww.shape == (1, 1) and res.r_ww[0, 0] == 0.0


@pytest.mark.parametrize("method", list(Method))
def test_first_order_fractional_delay(method) -> None:
    case = FIRST_ORDER._replace(tau=0.5 * FIRST_ORDER.ts)
    coeffs = stack_mimo(scalar_system(case))
    res = solve(coeffs, [[1.0]], method=method, n=2**10, j=10)

    a, b, ts = case.a, case.b, case.ts
    late = np.exp(a * 0.5 * ts)
    expected = [[b * (np.exp(a * ts) - late) / a, b * (late - 1.0) / a]]  # [u_{k-1}, u_k]
    np.testing.assert_allclose(res.a, [[np.exp(a * ts)]], rtol=1e-12)
    np.testing.assert_allclose(res.b_o, expected, rtol=1e-11)


@pytest.mark.parametrize("tableau", ["rk4", "euler", "heun", "gauss2"])
def test_doubling_equals_fixed_step(tableau) -> None:
    coeffs = stack_mimo(random_system(1))
    q_c = np.diag([1.0, 3.0])
    fixed = solve_fixed_step(coeffs, q_c, n=2**6, tab=tableau)
    doubled = solve_step_doubling(coeffs, q_c, j=6, tab=tableau)

    for name in OUTPUTS:
        assert _rel(getattr(doubled, name), getattr(fixed, name)) <= 1e-12, name
    assert doubled.rho_w == pytest.approx(fixed.rho_w, rel=1e-12)
    assert doubled.n_steps == fixed.n_steps == 64
    assert doubled.tableau == fixed.tableau == tableau


def test_methods_agree() -> None:
    coeffs = stack_mimo(random_system(2))
    q_c = np.eye(2)
    ref = solve_matrix_exp(coeffs, q_c)
    res = solve_fixed_step(coeffs, q_c, n=2**10)

    errors = compare(res, ref)
    assert set(errors) == {"A", "B_o", "R_ww", "M", "Q"}
    assert max(errors.values()) <= 1e-10
    assert res.rho_w == pytest.approx(ref.rho_w, rel=1e-9)
    assert all(v == 0.0 for v in compare(ref, ref).values())


def test_rk4_converges_with_fourth_order() -> None:
    coeffs = stack_mimo(random_system(7, n_z=1, n_u=1, order=3, noise=False))
    q_c = np.eye(1)
    ref = solve_matrix_exp(coeffs, q_c)
    steps = np.array([16, 32, 64, 128, 256])
    errors = [np.linalg.norm(solve_fixed_step(coeffs, q_c, n=int(n)).q - ref.q, np.inf) for n in steps]
    slope = -np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope >= 3.5


def test_euler_converges_with_first_order() -> None:
    coeffs = stack_mimo(random_system(7, n_z=1, n_u=1, order=3, noise=False))
    ref = solve_matrix_exp(coeffs, np.eye(1))
    steps = np.array([64, 128, 256, 512])
    errors = [np.linalg.norm(solve_fixed_step(coeffs, np.eye(1), n=int(n), tab="euler").a - ref.a, np.inf) for n in steps]
    slope = -np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_doubling_series_is_geometric() -> None:
    rng = np.random.default_rng(9)
    lam = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
    omega = np.eye(4) + 0.05 * rng.standard_normal((4, 4))
    r_bar = np.eye(3)
    j = 3
    series = step_doubling_series(lam, omega, np.eye(4), r_bar, j)
    n = 2**j

    powers = [np.linalg.matrix_power(lam, k) for k in range(n)]
    assert series.n == n
    np.testing.assert_allclose(series.a_tilde, np.linalg.matrix_power(lam, n), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(series.b_tilde, sum(powers), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(series.h_tilde, np.linalg.matrix_power(omega, n), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(series.m_tilde, sum(np.linalg.matrix_power(omega, k) for k in range(n)), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(series.r_tilde, sum(p @ p.T for p in powers), rtol=1e-12, atol=1e-13)
    running = [sum((p @ p.T for p in powers[:k]), np.zeros((3, 3))) for k in range(n)]
    np.testing.assert_allclose(series.t_tilde, sum(running), rtol=1e-12, atol=1e-13)


def test_doubling_series_without_passes() -> None:
    lam = np.diag([0.5, 0.25])
    series = step_doubling_series(lam, np.eye(2), np.eye(2), np.eye(2), 0)
    assert series.n == 1
    np.testing.assert_array_equal(series.a_tilde, lam)
    np.testing.assert_array_equal(series.t_tilde, np.zeros((2, 2)))


def test_step_count_errors() -> None:
    coeffs = stack_mimo(scalar_system(INTEGRATOR))
    with pytest.raises(InvalidStepCount):
        solve_fixed_step(coeffs, [[1.0]], n=0)
    with pytest.raises(InvalidStepCount):
        solve_step_doubling(coeffs, [[1.0]], j=-1)
    with pytest.raises(InvalidStepCount):
        step_doubling_series(np.eye(1), np.eye(1), np.eye(1), np.eye(1), 1.5)


def test_solve_accepts_aliases() -> None:
    coeffs = stack_mimo(scalar_system(FIRST_ORDER))
    assert solve(coeffs, method="ode", n=4).method is Method.FIXED_STEP
    assert solve(coeffs, method="doubling", j=2).method is Method.STEP_DOUBLING
    assert solve(coeffs, method="expm").method is Method.MATRIX_EXP
    assert solve(coeffs, method="MATRIX_EXP").n_steps is None
    assert solve(coeffs, method="step_doubling", j=1).n_steps == 2
    with pytest.raises(ValueError, match="unknown method"):
        solve(coeffs, method="euler")


def test_discretize_timed() -> None:
    coeffs = stack_mimo(scalar_system(FIRST_ORDER))
    res = discretize_timed(solve_fixed_step, coeffs, [[1.0]], n=8, repeats=3)
    assert res.wall_time >= 0.0
    assert res.n_steps == 8
    with pytest.raises(InvalidStepCount):
        discretize_timed(solve_fixed_step, coeffs, repeats=0)


@pytest.mark.parametrize("seed", range(10))
def test_weights_are_symmetric_psd(seed) -> None:
    coeffs = stack_mimo(random_system(seed))
    for method in Method:
        res = solve(coeffs, np.eye(2), method=method, n=2**8, j=8)
        for mat in (res.q, res.r_ww):
            np.testing.assert_array_equal(mat, mat.T)
            assert np.linalg.eigvalsh(mat).min() >= -1e-12 * max(1.0, np.abs(mat).max())
