import numpy as np
import pytest

from lqd import (
    DimensionMismatch,
    InvalidStepCount,
    LqOdeState,
    NonFiniteValue,
    build_blocks,
    gamma_eval,
    integrate_reference,
    rhs_full,
    solve_matrix_exp,
    stack_mimo,
    symmetric_part,
)
from tests import random_system


def _coeffs(seed: int = 0):
    return stack_mimo(random_system(seed, n_z=2, n_u=1, order=2))


def test_symmetric_part() -> None:
    x = np.array([[1.0, 2.0], [4.0, 3.0]])
    np.testing.assert_array_equal(symmetric_part(x), [[1.0, 3.0], [3.0, 3.0]])


def test_initial_state() -> None:
    coeffs = _coeffs()
    s = LqOdeState.initial(coeffs)
    n = coeffs.n_x + coeffs.n_o
    np.testing.assert_array_equal(s.a_t, np.eye(coeffs.n_x))
    np.testing.assert_array_equal(s.a_v_t, np.eye(coeffs.n_x))
    assert s.b_o_t.shape == (coeffs.n_x, coeffs.n_o)
    assert s.q_t.shape == (n, n) and not s.q_t.any()
    assert s.m_t.shape == (n, coeffs.n_z)
    assert s.rho_w_t == 0.0


def test_rhs_at_start() -> None:
    coeffs = _coeffs()
    q_c = np.diag([1.0, 2.0])
    deriv = rhs_full(0.0, LqOdeState.initial(coeffs), coeffs, q_c)
    out = coeffs.output_map

    np.testing.assert_allclose(deriv.a_t, coeffs.a_c)
    np.testing.assert_allclose(deriv.a_v_t, coeffs.v_a_c)
    np.testing.assert_allclose(deriv.b1_t, coeffs.b_1c)
    np.testing.assert_allclose(deriv.b2_t, coeffs.b_bar_2c)
    np.testing.assert_allclose(deriv.q_t, out.T @ q_c @ out)
    np.testing.assert_allclose(deriv.m_t, -out.T @ q_c)
    np.testing.assert_allclose(deriv.r_ww_t, coeffs.g_c @ coeffs.g_c.T)
    assert deriv.rho_w_t == 0.0


def test_rhs_rejects_nonfinite_state() -> None:
    coeffs = _coeffs()
    s = LqOdeState.initial(coeffs)
    a_t = s.a_t.copy()
    a_t[0, 0] = np.inf
    with pytest.raises(NonFiniteValue):
        rhs_full(0.0, s._replace(a_t=a_t), coeffs, np.eye(2))


def test_rhs_rejects_weight_shape() -> None:
    coeffs = _coeffs()
    with pytest.raises(DimensionMismatch):
        rhs_full(0.0, LqOdeState.initial(coeffs), coeffs, np.eye(3))


def test_reference_integration_matches_matrix_exponential() -> None:
    coeffs = _coeffs(4)
    q_c = np.array([[2.0, 0.5], [0.5, 1.0]])
    s = integrate_reference(coeffs, q_c, steps=1000)
    res = solve_matrix_exp(coeffs, q_c)

    np.testing.assert_allclose(s.a_t, res.a, atol=1e-10)
    np.testing.assert_allclose(s.b_o_t, res.b_o, atol=1e-10)
    np.testing.assert_allclose(s.q_t, res.q, atol=1e-9)
    np.testing.assert_allclose(s.m_t, res.m, atol=1e-9)
    np.testing.assert_allclose(s.r_ww_t, res.r_ww, atol=1e-10)
    assert s.rho_w_t == pytest.approx(res.rho_w, rel=1e-8)


def test_reference_integration_rejects_steps() -> None:
    with pytest.raises(InvalidStepCount):
        integrate_reference(_coeffs(), np.eye(2), steps=0)


def test_block_decomposition() -> None:
    coeffs = _coeffs(2)
    blocks = build_blocks(coeffs, np.eye(2))
    n = coeffs.n_x + coeffs.n_o
    assert blocks.h_c.shape == (3 * n, 3 * n)
    assert blocks.n == n

    np.testing.assert_allclose(blocks.gamma_block(0.0), np.eye(n), atol=1e-15)

    res = solve_matrix_exp(coeffs, np.eye(2))
    full = blocks.gamma_block(coeffs.sample_time)
    np.testing.assert_allclose(full[: coeffs.n_x, : coeffs.n_x], res.a, atol=1e-12)
    np.testing.assert_allclose(full[: coeffs.n_x, coeffs.n_x :], res.b_o, atol=1e-12)
    np.testing.assert_allclose(full[coeffs.n_x :], np.hstack([np.zeros((coeffs.n_o, coeffs.n_x)), np.eye(coeffs.n_o)]), atol=1e-12)


def test_gamma_eval() -> None:
    a_t = np.array([[2.0]])
    b_o_t = np.array([[1.0, 3.0]])
    c_c = np.array([[0.5], [1.0]])
    d_o = np.array([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(gamma_eval(a_t, b_o_t, c_c, d_o), [[1.0, 0.5, 2.5], [2.0, 1.0, 3.0]])

    with pytest.raises(DimensionMismatch):
        gamma_eval(a_t, b_o_t, c_c, d_o[:, :1])
