from __future__ import annotations

import logging
from typing import TYPE_CHECKING, NamedTuple, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import block_diag

from .errors import DimensionMismatch, InvalidStepCount, NonFiniteValue
from .mixins import Frozen

if TYPE_CHECKING:
    from .delay_model import StackedCoefficients

__all__ = (
    "LqOdeState",
    "BlockDecomposition",
    "symmetric_part",
    "gamma_eval",
    "rhs_full",
    "build_blocks",
    "integrate_reference",
)

log = logging.getLogger(__name__)


def symmetric_part(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def _weights(coeffs: StackedCoefficients, q_c, g_c):
    n_z = coeffs.n_z
    q_c = np.asarray(q_c, dtype=float)
    if q_c.shape != (n_z, n_z):
        raise DimensionMismatch(f"q_c must be {n_z}x{n_z}, got {q_c.shape}")
    g_c = coeffs.g_c if g_c is None else np.asarray(g_c, dtype=float)
    if g_c.ndim != 2 or g_c.shape[0] != coeffs.n_x:
        raise DimensionMismatch(f"g_c must have {coeffs.n_x} rows, got shape {g_c.shape}")
    return q_c, g_c


class LqOdeState(NamedTuple):
    """The state of the discretization ODEs at time ``t``.

    ``rho_w_t`` is the running integral of ``tr(C_c' Q_c C_c R_ww(s))``.
    """

    a_t: np.ndarray
    a_v_t: np.ndarray
    b1_t: np.ndarray
    b2_t: np.ndarray
    q_t: np.ndarray
    m_t: np.ndarray
    r_ww_t: np.ndarray
    rho_w_t: float

    @classmethod
    def initial(cls, coeffs: StackedCoefficients) -> LqOdeState:
        """The state at ``t = 0``: ``A = A_v = I`` and everything else zero."""
        n_x, n_o, n_z = coeffs.n_x, coeffs.n_o, coeffs.n_z
        n = n_x + n_o
        return cls(
            a_t=np.eye(n_x),
            a_v_t=np.eye(n_x),
            b1_t=np.zeros((n_x, n_o)),
            b2_t=np.zeros((n_x, n_o)),
            q_t=np.zeros((n, n)),
            m_t=np.zeros((n, n_z)),
            r_ww_t=np.zeros((n_x, n_x)),
            rho_w_t=0.0,
        )

    @property
    def b_o_t(self) -> np.ndarray:
        return self.b1_t + self.b2_t


class BlockDecomposition(Frozen):
    """Constant matrices of the decomposition ``[A(t), B_o(t); 0, I] = E_1 e^{H_c t} E_2``
    and the constant weights of the quadratic terms.

    Attributes
    -----------
    h_c: :class:`numpy.ndarray`
        ``diag(H_1c, H_2c, H_3c)``, ``3 (n_x + n_o)`` square.
    e_1: :class:`numpy.ndarray`
        ``[I, I, -I]``.
    e_2: :class:`numpy.ndarray`
        ``[I; I; I]``.
    q_bar_c: :class:`numpy.ndarray`
        ``[C_c, D_o]' Q_c [C_c, D_o]``.
    m_bar_c: :class:`numpy.ndarray`
        ``-[C_c, D_o]' Q_c``.
    r_bar_wwc: :class:`numpy.ndarray`
        ``G_c G_c'``.
    """

    __slots__ = ("h_c", "e_1", "e_2", "q_bar_c", "m_bar_c", "r_bar_wwc", "n_x", "n_o")

    if TYPE_CHECKING:
        h_c: np.ndarray
        e_1: np.ndarray
        e_2: np.ndarray
        q_bar_c: np.ndarray
        m_bar_c: np.ndarray
        r_bar_wwc: np.ndarray
        n_x: int
        n_o: int

    def __init__(self, **fields):
        self._set(**fields)

    @property
    def n(self) -> int:
        return self.n_x + self.n_o

    def gamma_block(self, t: float) -> np.ndarray:
        """Evaluates ``E_1 e^{H_c t} E_2`` with the package's own exponential."""
        from .solvers import expm

        return self.e_1 @ expm(self.h_c * t) @ self.e_2

    def __repr__(self):
        return f"<BlockDecomposition n_x={self.n_x} n_o={self.n_o}>"


def gamma_eval(a_t, b_o_t, c_c, d_o) -> np.ndarray:
    """Returns ``Gamma(t) = [C_c, D_o] [A(t), B_o(t); 0, I]``, the map from ``[x_k; u_o]``
    to the output at ``t_k + t``.

    Raises
    -------
    ~lqd.DimensionMismatch
        The matrices are not conformable.
    """
    a_t = np.asarray(a_t, dtype=float)
    b_o_t = np.asarray(b_o_t, dtype=float)
    c_c = np.asarray(c_c, dtype=float)
    d_o = np.asarray(d_o, dtype=float)
    n_x = a_t.shape[0]
    if (
        a_t.shape != (n_x, n_x)
        or b_o_t.shape[0] != n_x
        or c_c.shape[1] != n_x
        or d_o.shape != (c_c.shape[0], b_o_t.shape[1])
    ):
        raise DimensionMismatch(
            f"cannot form Gamma from a{a_t.shape}, b_o{b_o_t.shape}, c_c{c_c.shape}, d_o{d_o.shape}"
        )
    return np.hstack([c_c @ a_t, c_c @ b_o_t + d_o])


def rhs_full(t: float, s: LqOdeState, coeffs: StackedCoefficients, q_c, g_c=None) -> LqOdeState:
    """The right-hand side of the discretization ODEs at ``(t, s)``.

    The system is autonomous, ``t`` is accepted for the integrator signature only.

    Raises
    -------
    ~lqd.NonFiniteValue
        The state has NaN or Inf entries.
    """
    q_c, g_c = _weights(coeffs, q_c, g_c)
    for field, value in zip(s._fields, s):
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"ODE state {field} has nonfinite entries at t={t!r}")

    gamma = gamma_eval(s.a_t, s.b_o_t, coeffs.c_c, coeffs.d_o)
    phi = s.a_t @ g_c
    c_c = coeffs.c_c
    q_ww = c_c.T @ q_c @ c_c

    return LqOdeState(
        a_t=coeffs.a_c @ s.a_t,
        a_v_t=coeffs.v_a_c @ s.a_v_t,
        b1_t=s.a_t @ coeffs.b_1c,
        b2_t=s.a_v_t @ coeffs.b_bar_2c,
        q_t=symmetric_part(gamma.T @ q_c @ gamma),
        m_t=-gamma.T @ q_c,
        r_ww_t=symmetric_part(phi @ phi.T),
        rho_w_t=float(np.trace(q_ww @ s.r_ww_t)),
    )


def build_blocks(coeffs: StackedCoefficients, q_c, g_c=None) -> BlockDecomposition:
    """Builds ``H_c``, ``E_1``, ``E_2`` and the constant weights ``Q_bar_c``, ``M_bar_c``
    and ``R_bar_wwc``.

    ``H_2c`` and ``H_3c`` use ``V A_c``, the generator of ``A_v(t)``.
    """
    q_c, g_c = _weights(coeffs, q_c, g_c)
    n_x, n_o = coeffs.n_x, coeffs.n_o
    n = n_x + n_o
    zero_x = np.zeros((n_x, n_o))
    low = np.zeros((n_o, n))

    def block(a, b):
        return np.vstack([np.hstack([a, b]), low])

    v_a_c = coeffs.v_a_c
    h_c = block_diag(
        block(coeffs.a_c, coeffs.b_1c),
        block(v_a_c, coeffs.b_bar_2c),
        block(v_a_c, zero_x),
    )
    eye = np.eye(n)
    e_1 = np.hstack([eye, eye, -eye])
    e_2 = np.vstack([eye, eye, eye])

    out = coeffs.output_map
    return BlockDecomposition(
        h_c=h_c,
        e_1=e_1,
        e_2=e_2,
        q_bar_c=symmetric_part(out.T @ q_c @ out),
        m_bar_c=-out.T @ q_c,
        r_bar_wwc=g_c @ g_c.T,
        n_x=n_x,
        n_o=n_o,
    )


def integrate_reference(
    coeffs: StackedCoefficients,
    q_c,
    g_c=None,
    t: Optional[float] = None,
    steps: int = 1000,
) -> LqOdeState:
    """Integrates :func:`rhs_full` from ``0`` to ``t`` (the sample time by default) with
    :func:`scipy.integrate.solve_ivp` (``DOP853``, ``rtol = atol = 1e-12``).

    ``steps`` bounds the step size to ``t / steps``. This is the slow reference path;
    the solvers never call it.

    Raises
    -------
    ~lqd.InvalidStepCount
        ``steps`` is not positive.
    ~lqd.NonFiniteValue
        The integrator failed to reach ``t``.
    """
    if steps < 1:
        raise InvalidStepCount(f"steps must be positive, got {steps}")
    t_end = coeffs.sample_time if t is None else float(t)
    s0 = LqOdeState.initial(coeffs)
    shapes = [np.shape(x) for x in s0]
    sizes = [int(np.prod(shape)) for shape in shapes]
    cuts = np.cumsum(sizes)[:-1]

    def unflatten(y: np.ndarray) -> LqOdeState:
        parts = np.split(y, cuts)
        fields = [p.reshape(shape) for p, shape in zip(parts, shapes)]
        fields[-1] = float(fields[-1])
        return LqOdeState(*fields)

    def flatten(s: LqOdeState) -> np.ndarray:
        return np.concatenate([np.ravel(x) for x in s])

    def fun(t_k: float, y: np.ndarray) -> np.ndarray:
        return flatten(rhs_full(t_k, unflatten(y), coeffs, q_c, g_c))

    if t_end == 0.0:
        return s0
    sol = solve_ivp(
        fun,
        (0.0, t_end),
        flatten(s0),
        method="DOP853",
        rtol=1e-12,
        atol=1e-12,
        max_step=abs(t_end) / steps,
    )
    if not sol.success:
        raise NonFiniteValue(f"reference integration stopped early: {sol.message}")
    log.debug("reference integration took %d evaluations", sol.nfev)
    s = unflatten(sol.y[:, -1])
    return s._replace(q_t=symmetric_part(s.q_t), r_ww_t=symmetric_part(s.r_ww_t))
