from __future__ import annotations

import logging
import math
import statistics
import time
from typing import TYPE_CHECKING, Callable, Dict, List, NamedTuple, Optional, Union

import numpy as np
import scipy.linalg
from numpy.polynomial.legendre import leggauss
from scipy.linalg import block_diag

from .constants import DEFAULT_TABLEAU, TABLEAUS
from .enums import Method
from .errors import DimensionMismatch, InvalidStepCount, InvalidTableau, NonFiniteValue, SingularStageSystem
from .mixins import Frozen
from .ode_rhs import build_blocks, gamma_eval, symmetric_part

if TYPE_CHECKING:
    from .delay_model import StackedCoefficients

__all__ = (
    "ButcherTableau",
    "StageCoefficients",
    "DiscretizationResult",
    "DoublingSeries",
    "expm",
    "stage_coefficients",
    "solve_fixed_step",
    "solve_matrix_exp",
    "solve_step_doubling",
    "step_doubling_series",
    "solve",
    "discretize_timed",
    "compare",
)

log = logging.getLogger(__name__)

TableauLike = Union["ButcherTableau", str, None]

# diagonal Pade degrees and the 1-norm bound below which each is accurate to double precision
_PADE_THETA = (
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
)
_THETA_13 = 5.371920351148152e0

_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (
        17643225600.0,
        8821612800.0,
        2075673600.0,
        302702400.0,
        30270240.0,
        2162160.0,
        110880.0,
        3960.0,
        90.0,
        1.0,
    ),
    13: (
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ),
}

# nodes of the Gauss-Legendre rule used for the matrix-exponential rho_w
_GAUSS_NODES = 10


class ButcherTableau(Frozen):
    """Represents a Runge-Kutta method.

    Attributes
    -----------
    name: :class:`str`
        The tableau name, ``"custom"`` if built by hand.
    a: :class:`numpy.ndarray`
        The ``s x s`` stage coefficients.
    b: :class:`numpy.ndarray`
        The weights. They sum to one.
    c: :class:`numpy.ndarray`
        The nodes, row sums of ``a`` unless given.
    order: Optional[:class:`int`]
        The classical order, if known.
    """

    __slots__ = ("name", "a", "b", "c", "order")

    if TYPE_CHECKING:
        name: str
        a: np.ndarray
        b: np.ndarray
        c: np.ndarray
        order: Optional[int]

    def __init__(self, a, b, c=None, *, name: str = "custom", order: Optional[int] = None):
        a = np.array(a, dtype=float)
        b = np.array(b, dtype=float).reshape(-1)
        s = b.size
        if s == 0 or a.shape != (s, s):
            raise InvalidTableau(f"tableau {name!r}: a has shape {a.shape}, b has {s} entries")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidTableau(f"tableau {name!r} has nonfinite coefficients")
        if abs(b.sum() - 1.0) > 1e-12:
            raise InvalidTableau(f"tableau {name!r}: weights sum to {b.sum()!r}, not 1")
        c = a.sum(axis=1) if c is None else np.array(c, dtype=float).reshape(s)
        self._set(name=name, a=a, b=b, c=c, order=order)

    @classmethod
    def from_name(cls, name: str) -> ButcherTableau:
        """Returns one of the built-in tableaus.

        Raises
        -------
        ~lqd.InvalidTableau
            No tableau goes by that name.
        """
        try:
            a, b, order = TABLEAUS[name.lower()]
        except KeyError:
            raise InvalidTableau(f"unknown tableau {name!r}, choose one of: {', '.join(TABLEAUS)}") from None
        return cls(a, b, name=name.lower(), order=order)

    @classmethod
    def resolve(cls, tab: TableauLike) -> ButcherTableau:
        if tab is None:
            return cls.from_name(DEFAULT_TABLEAU)
        if isinstance(tab, str):
            return cls.from_name(tab)
        return tab

    @property
    def s(self) -> int:
        return self.b.size

    @property
    def explicit(self) -> bool:
        """:class:`bool`: Whether ``a`` is strictly lower triangular."""
        return not np.any(np.triu(self.a))

    @property
    def stage_weights(self) -> np.ndarray:
        """:class:`numpy.ndarray`: ``beta_j = sum_i b_i a_ij``, the weights of the stage
        values inside a second quadrature.
        """
        return self.b @ self.a

    def __repr__(self):
        return f"<ButcherTableau name={self.name!r} s={self.s} explicit={self.explicit}>"


class StageCoefficients(Frozen):
    """Per-step coefficients of a tableau on the ODE generators, for one step size.

    ``Lambda_i = I + h sum_j a_ij A_c Lambda_j`` and ``theta_1_i = sum_j a_ij Lambda_j``;
    ``lambda_`` and ``theta_1`` are the step-end combinations. The ``_v`` and ``omega``
    variants use ``V A_c`` and ``H_c``. ``omega_i`` and ``omega`` are ``None`` when no
    ``H_c`` was given.
    """

    __slots__ = (
        "h",
        "lambda_i",
        "lambda_v_i",
        "omega_i",
        "theta_1_i",
        "theta_2_i",
        "lambda_",
        "lambda_v",
        "omega",
        "theta_1",
        "theta_2",
    )

    if TYPE_CHECKING:
        h: float
        lambda_i: List[np.ndarray]
        lambda_v_i: List[np.ndarray]
        omega_i: Optional[List[np.ndarray]]
        theta_1_i: List[np.ndarray]
        theta_2_i: List[np.ndarray]
        lambda_: np.ndarray
        lambda_v: np.ndarray
        omega: Optional[np.ndarray]
        theta_1: np.ndarray
        theta_2: np.ndarray

    def __init__(self, **fields):
        self._set(**fields)


class DiscretizationResult(Frozen):
    """The discrete LQ coefficients over one sample interval.

    Attributes
    -----------
    a: :class:`numpy.ndarray`
        ``A(T_s)``.
    b_o: :class:`numpy.ndarray`
        ``B_o(T_s) = B_1(T_s) + B_2(T_s)``, acting on the stacked input.
    q: :class:`numpy.ndarray`
        The stage weight over ``[x_k; u_o]``.
    m: :class:`numpy.ndarray`
        The reference cross weight, ``q_k = M zbar_k``.
    r_ww: :class:`numpy.ndarray`
        The process-noise covariance ``R_ww(T_s)``.
    gamma: :class:`numpy.ndarray`
        ``Gamma(T_s)``.
    rho_w: :class:`float`
        ``int_0^Ts tr(C_c' Q_c C_c R_ww(t)) dt``.
    method: :class:`Method`
        The method that produced the result.
    n_steps: Optional[:class:`int`]
        The number of integration steps; ``None`` for the matrix exponential.
    tableau: Optional[:class:`str`]
        The tableau name, ``None`` for the matrix exponential.
    wall_time: :class:`float`
        Seconds spent in the solve.
    sample_time: :class:`float`
        ``T_s``.
    """

    __slots__ = (
        "a",
        "b_o",
        "q",
        "m",
        "r_ww",
        "gamma",
        "rho_w",
        "method",
        "n_steps",
        "tableau",
        "wall_time",
        "sample_time",
    )

    if TYPE_CHECKING:
        a: np.ndarray
        b_o: np.ndarray
        q: np.ndarray
        m: np.ndarray
        r_ww: np.ndarray
        gamma: np.ndarray
        rho_w: float
        method: Method
        n_steps: Optional[int]
        tableau: Optional[str]
        wall_time: float
        sample_time: float

    def __init__(self, **fields):
        for name in ("a", "b_o", "q", "m", "r_ww", "gamma"):
            if not np.all(np.isfinite(fields[name])):
                raise NonFiniteValue(f"{fields['method']} produced nonfinite entries in {name}")
        if not math.isfinite(fields["rho_w"]):
            raise NonFiniteValue(f"{fields['method']} produced a nonfinite rho_w")
        self._set(**fields)

    def with_wall_time(self, wall_time: float) -> DiscretizationResult:
        fields = {name: getattr(self, name) for name in self.__slots__}
        fields["wall_time"] = wall_time
        return DiscretizationResult(**fields)

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    def matrices(self) -> Dict[str, np.ndarray]:
        return {"A": self.a, "B_o": self.b_o, "Q": self.q, "M": self.m, "R_ww": self.r_ww, "Gamma": self.gamma}

    def __repr__(self):
        return (
            f"<DiscretizationResult method={self.method} n_steps={self.n_steps} "
            f"tableau={self.tableau!r} wall_time={self.wall_time:.3g}>"
        )


class DoublingSeries(NamedTuple):
    """The step-doubling functions after ``n`` steps."""

    a_tilde: np.ndarray
    b_tilde: np.ndarray
    h_tilde: np.ndarray
    m_tilde: np.ndarray
    q_tilde: np.ndarray
    r_tilde: np.ndarray
    t_tilde: np.ndarray
    n: int


def _pade(x: np.ndarray, m: int):
    b = _PADE_COEFFS[m]
    eye = np.eye(x.shape[0])
    x2 = x @ x
    if m == 13:
        x4 = x2 @ x2
        x6 = x4 @ x2
        u = x @ (x6 @ (b[13] * x6 + b[11] * x4 + b[9] * x2) + b[7] * x6 + b[5] * x4 + b[3] * x2 + b[1] * eye)
        v = x6 @ (b[12] * x6 + b[10] * x4 + b[8] * x2) + b[6] * x6 + b[4] * x4 + b[2] * x2 + b[0] * eye
        return u, v

    powers = [eye]
    for _ in range(m // 2):
        powers.append(powers[-1] @ x2)
    u = x @ sum(b[2 * k + 1] * p for k, p in enumerate(powers))
    v = sum(b[2 * k] * p for k, p in enumerate(powers))
    return u, v


def expm(x) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant.

    The degree and the number of squarings are picked from the 1-norm of ``x``.

    Raises
    -------
    ~lqd.NonFiniteValue
        ``x`` has NaN or Inf entries.
    ~lqd.DimensionMismatch
        ``x`` is not square.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionMismatch(f"expm needs a square matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue("expm argument has nonfinite entries")
    if x.shape[0] == 0:
        return np.zeros((0, 0))

    norm = np.linalg.norm(x, 1)
    for m, theta in _PADE_THETA:
        if norm <= theta:
            u, v = _pade(x, m)
            return scipy.linalg.solve(v - u, v + u)

    squarings = max(0, int(math.ceil(math.log2(norm / _THETA_13))))
    u, v = _pade(x / 2.0**squarings, 13)
    r = scipy.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        r = r @ r
    if not np.all(np.isfinite(r)):
        raise NonFiniteValue("expm overflowed")
    return r


def _stage_values(tab: ButcherTableau, h: float, gen: np.ndarray) -> List[np.ndarray]:
    # solves K_i = I + h sum_j a_ij gen K_j
    n = gen.shape[0]
    eye = np.eye(n)
    s = tab.s

    if tab.explicit:
        values: List[np.ndarray] = []
        for i in range(s):
            acc = eye.copy()
            for j in range(i):
                if tab.a[i, j] != 0.0:
                    acc += (h * tab.a[i, j]) * (gen @ values[j])
            values.append(acc)
        return values

    system = np.eye(s * n) - h * np.kron(tab.a, gen)
    if np.linalg.cond(system) > 1e14:
        raise SingularStageSystem(f"stage system of {tab.name!r} is singular at h={h!r}")
    try:
        sol = scipy.linalg.solve(system, np.tile(eye, (s, 1)))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularStageSystem(f"stage system of {tab.name!r} is singular at h={h!r}") from exc
    return [sol[i * n : (i + 1) * n] for i in range(s)]


def _combine(tab: ButcherTableau, h: float, gen: np.ndarray, values: List[np.ndarray]):
    theta_i = [sum(tab.a[i, j] * values[j] for j in range(tab.s)) for i in range(tab.s)]
    theta = sum(tab.b[i] * values[i] for i in range(tab.s))
    step = np.eye(gen.shape[0]) + h * (gen @ theta)
    return theta_i, theta, step


def stage_coefficients(tab: ButcherTableau, h: float, a_c, v_a_c, h_c=None) -> StageCoefficients:
    """Solves the linear stage relations of ``tab`` for ``A_c``, ``V A_c`` and, when given,
    ``H_c``. Explicit tableaus are solved by forward substitution, implicit ones as one
    linear system.

    Raises
    -------
    ~lqd.SingularStageSystem
        The implicit stage system has no unique solution at this step size.
    """
    if not h > 0:
        raise InvalidStepCount(f"step size must be positive, got {h!r}")
    a_c = np.asarray(a_c, dtype=float)
    v_a_c = np.asarray(v_a_c, dtype=float)

    lam_i = _stage_values(tab, h, a_c)
    lam_v_i = _stage_values(tab, h, v_a_c)
    theta_1_i, theta_1, lam = _combine(tab, h, a_c, lam_i)
    theta_2_i, theta_2, lam_v = _combine(tab, h, v_a_c, lam_v_i)

    omega_i = omega = None
    if h_c is not None:
        h_c = np.asarray(h_c, dtype=float)
        omega_i = _stage_values(tab, h, h_c)
        _, _, omega = _combine(tab, h, h_c, omega_i)

    return StageCoefficients(
        h=h,
        lambda_i=lam_i,
        lambda_v_i=lam_v_i,
        omega_i=omega_i,
        theta_1_i=theta_1_i,
        theta_2_i=theta_2_i,
        lambda_=lam,
        lambda_v=lam_v,
        omega=omega,
        theta_1=theta_1,
        theta_2=theta_2,
    )


def _prepare(coeffs: StackedCoefficients, q_c, g_c, ts):
    q_c = np.zeros((coeffs.n_z, coeffs.n_z)) if q_c is None else np.asarray(q_c, dtype=float)
    ts = coeffs.sample_time if ts is None else float(ts)
    if not ts > 0:
        raise InvalidStepCount(f"sample time must be positive, got {ts!r}")
    blocks = build_blocks(coeffs, q_c, g_c)
    g = coeffs.g_c if g_c is None else np.asarray(g_c, dtype=float)
    q_ww = coeffs.c_c.T @ q_c @ coeffs.c_c
    return q_c, g, ts, blocks, q_ww


def solve_fixed_step(
    coeffs: StackedCoefficients,
    q_c=None,
    g_c=None,
    ts: Optional[float] = None,
    n: int = 2**14,
    tab: TableauLike = None,
) -> DiscretizationResult:
    """Integrates the discretization ODEs with ``n`` fixed steps of a Runge-Kutta method,
    using stage coefficients computed once for the step size ``ts / n``.

    Parameters
    -----------
    coeffs: :class:`StackedCoefficients`
        The stacked continuous system.
    q_c: Optional[:class:`numpy.ndarray`]
        Output weight, zero if omitted.
    g_c: Optional[:class:`numpy.ndarray`]
        Process-noise gain, ``coeffs.g_c`` if omitted.
    ts: Optional[:class:`float`]
        Sample time, ``coeffs.sample_time`` if omitted.
    n: :class:`int`
        Number of steps.
    tab: Union[:class:`ButcherTableau`, :class:`str`, None]
        The method, classic RK4 if omitted.

    Raises
    -------
    ~lqd.InvalidStepCount
        ``n`` is not positive.
    """
    if int(n) != n or n < 1:
        raise InvalidStepCount(f"n must be a positive integer, got {n!r}")
    n = int(n)
    tab = ButcherTableau.resolve(tab)
    start = time.perf_counter()

    q_c, g, ts, blocks, q_ww = _prepare(coeffs, q_c, g_c, ts)
    h = ts / n
    sc = stage_coefficients(tab, h, coeffs.a_c, coeffs.v_a_c)

    n_x, n_o = coeffs.n_x, coeffs.n_o
    b1_bar = h * coeffs.b_1c
    b2_bar = h * coeffs.b_bar_2c
    q_bar, m_bar = blocks.q_bar_c, blocks.m_bar_c
    weights = tab.b
    beta = tab.stage_weights
    b_sum = weights.sum()

    a = np.eye(n_x)
    a_v = np.eye(n_x)
    b1 = np.zeros((n_x, n_o))
    b2 = np.zeros((n_x, n_o))
    q = np.zeros((n_x + n_o, n_x + n_o))
    m = np.zeros((n_x + n_o, coeffs.n_z))
    r = np.zeros((n_x, n_x))
    rho = 0.0
    gam = np.eye(n_x + n_o)

    for _ in range(n):
        b_o = b1 + b2
        ab1 = a @ b1_bar
        avb2 = a_v @ b2_bar
        q_inc = np.zeros_like(q)
        m_inc = np.zeros_like(m)
        r_inc = np.zeros_like(r)
        rho_inc = b_sum * np.trace(q_ww @ r)

        for i in range(tab.s):
            a_i = sc.lambda_i[i] @ a
            phi = a_i @ g
            if weights[i] != 0.0:
                gam[:n_x, :n_x] = a_i
                gam[:n_x, n_x:] = b_o + sc.theta_1_i[i] @ ab1 + sc.theta_2_i[i] @ avb2
                q_inc += weights[i] * (gam.T @ q_bar @ gam)
                m_inc += weights[i] * (gam.T @ m_bar)
                r_inc += weights[i] * (phi @ phi.T)
            if beta[i] != 0.0:
                rho_inc += h * beta[i] * np.trace(q_ww @ phi @ phi.T)

        q = symmetric_part(q + h * q_inc)
        m = m + h * m_inc
        rho += h * rho_inc
        r = symmetric_part(r + h * r_inc)
        b1 = b1 + sc.theta_1 @ ab1
        b2 = b2 + sc.theta_2 @ avb2
        a = sc.lambda_ @ a
        a_v = sc.lambda_v @ a_v

    b_o = b1 + b2
    elapsed = time.perf_counter() - start
    log.debug("fixed step: tableau=%s n=%d wall=%.4fs", tab.name, n, elapsed)
    return DiscretizationResult(
        a=a,
        b_o=b_o,
        q=q,
        m=m,
        r_ww=r,
        gamma=gamma_eval(a, b_o, coeffs.c_c, coeffs.d_o),
        rho_w=float(rho),
        method=Method.FIXED_STEP,
        n_steps=n,
        tableau=tab.name,
        wall_time=elapsed,
        sample_time=ts,
    )


def _van_loan(top_left: np.ndarray, top_right: np.ndarray, bottom_right: np.ndarray, t: float):
    # exp([tl, tr; 0, br] t), returned as its (1,2) and (2,2) blocks
    k = top_left.shape[0]
    big = np.block([[top_left, top_right], [np.zeros((bottom_right.shape[0], k)), bottom_right]])
    phi = expm(big * t)
    return phi[:k, k:], phi[k:, k:]


def _noise_covariance(a_c: np.ndarray, r_bar: np.ndarray, t: float) -> np.ndarray:
    # int_0^t e^{A s} R e^{A' s} ds
    phi_12, phi_22 = _van_loan(-a_c, r_bar, a_c.T, t)
    return symmetric_part(phi_22.T @ phi_12)


def solve_matrix_exp(coeffs: StackedCoefficients, q_c=None, g_c=None, ts: Optional[float] = None) -> DiscretizationResult:
    """Computes the discrete coefficients from three block matrix exponentials.

    ``rho_w`` is a 10-point Gauss-Legendre quadrature of ``tr(C_c' Q_c C_c R_ww(t))``.
    """
    start = time.perf_counter()
    q_c, g, ts, blocks, q_ww = _prepare(coeffs, q_c, g_c, ts)
    n_x = coeffs.n_x
    h_c, e_1, e_2 = blocks.h_c, blocks.e_1, blocks.e_2
    dim = h_c.shape[0]

    phi1_12, phi1_22 = _van_loan(-h_c.T, e_1.T @ blocks.q_bar_c @ e_1, h_c, ts)
    gamma_block = e_1 @ phi1_22 @ e_2
    a = gamma_block[:n_x, :n_x]
    b_o = gamma_block[:n_x, n_x:]
    q = symmetric_part(e_2.T @ phi1_22.T @ phi1_12 @ e_2)

    phi2_12, _ = _van_loan(np.zeros((dim, dim)), np.eye(dim), h_c.T, ts)
    m = e_2.T @ phi2_12 @ e_1.T @ blocks.m_bar_c

    r_bar = blocks.r_bar_wwc
    if np.any(r_bar):
        r = _noise_covariance(coeffs.a_c, r_bar, ts)
        nodes, node_weights = leggauss(_GAUSS_NODES)
        half = ts / 2.0
        rho = half * sum(
            w * np.trace(q_ww @ _noise_covariance(coeffs.a_c, r_bar, half * (x + 1.0)))
            for x, w in zip(nodes, node_weights)
        )
    else:
        r = np.zeros((n_x, n_x))
        rho = 0.0

    elapsed = time.perf_counter() - start
    log.debug("matrix exponential: size=%d wall=%.4fs", 2 * dim, elapsed)
    return DiscretizationResult(
        a=a,
        b_o=b_o,
        q=q,
        m=m,
        r_ww=r,
        gamma=gamma_eval(a, b_o, coeffs.c_c, coeffs.d_o),
        rho_w=float(rho),
        method=Method.MATRIX_EXP,
        n_steps=None,
        tableau=None,
        wall_time=elapsed,
        sample_time=ts,
    )


def step_doubling_series(lambda_bar, omega, q_tilde_c, r_bar, j: int, n_x: Optional[int] = None) -> DoublingSeries:
    """Applies ``j`` doubling passes to the one-step functions.

    Starting from ``A~(1) = Lambda_bar``, ``B~(1) = I``, ``H~(1) = Omega``, ``M~(1) = I``,
    ``Q~(1) = Q~_c``, ``R~(1) = R_bar`` and ``T~(1) = 0``, each pass maps ``n -> 2n``::

        A~ <- A~ A~           B~ <- B~ (I + A~)
        H~ <- H~ H~           M~ <- M~ (I + H~)
        Q~ <- Q~ + H~' Q~ H~  R~ <- R~ + L R~ L'
        T~ <- T~ + n R~ + L T~ L'

    where ``L`` is the leading ``n_x`` block of ``A~`` (the power of ``Lambda``).

    Raises
    -------
    ~lqd.InvalidStepCount
        ``j`` is negative.
    """
    if int(j) != j or j < 0:
        raise InvalidStepCount(f"j must be a nonnegative integer, got {j!r}")
    lambda_bar = np.asarray(lambda_bar, dtype=float)
    omega = np.asarray(omega, dtype=float)
    r = np.array(r_bar, dtype=float)
    n_x = r.shape[0] if n_x is None else n_x

    a_t = lambda_bar
    b_t = np.eye(lambda_bar.shape[0])
    h_t = omega
    m_t = np.eye(omega.shape[0])
    q_t = np.array(q_tilde_c, dtype=float)
    t_t = np.zeros_like(r)
    count = 1

    for _ in range(int(j)):
        lead = a_t[:n_x, :n_x]
        t_t = t_t + count * r + lead @ t_t @ lead.T
        r = symmetric_part(r + lead @ r @ lead.T)
        q_t = symmetric_part(q_t + h_t.T @ q_t @ h_t)
        m_t = m_t + m_t @ h_t
        b_t = b_t + b_t @ a_t
        a_t = a_t @ a_t
        h_t = h_t @ h_t
        count *= 2

    return DoublingSeries(a_t, b_t, h_t, m_t, q_t, r, t_t, count)


def solve_step_doubling(
    coeffs: StackedCoefficients,
    q_c=None,
    g_c=None,
    ts: Optional[float] = None,
    j: int = 14,
    tab: TableauLike = None,
) -> DiscretizationResult:
    """Computes the result of :func:`solve_fixed_step` with ``n = 2**j`` in ``j``
    doubling passes.

    Raises
    -------
    ~lqd.InvalidStepCount
        ``j`` is negative.
    """
    if int(j) != j or j < 0:
        raise InvalidStepCount(f"j must be a nonnegative integer, got {j!r}")
    j = int(j)
    tab = ButcherTableau.resolve(tab)
    start = time.perf_counter()

    q_c, g, ts, blocks, q_ww = _prepare(coeffs, q_c, g_c, ts)
    n_steps = 2**j
    h = ts / n_steps
    sc = stage_coefficients(tab, h, coeffs.a_c, coeffs.v_a_c, blocks.h_c)
    n_x = coeffs.n_x
    weights = tab.b
    beta = tab.stage_weights

    lambda_bar = block_diag(sc.lambda_, sc.lambda_v)
    theta_o = np.hstack([sc.theta_1, sc.theta_2])
    b_oc = np.vstack([h * coeffs.b_1c, h * coeffs.b_bar_2c])

    e1_q_e1 = blocks.e_1.T @ blocks.q_bar_c @ blocks.e_1
    e1_m = blocks.e_1.T @ blocks.m_bar_c
    q_tilde_c = h * sum(weights[i] * (om.T @ e1_q_e1 @ om) for i, om in enumerate(sc.omega_i))
    m_tilde_c = h * sum(weights[i] * (om.T @ e1_m) for i, om in enumerate(sc.omega_i))

    series = step_doubling_series(lambda_bar, sc.omega, q_tilde_c, blocks.r_bar_wwc, j, n_x)

    a = series.a_tilde[:n_x, :n_x]
    b_o = theta_o @ series.b_tilde @ b_oc
    m = blocks.e_2.T @ series.m_tilde.T @ m_tilde_c
    q = symmetric_part(blocks.e_2.T @ series.q_tilde @ blocks.e_2)
    r = symmetric_part(h * sum(weights[i] * (lam @ series.r_tilde @ lam.T) for i, lam in enumerate(sc.lambda_i)))

    k_mat = sum(weights[i] * (lam.T @ q_ww @ lam) for i, lam in enumerate(sc.lambda_i))
    l_mat = sum(beta[i] * (lam.T @ q_ww @ lam) for i, lam in enumerate(sc.lambda_i))
    rho = h * h * (weights.sum() * np.trace(k_mat @ series.t_tilde) + np.trace(l_mat @ series.r_tilde))

    elapsed = time.perf_counter() - start
    log.debug("step doubling: tableau=%s j=%d wall=%.4fs", tab.name, j, elapsed)
    return DiscretizationResult(
        a=a,
        b_o=b_o,
        q=q,
        m=m,
        r_ww=r,
        gamma=gamma_eval(a, b_o, coeffs.c_c, coeffs.d_o),
        rho_w=float(rho),
        method=Method.STEP_DOUBLING,
        n_steps=n_steps,
        tableau=tab.name,
        wall_time=elapsed,
        sample_time=ts,
    )


def solve(
    coeffs: StackedCoefficients,
    q_c=None,
    g_c=None,
    *,
    method: Union[Method, str] = Method.MATRIX_EXP,
    n: int = 2**14,
    j: int = 14,
    tableau: TableauLike = None,
    ts: Optional[float] = None,
) -> DiscretizationResult:
    """Runs the solver selected by ``method``. ``n`` is read by the fixed-step method,
    ``j`` by step doubling, and ``tableau`` by both.
    """
    if isinstance(method, str):
        method = Method.from_alias(method)
    if method is Method.FIXED_STEP:
        return solve_fixed_step(coeffs, q_c, g_c, ts, n, tableau)
    if method is Method.STEP_DOUBLING:
        return solve_step_doubling(coeffs, q_c, g_c, ts, j, tableau)
    return solve_matrix_exp(coeffs, q_c, g_c, ts)


def discretize_timed(solver: Callable[..., DiscretizationResult], *args, repeats: int = 5, **kwargs) -> DiscretizationResult:
    """Runs ``solver(*args, **kwargs)`` ``repeats`` times and returns the last result
    carrying the median wall time.
    """
    if repeats < 1:
        raise InvalidStepCount(f"repeats must be positive, got {repeats}")
    times = []
    result = None
    for _ in range(repeats):
        result = solver(*args, **kwargs)
        times.append(result.wall_time)
    return result.with_wall_time(statistics.median(times))


def compare(result: DiscretizationResult, reference: DiscretizationResult) -> Dict[str, float]:
    """Returns ``e(i) = ||i - i_ref||_inf`` (maximum absolute row sum) for ``A``, ``B_o``,
    ``R_ww``, ``M`` and ``Q``.
    """
    pairs = {
        "A": (result.a, reference.a),
        "B_o": (result.b_o, reference.b_o),
        "R_ww": (result.r_ww, reference.r_ww),
        "M": (result.m, reference.m),
        "Q": (result.q, reference.q),
    }
    return {name: float(np.linalg.norm(x - y, np.inf)) if x.size else 0.0 for name, (x, y) in pairs.items()}
