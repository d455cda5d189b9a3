from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .delay_model import AugmentedDiscreteSystem, MimoDelaySystem, augment_discrete, stack_mimo
from .enums import Method
from .errors import DimensionMismatch, InvalidStepCount, NotSymmetric
from .mixins import Frozen
from .ode_rhs import symmetric_part
from .solvers import ButcherTableau, DiscretizationResult, solve

if TYPE_CHECKING:
    from .types import ResultPayload

__all__ = (
    "ContinuousLqProblem",
    "DiscreteLqProblem",
    "Discretizer",
    "discretize",
    "affine_terms",
    "propagate_covariance",
    "stochastic_offset",
)

log = logging.getLogger(__name__)

# tolerance for symmetry and semidefiniteness of user-supplied weights and covariances
_SYM_TOL = 1e-10


def _check_symmetric(x: np.ndarray, name: str) -> np.ndarray:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {x.shape}")
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    if x.size and np.max(np.abs(x - x.T)) > _SYM_TOL * scale:
        raise NotSymmetric(f"{name} is not symmetric")
    return symmetric_part(x)


def _check_psd(x: np.ndarray, name: str) -> np.ndarray:
    x = _check_symmetric(x, name)
    if x.size:
        scale = max(1.0, float(np.max(np.abs(x))))
        if np.linalg.eigvalsh(x).min() < -_SYM_TOL * scale:
            raise NotSymmetric(f"{name} is not positive semidefinite")
    return x


class ContinuousLqProblem(Frozen):
    """Represents a finite-horizon continuous LQ problem on a delayed system

    ``phi = int_{t_0}^{t_0 + N T_s} 1/2 ||z(t) - zbar(t)||^2_{Q_c} dt``

    with ``zbar`` held constant over each sample interval.

    Parameters
    -----------
    system: :class:`MimoDelaySystem`
        The plant.
    q_c: Optional[:class:`numpy.ndarray`]
        The output weight, symmetric positive semidefinite.
    horizon_steps: :class:`int`
        The number of sample intervals ``N``.
    references: Optional[:class:`numpy.ndarray`]
        ``N x n_z`` targets ``zbar_k``. Zero if omitted.
    x0: Optional[:class:`numpy.ndarray`]
        The initial state mean, zero if omitted.
    p0: Optional[:class:`numpy.ndarray`]
        The initial state covariance, zero if omitted.
    w_z: Optional[:class:`numpy.ndarray`]
        A factor of the weight, ``q_c = w_z' w_z``. Exclusive with ``q_c``.
    u_history: Optional[:class:`numpy.ndarray`]
        The ``m_bar`` inputs applied before ``t_0``, oldest first. Zero if omitted.
    """

    __slots__ = ("system", "q_c", "horizon_steps", "references", "x0", "p0", "u_history")

    if TYPE_CHECKING:
        system: MimoDelaySystem
        q_c: np.ndarray
        horizon_steps: int
        references: np.ndarray
        x0: np.ndarray
        p0: np.ndarray
        u_history: Optional[np.ndarray]

    def __init__(
        self,
        system: MimoDelaySystem,
        q_c=None,
        horizon_steps: int = 1,
        references=None,
        x0=None,
        p0=None,
        *,
        w_z=None,
        u_history=None,
    ):
        n_z, n_x = system.n_z, system.n_x
        if (q_c is None) == (w_z is None):
            raise DimensionMismatch("give exactly one of q_c and w_z")
        if w_z is not None:
            w_z = np.asarray(w_z, dtype=float).reshape(-1, n_z)
            q_c = w_z.T @ w_z
        q_c = _check_psd(np.array(q_c, dtype=float).reshape(n_z, n_z), "q_c")

        if int(horizon_steps) != horizon_steps or horizon_steps < 1:
            raise InvalidStepCount(f"horizon must be a positive integer, got {horizon_steps!r}")
        horizon_steps = int(horizon_steps)

        if references is None:
            refs = np.zeros((horizon_steps, n_z))
        else:
            refs = np.array(references, dtype=float)
            if refs.ndim == 1 and n_z == 1:
                refs = refs.reshape(-1, 1)
            if refs.shape != (horizon_steps, n_z):
                raise DimensionMismatch(f"references must be {horizon_steps}x{n_z}, got shape {refs.shape}")

        x0 = np.zeros(n_x) if x0 is None else np.array(x0, dtype=float).reshape(n_x)
        p0 = np.zeros((n_x, n_x)) if p0 is None else _check_psd(np.array(p0, dtype=float).reshape(n_x, n_x), "p0")
        if u_history is not None:
            u_history = np.array(u_history, dtype=float)

        self._set(
            system=system,
            q_c=q_c,
            horizon_steps=horizon_steps,
            references=refs,
            x0=x0,
            p0=p0,
            u_history=u_history,
        )

    @property
    def horizon(self) -> float:
        """:class:`float`: The horizon length ``T = N T_s``."""
        return self.horizon_steps * self.system.sample_time

    def __repr__(self):
        return f"<ContinuousLqProblem system={self.system!r} horizon_steps={self.horizon_steps}>"


class DiscreteLqProblem(Frozen):
    """Represents the discrete LQ problem

    ``min sum_k 1/2 w_k' Q w_k + q_k' w_k + rho_k (+ rho_s_k)``, ``w_k = [x~_k; u_k]``

    subject to the augmented dynamics ``sys``.

    Attributes
    -----------
    sys: :class:`AugmentedDiscreteSystem`
        The delay-free realization.
    q: :class:`numpy.ndarray`
        The stage weight.
    m: :class:`numpy.ndarray`
        The reference cross weight.
    q_k: :class:`numpy.ndarray`
        ``N`` linear terms, one row per stage.
    rho_k: :class:`numpy.ndarray`
        ``N`` constants.
    x0: :class:`numpy.ndarray`
        The augmented initial state.
    r_ww: Optional[:class:`numpy.ndarray`]
        The process-noise covariance of the plant states. ``None`` in deterministic mode.
    rho_s_k: Optional[:class:`numpy.ndarray`]
        The stochastic offsets. ``None`` in deterministic mode.
    p_k: Optional[List[:class:`numpy.ndarray`]]
        The plant-state covariances ``P_0 .. P_N``. ``None`` in deterministic mode.
    result: :class:`DiscretizationResult`
        The underlying solver output.
    """

    __slots__ = ("sys", "q", "m", "q_k", "rho_k", "x0", "r_ww", "rho_s_k", "p_k", "result")

    if TYPE_CHECKING:
        sys: AugmentedDiscreteSystem
        q: np.ndarray
        m: np.ndarray
        q_k: np.ndarray
        rho_k: np.ndarray
        x0: np.ndarray
        r_ww: Optional[np.ndarray]
        rho_s_k: Optional[np.ndarray]
        p_k: Optional[List[np.ndarray]]
        result: DiscretizationResult

    def __init__(self, **fields):
        self._set(**fields)

    @property
    def horizon_steps(self) -> int:
        return self.q_k.shape[0]

    @property
    def stochastic(self) -> bool:
        return self.rho_s_k is not None

    def stage_cost(self, k: int, x, u) -> float:
        """``l_k(x~, u)``. The stochastic offset is not included."""
        w = np.concatenate([np.asarray(x, dtype=float).reshape(-1), np.asarray(u, dtype=float).reshape(-1)])
        if w.size != self.q.shape[0]:
            raise DimensionMismatch(f"[x; u] has {w.size} entries, Q is {self.q.shape[0]} wide")
        return float(0.5 * w @ self.q @ w + self.q_k[k] @ w + self.rho_k[k])

    def objective(self, u_seq) -> float:
        """Evaluates the discrete objective of an input sequence from :attr:`x0`, adding
        the stochastic offsets when present.
        """
        u_seq = np.asarray(u_seq, dtype=float).reshape(self.horizon_steps, self.sys.n_u)
        x = self.x0
        total = 0.0
        for k, u in enumerate(u_seq):
            total += self.stage_cost(k, x, u)
            x = self.sys.a_tilde @ x + self.sys.b_tilde @ u
        if self.rho_s_k is not None:
            total += float(self.rho_s_k.sum())
        return total

    def to_payload(self) -> ResultPayload:
        """Exports every matrix as nested lists. Floats keep full precision through JSON."""
        res = self.result
        payload: Dict[str, Any] = {
            "schema": 1,
            "method": str(res.method),
            "tableau": res.tableau,
            "n_steps": res.n_steps,
            "sample_time": res.sample_time,
            "wall_time": res.wall_time,
            "n_x": self.sys.n_x,
            "m_bar": self.sys.m_bar,
            "n_u": self.sys.n_u,
            "A": res.a.tolist(),
            "B_o": res.b_o.tolist(),
            "Gamma": res.gamma.tolist(),
            "A_tilde": self.sys.a_tilde.tolist(),
            "B_tilde": self.sys.b_tilde.tolist(),
            "C_tilde": self.sys.c_tilde.tolist(),
            "D_tilde": self.sys.d_tilde.tolist(),
            "Q": self.q.tolist(),
            "M": self.m.tolist(),
            "q_k": self.q_k.tolist(),
            "rho_k": self.rho_k.tolist(),
            "x0": self.x0.tolist(),
            "rho_w": res.rho_w,
        }
        if self.stochastic:
            payload["R_ww"] = self.r_ww.tolist()
            payload["rho_s_k"] = self.rho_s_k.tolist()
        return payload  # type: ignore

    def __repr__(self):
        return (
            f"<DiscreteLqProblem sys={self.sys!r} horizon_steps={self.horizon_steps} "
            f"stochastic={self.stochastic}>"
        )


def affine_terms(m, z_bar, q_c, ts: float) -> Tuple[np.ndarray, float]:
    """Returns ``q_k = M zbar_k`` and ``rho_k = 1/2 zbar_k' Q_c zbar_k T_s``.

    Raises
    -------
    ~lqd.DimensionMismatch
        ``z_bar`` does not match ``M`` or ``Q_c``.
    """
    m = np.asarray(m, dtype=float)
    q_c = np.asarray(q_c, dtype=float)
    z_bar = np.asarray(z_bar, dtype=float).reshape(-1)
    if m.shape[1] != z_bar.size or q_c.shape != (z_bar.size, z_bar.size):
        raise DimensionMismatch(f"zbar has {z_bar.size} entries; M is {m.shape}, Q_c is {q_c.shape}")
    return m @ z_bar, float(0.5 * z_bar @ q_c @ z_bar * ts)


def propagate_covariance(p0, a, r_ww, n: int) -> List[np.ndarray]:
    """Returns ``P_0 .. P_n`` of ``P_{k+1} = A P_k A' + R_ww``.

    Raises
    -------
    ~lqd.NotSymmetric
        ``p0`` or ``r_ww`` is asymmetric beyond 1e-10.
    """
    a = np.asarray(a, dtype=float)
    p = _check_symmetric(np.array(p0, dtype=float), "p0")
    r_ww = _check_symmetric(np.array(r_ww, dtype=float), "r_ww")
    if p.shape != a.shape or r_ww.shape != a.shape:
        raise DimensionMismatch(f"p0 {p.shape}, a {a.shape} and r_ww {r_ww.shape} must agree")
    out = [p]
    for _ in range(n):
        p = symmetric_part(a @ p @ a.T + r_ww)
        out.append(p)
    return out


def stochastic_offset(q, p_bar_k, rho_w: float) -> float:
    """``rho_s_k = 1/2 (tr(Q Pbar_k) + rho_w)``.

    ``p_bar_k`` may be the plant block only; it is zero-padded to the size of ``Q``.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p_bar_k, dtype=float)
    k = p.shape[0]
    if p.shape != (k, k) or k > q.shape[0]:
        raise DimensionMismatch(f"cannot pad covariance {p.shape} to {q.shape}")
    return 0.5 * (float(np.sum(q[:k, :k] * p)) + rho_w)


def discretize(
    problem: ContinuousLqProblem,
    method: Union[Method, str] = Method.MATRIX_EXP,
    *,
    n: int = 2**14,
    j: int = 14,
    tableau: Union[ButcherTableau, str, None] = None,
    stochastic: bool = True,
) -> DiscreteLqProblem:
    """Discretizes a continuous LQ problem.

    The system is stacked, discretized by ``method`` and augmented with its input history.
    In stochastic mode the plant covariance is propagated from ``p0`` and the per-stage
    offsets are added.
    """
    system = problem.system
    coeffs = stack_mimo(system)
    result = solve(coeffs, problem.q_c, None, method=method, n=n, j=j, tableau=tableau)
    sys = augment_discrete(result.a, result.b_o, coeffs.d_o, coeffs.c_c, coeffs.m_bar, coeffs.n_u)

    ts = system.sample_time
    terms = [affine_terms(result.m, z_bar, problem.q_c, ts) for z_bar in problem.references]
    q_k = np.array([t[0] for t in terms]).reshape(problem.horizon_steps, -1)
    rho_k = np.array([t[1] for t in terms])

    x0 = sys.initial_state(problem.x0, problem.u_history)
    fields: Dict[str, Any] = dict(
        sys=sys,
        q=result.q,
        m=result.m,
        q_k=q_k,
        rho_k=rho_k,
        x0=x0,
        r_ww=None,
        rho_s_k=None,
        p_k=None,
        result=result,
    )
    if stochastic:
        p_k = propagate_covariance(problem.p0, result.a, result.r_ww, problem.horizon_steps)
        fields["r_ww"] = result.r_ww
        fields["p_k"] = p_k
        fields["rho_s_k"] = np.array([stochastic_offset(result.q, p, result.rho_w) for p in p_k[:-1]])

    log.debug("discretized %r with %s", problem, result.method)
    return DiscreteLqProblem(**fields)


class Discretizer:
    """Holds discretization options and applies them to problems.

    Parameters
    -----------
    method: Union[:class:`Method`, :class:`str`]
        The solver, or one of its aliases (``ode``, ``expm``, ``doubling``).
        Default = matrix exponential.
    tableau: Union[:class:`ButcherTableau`, :class:`str`]
        The Runge-Kutta method of the fixed-step and step-doubling solvers. Default = ``rk4``.
    n: :class:`int`
        Fixed-step count. Default = 2**14.
    j: :class:`int`
        Doubling passes. Default = 14.
    stochastic: :class:`bool`
        Whether to add the covariance terms. Default = ``True``.
    """

    __slots__ = ("method", "tableau", "n", "j", "stochastic")

    def __init__(
        self,
        method: Union[Method, str] = Method.MATRIX_EXP,
        *,
        tableau: Union[ButcherTableau, str, None] = None,
        n: int = 2**14,
        j: int = 14,
        stochastic: bool = True,
    ):
        self.method = Method.from_alias(method) if isinstance(method, str) else method
        self.tableau = ButcherTableau.resolve(tableau)
        self.n = n
        self.j = j
        self.stochastic = stochastic

    def discretize(self, problem: ContinuousLqProblem) -> DiscreteLqProblem:
        return discretize(
            problem,
            self.method,
            n=self.n,
            j=self.j,
            tableau=self.tableau,
            stochastic=self.stochastic,
        )

    def discretize_system(self, system: MimoDelaySystem, q_c=None) -> DiscretizationResult:
        """Discretizes one sample interval of ``system`` without building a problem."""
        return solve(
            stack_mimo(system),
            q_c,
            None,
            method=self.method,
            n=self.n,
            j=self.j,
            tableau=self.tableau,
        )

    def __repr__(self):
        return f"<Discretizer method={self.method} tableau={self.tableau.name!r} n={self.n} j={self.j}>"
