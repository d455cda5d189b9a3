from __future__ import annotations

import logging
from typing import TYPE_CHECKING, FrozenSet, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, InfeasibleConstraints, QPNotConverged
from .mixins import Frozen
from .ode_rhs import symmetric_part

if TYPE_CHECKING:
    from .delay_model import AugmentedDiscreteSystem

__all__ = (
    "InputBounds",
    "CondensedQp",
    "QpSolution",
    "MpcController",
    "prediction_maps",
    "condense",
    "qp_solve",
    "active_set_solve",
)

log = logging.getLogger(__name__)

_RIDGE = 1e-9
_RIDGE_TRIGGER = 1e-10
_KKT_TOL = 1e-8
_STATIONARY_TOL = 1e-10
# multipliers are dropped only well above the stationarity noise
_DUAL_TOL = 1e-8
_BLOCK_TOL = 1e-10
_TIGHT_TOL = 1e-12


class InputBounds(Frozen):
    """Box and rate-of-movement bounds on every input of a plan.

    ``u_min <= u_k <= u_max`` and ``du_min <= u_k - u_{k-1} <= du_max``. Infinite entries
    are unconstrained.
    """

    __slots__ = ("u_min", "u_max", "du_min", "du_max")

    if TYPE_CHECKING:
        u_min: np.ndarray
        u_max: np.ndarray
        du_min: np.ndarray
        du_max: np.ndarray

    def __init__(self, u_min, u_max, du_min, du_max, *, n_u: Optional[int] = None):
        vals = [np.array(v, dtype=float).reshape(-1) for v in (u_min, u_max, du_min, du_max)]
        n_u = n_u or max(v.size for v in vals)
        vals = [np.full(n_u, v[0]) if v.size == 1 else v for v in vals]
        if any(v.size != n_u for v in vals):
            raise DimensionMismatch(f"every bound needs {n_u} entries")
        u_min, u_max, du_min, du_max = vals
        if np.any(u_min > u_max):
            raise InfeasibleConstraints(f"u_min {u_min} exceeds u_max {u_max}")
        if np.any(du_min > du_max):
            raise InfeasibleConstraints(f"du_min {du_min} exceeds du_max {du_max}")
        if np.any(du_min > 0) or np.any(du_max < 0):
            raise InfeasibleConstraints("rate bounds must allow a zero move")
        self._set(u_min=u_min, u_max=u_max, du_min=du_min, du_max=du_max)

    @classmethod
    def unbounded(cls, n_u: int) -> InputBounds:
        return cls(-np.inf, np.inf, -np.inf, np.inf, n_u=n_u)

    @property
    def n_u(self) -> int:
        return self.u_min.size

    def violation(self, u_seq, u_prev=None) -> float:
        """The largest bound violation along a sequence, ``0.0`` if it is feasible."""
        u_seq = np.asarray(u_seq, dtype=float).reshape(-1, self.n_u)
        prev = np.zeros(self.n_u) if u_prev is None else np.asarray(u_prev, dtype=float)
        du = np.diff(np.vstack([prev, u_seq]), axis=0)
        parts = [u_seq - self.u_max, self.u_min - u_seq, du - self.du_max, self.du_min - du]
        return max(0.0, max(float(np.max(p)) for p in parts))


class CondensedQp(Frozen):
    """``min 1/2 u' H u + g' u`` over the stacked plan ``u = [u_0; ...; u_{N-1}]``.

    Attributes
    -----------
    h: :class:`numpy.ndarray`
        The Hessian, symmetric positive definite after regularization.
    g: :class:`numpy.ndarray`
        The gradient.
    bounds: :class:`InputBounds`
        The per-input bounds, repeated over the horizon.
    horizon: :class:`int`
        ``N``.
    ridge: :class:`float`
        The diagonal shift added to ``H``, ``0.0`` if none was needed.
    """

    __slots__ = ("h", "g", "bounds", "horizon", "ridge")

    if TYPE_CHECKING:
        h: np.ndarray
        g: np.ndarray
        bounds: InputBounds
        horizon: int
        ridge: float

    def __init__(self, h, g, bounds: InputBounds, horizon: int, ridge: float = 0.0):
        h = np.array(h, dtype=float)
        g = np.array(g, dtype=float).reshape(-1)
        n = horizon * bounds.n_u
        if h.shape != (n, n) or g.size != n:
            raise DimensionMismatch(f"H is {h.shape} and g has {g.size} entries, expected {n}")
        self._set(h=symmetric_part(h), g=g, bounds=bounds, horizon=horizon, ridge=ridge)

    @property
    def n_u(self) -> int:
        return self.bounds.n_u

    def with_gradient(self, g) -> CondensedQp:
        return CondensedQp(self.h, g, self.bounds, self.horizon, self.ridge)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float).reshape(-1)
        return float(0.5 * u @ self.h @ u + self.g @ u)

    def constraint_rows(self, u_prev) -> Tuple[np.ndarray, np.ndarray]:
        """The finite bounds as ``G u <= b``: box rows, then rate rows, upper before lower."""
        n_u, horizon = self.n_u, self.horizon
        n = n_u * horizon
        eye = np.eye(n)
        diff = eye - np.eye(n, k=-n_u)
        rows = np.vstack([eye, diff])

        bnd = self.bounds
        u_prev = np.zeros(n_u) if u_prev is None else np.asarray(u_prev, dtype=float).reshape(n_u)
        shift = np.zeros(n)
        shift[:n_u] = u_prev
        upper = np.concatenate([np.tile(bnd.u_max, horizon), np.tile(bnd.du_max, horizon) + shift])
        lower = np.concatenate([np.tile(bnd.u_min, horizon), np.tile(bnd.du_min, horizon) + shift])

        g_all = np.vstack([rows, -rows])
        b_all = np.concatenate([upper, -lower])
        finite = np.isfinite(b_all)
        return g_all[finite], b_all[finite]


class QpSolution(NamedTuple):
    u: np.ndarray
    iterations: int
    active: List[int]


def prediction_maps(a, b, n: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Returns ``A^k`` and ``Gamma_k`` for ``k = 0 .. n-1``, so that
    ``x_k = A^k x_0 + Gamma_k u`` with ``Gamma_k = sum_{i<k} A^{k-1-i} B I_i``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n_s, n_u = b.shape
    if a.shape != (n_s, n_s):
        raise DimensionMismatch(f"A is {a.shape}, B is {b.shape}")
    powers = [np.eye(n_s)]
    gammas = [np.zeros((n_s, n * n_u))]
    for k in range(n - 1):
        gam = a @ gammas[-1]
        gam[:, k * n_u : (k + 1) * n_u] += b
        gammas.append(gam)
        powers.append(a @ powers[-1])
    return powers, gammas


def _stage_maps(gammas: Sequence[np.ndarray], n_u: int) -> List[np.ndarray]:
    # W_k = [Gamma_k; I_k] maps the plan to [x_k; u_k]
    n = gammas[0].shape[1]
    maps = []
    for k, gam in enumerate(gammas):
        sel = np.zeros((n_u, n))
        sel[:, k * n_u : (k + 1) * n_u] = np.eye(n_u)
        maps.append(np.vstack([gam, sel]))
    return maps


def _regularize(h: np.ndarray) -> Tuple[np.ndarray, float]:
    if h.size and np.linalg.eigvalsh(h).min() < _RIDGE_TRIGGER:
        log.warning("condensed Hessian is near singular, adding %.0e to its diagonal", _RIDGE)
        return h + _RIDGE * np.eye(h.shape[0]), _RIDGE
    return h, 0.0


def condense(
    a,
    b,
    q,
    m=None,
    q_k=None,
    x0=None,
    n: int = 1,
    *,
    references=None,
    bounds: Optional[InputBounds] = None,
) -> CondensedQp:
    """Eliminates the states of ``sum_k l_k(x_k, u_k)`` over ``k = 0 .. n-1``.

    ``H = sum_k W_k' Q W_k`` and ``g = sum_k W_k' (Q [A^k x_0; 0] + q_k)`` with
    ``W_k = [Gamma_k; I_k]``. When ``q_k`` is omitted it is ``M zbar_k`` for the given
    ``references``, or zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    n_s, n_u = b.shape
    if q.shape != (n_s + n_u, n_s + n_u):
        raise DimensionMismatch(f"Q is {q.shape}, expected {n_s + n_u} square")
    x0 = np.zeros(n_s) if x0 is None else np.asarray(x0, dtype=float).reshape(n_s)

    if q_k is None:
        if references is not None:
            if m is None:
                raise DimensionMismatch("references need the cross weight M")
            refs = np.asarray(references, dtype=float).reshape(n, -1)
            q_k = refs @ np.asarray(m, dtype=float).T
        else:
            q_k = np.zeros((n, n_s + n_u))
    q_k = np.asarray(q_k, dtype=float).reshape(n, n_s + n_u)

    powers, gammas = prediction_maps(a, b, n)
    maps = _stage_maps(gammas, n_u)
    h = np.zeros((n * n_u, n * n_u))
    g = np.zeros(n * n_u)
    for k, w in enumerate(maps):
        qw = q @ w
        h += w.T @ qw
        x_part = np.concatenate([powers[k] @ x0, np.zeros(n_u)])
        g += w.T @ (q @ x_part + q_k[k])

    h, ridge = _regularize(symmetric_part(h))
    return CondensedQp(h, g, bounds or InputBounds.unbounded(n_u), n, ridge)


def _feasible_start(qp: CondensedQp, u_prev, guess) -> Tuple[np.ndarray, bool]:
    # clip step by step, so every rate bound is measured against the clipped predecessor
    n_u = qp.n_u
    bnd = qp.bounds
    plan = np.zeros((qp.horizon, n_u)) if guess is None else np.array(guess, dtype=float).reshape(qp.horizon, n_u)
    prev = np.zeros(n_u) if u_prev is None else np.asarray(u_prev, dtype=float).reshape(n_u)
    out = np.empty_like(plan)
    for k, want in enumerate(plan):
        lo = np.maximum(bnd.u_min, prev + bnd.du_min)
        hi = np.minimum(bnd.u_max, prev + bnd.du_max)
        if np.any(lo > hi):
            raise InfeasibleConstraints(f"no input at step {k} satisfies both box and rate bounds from {prev}")
        out[k] = np.clip(want, lo, hi)
        prev = out[k]
    return out.reshape(-1), bool(np.any(out != plan))


def _independent(rows: np.ndarray, candidates: Sequence[int]) -> List[int]:
    # greedy selection of linearly independent rows
    basis: List[np.ndarray] = []
    keep = []
    for idx in candidates:
        v = rows[idx].copy()
        for e in basis:
            v -= (e @ v) * e
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            basis.append(v / norm)
            keep.append(idx)
    return keep


def _null_space(a_w: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis of ``{p : A_w p = 0}``.

    A box row pins one entry of ``p`` and a rate row ties two entries together, so the
    basis is one normalized indicator per group of tied entries that nothing pins.
    """
    if a_w.shape[0] == 0:
        return np.eye(n)
    support = a_w != 0
    counts = support.sum(axis=1)
    ties = a_w[counts == 2]
    if np.any(counts > 2) or np.any(ties.sum(axis=1) != 0):
        return scipy.linalg.null_space(a_w)

    pinned = np.flatnonzero(support[counts == 1].any(axis=0))
    pairs = np.nonzero(ties)[1].reshape(-1, 2)
    graph = csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_groups, labels = connected_components(graph, directed=False)

    free = np.ones(n_groups, dtype=bool)
    free[labels[pinned]] = False
    members = (labels[:, None] == np.flatnonzero(free)[None, :]).astype(float)
    return members / np.sqrt(members.sum(axis=0))


def _subspace_step(h: np.ndarray, grad: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, float]:
    # minimizer of 1/2 p'Hp + grad'p over p = Z y, and the largest reduced gradient entry
    if z.shape[1] == 0:
        return np.zeros(h.shape[0]), 0.0
    r = z.T @ grad
    h_z = symmetric_part(z.T @ h @ z)
    try:
        y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(h_z), -r)
    except scipy.linalg.LinAlgError:
        y = scipy.linalg.lstsq(h_z, -r)[0]
    return z @ y, float(np.max(np.abs(r)))


def active_set_solve(
    qp: CondensedQp,
    u_prev=None,
    *,
    warm_start=None,
    max_iter: Optional[int] = None,
) -> QpSolution:
    """Primal active-set method on the box and rate rows of ``qp``.

    Starts from ``warm_start`` made feasible, with the rows tight at that point as the
    initial working set. Each step minimizes over the null space of the working rows,
    so the linear algebra only ever sees the positive definite reduced Hessian. If a
    working set comes back without progress, the remaining choices follow Bland's rule
    (lowest row index) so the iteration cannot cycle.

    Raises
    -------
    ~lqd.InfeasibleConstraints
        No plan satisfies the bounds.
    ~lqd.QPNotConverged
        The iteration cap was hit, or the final KKT residual is above tolerance.
    """
    g_rows, b_rows = qp.constraint_rows(u_prev)
    u, repaired = _feasible_start(qp, u_prev, warm_start)
    if repaired and warm_start is not None:
        log.warning("warm start violated the bounds and was clipped")

    h, g = qp.h, qp.g
    n = u.size
    max_iter = max_iter or 10 * (n + g_rows.shape[0])
    h_norm = float(np.linalg.norm(h, np.inf)) if n else 0.0
    g_norm = float(np.max(np.abs(g), initial=0.0))
    tight_tol = _TIGHT_TOL * (1.0 + np.abs(b_rows))

    def scale(x: np.ndarray) -> float:
        return 1.0 + g_norm + h_norm * float(np.max(np.abs(x), initial=0.0))

    working = _independent(g_rows, np.flatnonzero(np.abs(g_rows @ u - b_rows) <= tight_tol))
    lam = np.zeros(len(working))
    bland = False
    seen: Set[FrozenSet[int]] = set()

    for it in range(1, max_iter + 1):
        grad = h @ u + g
        tol = _STATIONARY_TOL * scale(u)
        p, reduced = _subspace_step(h, grad, _null_space(g_rows[working], n))

        if reduced <= tol:
            if not working:
                break
            lam = scipy.linalg.lstsq(g_rows[working].T, -grad)[0]
            negative = np.flatnonzero(lam < -_DUAL_TOL * scale(u))
            if negative.size == 0:
                break
            key = frozenset(working)
            if key in seen and not bland:
                log.debug("active set revisited %d rows without progress, using Bland's rule", len(key))
                bland = True
            seen.add(key)
            if bland:
                drop = min(negative, key=lambda i: working[i])
            else:
                drop = negative[np.argmin(lam[negative])]
            working.pop(int(drop))
            continue

        in_working = np.zeros(g_rows.shape[0], dtype=bool)
        in_working[working] = True
        gp = g_rows @ p
        candidates = np.flatnonzero((gp > _BLOCK_TOL * np.max(np.abs(p))) & ~in_working)
        alpha, blocking = 1.0, None
        if candidates.size:
            slack = b_rows[candidates] - g_rows[candidates] @ u
            slack[slack <= tight_tol[candidates]] = 0.0
            ratios = slack / gp[candidates]
            # argmin returns the lowest row index among ties
            first = int(np.argmin(ratios))
            if ratios[first] < 1.0:
                alpha, blocking = float(ratios[first]), int(candidates[first])

        if alpha > 0.0:
            u = u + alpha * p
            seen.clear()
        if blocking is not None:
            working.append(blocking)
    else:
        raise QPNotConverged(f"active set did not settle in {max_iter} iterations")

    residual = h @ u + g
    if working:
        residual = residual + g_rows[working].T @ lam
    kkt = float(np.max(np.abs(residual), initial=0.0))
    if kkt > _KKT_TOL * scale(u):
        raise QPNotConverged(f"KKT residual {kkt:.3e} above tolerance")
    violation = float(np.max(g_rows @ u - b_rows, initial=0.0))
    if violation > _KKT_TOL:
        raise QPNotConverged(f"solution violates a bound by {violation:.3e}")

    log.debug("active set: %d iterations, %d active rows", it, len(working))
    return QpSolution(u, it, working)


def qp_solve(qp: CondensedQp, u_prev=None, *, warm_start=None) -> np.ndarray:
    """Minimizes ``1/2 u' H u + g' u`` subject to the box and rate bounds of ``qp``; the
    first rate bound is measured from ``u_prev``.
    """
    return active_set_solve(qp, u_prev, warm_start=warm_start).u


class MpcController:
    """A receding-horizon controller over a condensed QP with constant Hessian.

    The gradient is rebuilt at every step from the state estimate and the references
    through maps precomputed once.

    Parameters
    -----------
    sys: :class:`AugmentedDiscreteSystem`
        The control model.
    q: :class:`numpy.ndarray`
        Stage weight over ``[x~_k; u_k]``.
    m: :class:`numpy.ndarray`
        Reference cross weight.
    horizon: :class:`int`
        Prediction and control horizon ``N``.
    bounds: Optional[:class:`InputBounds`]
        Input bounds, unbounded if omitted.
    """

    __slots__ = ("sys", "horizon", "qp", "_g_x", "_g_z", "_plan")

    def __init__(self, sys: AugmentedDiscreteSystem, q, m, horizon: int, bounds: Optional[InputBounds] = None):
        self.sys = sys
        self.horizon = horizon
        self.qp = condense(sys.a_tilde, sys.b_tilde, q, None, None, None, horizon, bounds=bounds)

        q = np.asarray(q, dtype=float)
        m = np.asarray(m, dtype=float)
        powers, gammas = prediction_maps(sys.a_tilde, sys.b_tilde, horizon)
        maps = _stage_maps(gammas, sys.n_u)
        n_s = sys.n_state
        self._g_x = sum(w.T @ q[:, :n_s] @ pw for w, pw in zip(maps, powers))
        self._g_z = np.stack([w.T @ m for w in maps])
        self._plan: Optional[np.ndarray] = None

    def gradient(self, x_hat, references) -> np.ndarray:
        """``g`` for an estimate and references, either one ``zbar`` held over the
        horizon or one row per stage.
        """
        refs = np.asarray(references, dtype=float)
        if refs.ndim == 1:
            g_z = self._g_z.sum(axis=0) @ refs
        else:
            g_z = np.einsum("kij,kj->i", self._g_z, refs.reshape(self.horizon, -1))
        return self._g_x @ np.asarray(x_hat, dtype=float) + g_z

    def solve(self, x_hat, references, u_prev=None) -> np.ndarray:
        """Returns the optimal plan as an ``N x n_u`` array, warm-started from the
        previous plan shifted by one step.
        """
        qp = self.qp.with_gradient(self.gradient(x_hat, references))
        warm = None
        if self._plan is not None:
            warm = np.vstack([self._plan[1:], self._plan[-1:]])
        sol = active_set_solve(qp, u_prev, warm_start=warm)
        self._plan = sol.u.reshape(self.horizon, self.sys.n_u)
        return self._plan.copy()

    def reset(self) -> None:
        self._plan = None

    def __repr__(self):
        return f"<MpcController horizon={self.horizon} n_u={self.sys.n_u} ridge={self.qp.ridge}>"
