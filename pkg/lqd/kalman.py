from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Optional

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, SingularInnovation
from .mixins import Frozen
from .ode_rhs import symmetric_part

if TYPE_CHECKING:
    from .delay_model import AugmentedDiscreteSystem

__all__ = (
    "KalmanState",
    "pad_covariance",
    "kalman_update",
    "kalman_predict",
    "kalman_step",
)

log = logging.getLogger(__name__)

# innovation covariances with a worse condition number are rejected
_MAX_CONDITION = 1e14


class KalmanState(Frozen):
    """Represents the estimate of a linear Kalman filter.

    Attributes
    -----------
    x_hat: :class:`numpy.ndarray`
        The state mean.
    p: :class:`numpy.ndarray`
        The state covariance.
    """

    __slots__ = ("x_hat", "p")

    if TYPE_CHECKING:
        x_hat: np.ndarray
        p: np.ndarray

    def __init__(self, x_hat, p):
        x_hat = np.array(x_hat, dtype=float).reshape(-1)
        p = np.array(p, dtype=float)
        n = x_hat.size
        if p.shape != (n, n):
            raise DimensionMismatch(f"covariance must be {n}x{n}, got shape {p.shape}")
        self._set(x_hat=x_hat, p=symmetric_part(p))

    @classmethod
    def initial(cls, sys: AugmentedDiscreteSystem, p0=None) -> KalmanState:
        """A zero mean with ``p0`` on the plant states and no uncertainty on the input
        history, which is known exactly.
        """
        p0 = np.eye(sys.n_x) if p0 is None else np.asarray(p0, dtype=float)
        return cls(np.zeros(sys.n_state), pad_covariance(p0, sys.n_state))

    def __repr__(self):
        return f"<KalmanState n={self.x_hat.size} trace={np.trace(self.p):.6g}>"


def pad_covariance(p, n: int) -> np.ndarray:
    """Zero-pads a square covariance to ``n x n``."""
    p = np.asarray(p, dtype=float)
    k = p.shape[0]
    if p.shape != (k, k) or k > n:
        raise DimensionMismatch(f"cannot pad covariance of shape {p.shape} to {n}x{n}")
    out = np.zeros((n, n))
    out[:k, :k] = p
    return out


def kalman_update(ks: KalmanState, y, sys: AugmentedDiscreteSystem, r_vv, u: Optional[np.ndarray] = None) -> KalmanState:
    """Measurement update with ``y_k = C x_k + D u_k + v_k``, ``v_k ~ N(0, R_vv)``.

    The covariance is updated in Joseph form.

    Raises
    -------
    ~lqd.SingularInnovation
        ``C P C' + R_vv`` is singular.
    """
    c = sys.c_tilde
    y = np.asarray(y, dtype=float).reshape(-1)
    r_vv = np.asarray(r_vv, dtype=float)
    if y.size != c.shape[0] or r_vv.shape != (y.size, y.size):
        raise DimensionMismatch(f"measurement has {y.size} entries; C is {c.shape}, R_vv is {r_vv.shape}")

    y_pred = c @ ks.x_hat
    if u is not None:
        y_pred = y_pred + sys.d_tilde @ np.asarray(u, dtype=float).reshape(-1)

    pct = ks.p @ c.T
    s = symmetric_part(c @ pct + r_vv)
    if not np.all(np.isfinite(s)) or not np.linalg.cond(s) <= _MAX_CONDITION:
        raise SingularInnovation("innovation covariance is singular")
    gain = scipy.linalg.solve(s, pct.T, assume_a="sym").T

    x_hat = ks.x_hat + gain @ (y - y_pred)
    i_kc = np.eye(ks.p.shape[0]) - gain @ c
    p = i_kc @ ks.p @ i_kc.T + gain @ r_vv @ gain.T
    return KalmanState(x_hat, p)


def kalman_predict(ks: KalmanState, u, sys: AugmentedDiscreteSystem, r_ww) -> KalmanState:
    """Time update ``x+ = A x + B u``, ``P+ = A P A' + R_ww``.

    ``r_ww`` may cover the plant states only; it is zero-padded over the input history.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    a = sys.a_tilde
    x_hat = a @ ks.x_hat + sys.b_tilde @ u
    p = a @ ks.p @ a.T + pad_covariance(r_ww, a.shape[0])
    return KalmanState(x_hat, p)


def kalman_step(ks: KalmanState, u, y, sys: AugmentedDiscreteSystem, r_ww, r_vv) -> KalmanState:
    """Filters ``y`` and then advances the estimate by the applied input ``u``."""
    return kalman_predict(kalman_update(ks, y, sys, r_vv, u), u, sys, r_ww)
