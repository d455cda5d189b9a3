from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, InvalidDelay, InvalidSelector, InvalidStepCount, NonFiniteValue
from .mixins import Frozen

if TYPE_CHECKING:
    from .mpc_sim import TransferFunction

__all__ = (
    "SisoDelayChannel",
    "DelayConstants",
    "NoiseModel",
    "MimoDelaySystem",
    "StackedCoefficients",
    "AugmentedDiscreteSystem",
    "delay_constants",
    "selection_block",
    "stack_mimo",
    "augment_discrete",
    "dense_reference_sim",
)

log = logging.getLogger(__name__)

# delays closer than this (relative) to a sample multiple are treated as integer
_INTEGER_SNAP = 1e-12


def _as_matrix(value, shape: Tuple[Optional[int], Optional[int]], name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim < 2:
        rows, cols = shape
        if arr.size == 0:
            arr = arr.reshape(rows or 0, cols or 0)
        elif rows is not None:
            arr = arr.reshape(rows, -1)
        elif cols is not None:
            arr = arr.reshape(-1, cols)
        else:
            arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got {arr.ndim} dimensions")
    for want, got in zip(shape, arr.shape):
        if want is not None and want != got:
            raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} has nonfinite entries")
    return arr


class DelayConstants(NamedTuple):
    """Integer and fractional split of a delay, ``l = tau / ts = m - v``."""

    l: float
    m: int
    v: float


def delay_constants(tau: float, ts: float) -> DelayConstants:
    """Splits a delay into its integer and fractional delay constants.

    Parameters
    -----------
    tau: :class:`float`
        The time delay, nonnegative.
    ts: :class:`float`
        The sample time, positive.

    Raises
    -------
    ~lqd.InvalidDelay
        The sample time is not positive, or the delay is negative or nonfinite.

    Returns
    --------
    :class:`DelayConstants`: ``(l, m, v)`` with ``m = ceil(l)`` and ``0 <= v < 1``.
    """
    if not math.isfinite(ts) or ts <= 0:
        raise InvalidDelay(f"sample time must be positive, got {ts!r}")
    if not math.isfinite(tau):
        raise InvalidDelay(f"delay must be finite, got {tau!r}")
    if tau < 0:
        raise InvalidDelay(f"delay must be nonnegative, got {tau!r}")

    l = tau / ts
    nearest = round(l)
    if abs(l - nearest) <= _INTEGER_SNAP * max(1.0, l):
        return DelayConstants(l=float(nearest), m=int(nearest), v=0.0)

    m = math.ceil(l)
    return DelayConstants(l=l, m=m, v=m - l)


def selection_block(p: int, k_blocks: int, n_u: int) -> np.ndarray:
    """Returns the ``n_u x (k_blocks * n_u)`` matrix that is the identity in block ``p``
    (1-based) and zero elsewhere. Applied to ``[u_{k-k_blocks+1}; ...; u_k]`` it picks
    ``u_{k-k_blocks+p}``.

    Raises
    -------
    ~lqd.InvalidSelector
        ``p`` is not within ``1..k_blocks``.
    """
    if k_blocks < 1 or n_u < 1:
        raise InvalidSelector(f"need at least one block of one input, got k={k_blocks}, n_u={n_u}")
    if not 1 <= p <= k_blocks:
        raise InvalidSelector(f"block {p} is out of range 1..{k_blocks}")

    sel = np.zeros((n_u, k_blocks * n_u))
    sel[:, (p - 1) * n_u : p * n_u] = np.eye(n_u)
    return sel


class SisoDelayChannel(Frozen):
    """Represents one input-to-output path ``x' = a_c x + b_c u(t - tau)``,
    ``z = c_c x + d_c u(t - tau)``.

    A static gain has an empty state (``a_c`` is 0x0).

    Attributes
    -----------
    a_c: :class:`numpy.ndarray`
        The ``n x n`` state matrix.
    b_c: :class:`numpy.ndarray`
        The ``n x 1`` input gain.
    c_c: :class:`numpy.ndarray`
        The ``1 x n`` output gain.
    d_c: :class:`float`
        The feedthrough.
    tau: :class:`float`
        The input delay, in the same time unit as the sample time.
    """

    __slots__ = ("a_c", "b_c", "c_c", "d_c", "tau")

    if TYPE_CHECKING:
        a_c: np.ndarray
        b_c: np.ndarray
        c_c: np.ndarray
        d_c: float
        tau: float

    def __init__(self, a_c, b_c, c_c, d_c: float = 0.0, tau: float = 0.0):
        a = np.array(a_c, dtype=float)
        if a.size == 0:
            a = a.reshape(0, 0)
        a = _as_matrix(a, (None, None), "a_c")
        n = a.shape[0]
        if a.shape != (n, n):
            raise DimensionMismatch(f"a_c must be square, got {a.shape}")
        b = _as_matrix(np.array(b_c, dtype=float).reshape(n, 1), (n, 1), "b_c")
        c = _as_matrix(np.array(c_c, dtype=float).reshape(1, n), (1, n), "c_c")

        d = float(d_c)
        if not math.isfinite(d):
            raise NonFiniteValue("d_c is not finite")
        tau = float(tau)
        if not math.isfinite(tau):
            raise InvalidDelay(f"delay must be finite, got {tau!r}")
        if tau < 0:
            raise InvalidDelay(f"delay must be nonnegative, got {tau!r}")

        self._set(a_c=a, b_c=b, c_c=c, d_c=d, tau=tau)

    @property
    def n_x(self) -> int:
        return self.a_c.shape[0]

    @property
    def dc_gain(self) -> float:
        """:class:`float`: The steady-state gain ``d_c - c_c a_c^{-1} b_c``."""
        if self.n_x == 0:
            return self.d_c
        return (self.d_c - self.c_c @ np.linalg.solve(self.a_c, self.b_c)).item()

    def __repr__(self):
        return f"<SisoDelayChannel n_x={self.n_x} tau={self.tau!r} d_c={self.d_c!r}>"


class NoiseModel(Frozen):
    """Represents the stochastic part ``H(s) W(s)`` of a control model: extra states driven
    only by process noise, appended after the channel states.

    Attributes
    -----------
    a: :class:`numpy.ndarray`
        The ``n_w x n_w`` noise state matrix.
    g: :class:`numpy.ndarray`
        The ``n_w x n_omega`` noise gain (already scaled by the noise intensity).
    c: :class:`numpy.ndarray`
        The ``n_z x n_w`` map from noise states to outputs.
    """

    __slots__ = ("a", "g", "c")

    if TYPE_CHECKING:
        a: np.ndarray
        g: np.ndarray
        c: np.ndarray

    def __init__(self, a, g, c):
        a = _as_matrix(a, (None, None), "noise a")
        n = a.shape[0]
        if a.shape != (n, n):
            raise DimensionMismatch(f"noise a must be square, got {a.shape}")
        g = _as_matrix(g, (n, None), "noise g")
        c = _as_matrix(c, (None, n), "noise c")
        self._set(a=a, g=g, c=c)

    @classmethod
    def from_transfer_functions(cls, tfs: Sequence[TransferFunction], *, intensity: float = 1.0) -> NoiseModel:
        """Builds the diagonal noise model ``H(s) = diag(tfs)``, one noise input per output.

        Each transfer function must be strictly proper and undelayed.
        """
        from .mpc_sim import tf_realize

        blocks = [tf_realize(tf) for tf in tfs]
        for blk in blocks:
            if blk.d_c != 0.0 or blk.tau != 0.0:
                raise DimensionMismatch("noise channels must be strictly proper and undelayed")

        n_z = len(blocks)
        sizes = [blk.n_x for blk in blocks]
        n_w = sum(sizes)
        a = np.zeros((n_w, n_w))
        g = np.zeros((n_w, n_z))
        c = np.zeros((n_z, n_w))
        offset = 0
        for i, (blk, size) in enumerate(zip(blocks, sizes)):
            sl = slice(offset, offset + size)
            a[sl, sl] = blk.a_c
            g[sl, i] = blk.b_c[:, 0]
            c[i, sl] = blk.c_c[0]
            offset += size
        return cls(a, math.sqrt(intensity) * g, c)

    @property
    def n_w(self) -> int:
        return self.a.shape[0]

    @property
    def n_omega(self) -> int:
        return self.g.shape[1]


class MimoDelaySystem(Frozen):
    """Represents a continuous-time system as an ``n_z x n_u`` grid of
    :class:`SisoDelayChannel`, sampled with a zero-order hold every ``sample_time``.

    The stacked state is ``[x_11; x_21; ...; x_{n_z 1}; x_12; ...; x_{n_z n_u}]`` followed
    by the noise-model states, if any.

    Attributes
    -----------
    channels: Tuple[Tuple[:class:`SisoDelayChannel`, ...], ...]
        The grid, indexed ``channels[i][j]`` for output ``i`` and input ``j``.
    sample_time: :class:`float`
        The sample time ``T_s``.
    g_c: Optional[:class:`numpy.ndarray`]
        The process-noise gain on the stacked state, if given directly.
    noise: Optional[:class:`NoiseModel`]
        The stochastic part of the model, if given.
    """

    __slots__ = ("channels", "sample_time", "g_c", "noise")

    if TYPE_CHECKING:
        channels: Tuple[Tuple[SisoDelayChannel, ...], ...]
        sample_time: float
        g_c: Optional[np.ndarray]
        noise: Optional[NoiseModel]

    def __init__(
        self,
        channels: Sequence[Sequence[SisoDelayChannel]],
        sample_time: float,
        *,
        g_c=None,
        noise: Optional[NoiseModel] = None,
    ):
        grid = tuple(tuple(row) for row in channels)
        if not grid or not grid[0]:
            raise DimensionMismatch("the channel grid is empty")
        n_u = len(grid[0])
        if any(len(row) != n_u for row in grid):
            raise DimensionMismatch("the channel grid is not rectangular")
        if not math.isfinite(sample_time) or sample_time <= 0:
            raise InvalidDelay(f"sample time must be positive, got {sample_time!r}")
        if g_c is not None and noise is not None:
            raise DimensionMismatch("give either g_c or a noise model, not both")

        n_channel_states = sum(ch.n_x for row in grid for ch in row)
        if noise is not None and noise.c.shape[0] != len(grid):
            raise DimensionMismatch(f"noise model drives {noise.c.shape[0]} outputs, system has {len(grid)}")

        if g_c is not None:
            g_c = _as_matrix(g_c, (n_channel_states, None), "g_c")

        self._set(channels=grid, sample_time=float(sample_time), g_c=g_c, noise=noise)

    @classmethod
    def from_transfer_functions(
        cls,
        grid: Sequence[Sequence[TransferFunction]],
        sample_time: float,
        *,
        noise: Optional[NoiseModel] = None,
        g_c=None,
    ) -> MimoDelaySystem:
        from .mpc_sim import tf_realize

        channels = [[tf_realize(tf) for tf in row] for row in grid]
        return cls(channels, sample_time, noise=noise, g_c=g_c)

    @property
    def n_z(self) -> int:
        return len(self.channels)

    @property
    def n_u(self) -> int:
        return len(self.channels[0])

    @property
    def n_x(self) -> int:
        """:class:`int`: The stacked state dimension, noise states included."""
        return sum(ch.n_x for _, _, ch in self.iter_channels()) + (self.noise.n_w if self.noise else 0)

    def iter_channels(self):
        """Yields ``(i, j, channel)`` in stacking order, ``i`` varying fastest."""
        for j in range(self.n_u):
            for i in range(self.n_z):
                yield i, j, self.channels[i][j]

    def delay_grid(self) -> List[List[DelayConstants]]:
        return [[delay_constants(ch.tau, self.sample_time) for ch in row] for row in self.channels]

    def with_sample_time(self, sample_time: float) -> MimoDelaySystem:
        return MimoDelaySystem(self.channels, sample_time, g_c=self.g_c, noise=self.noise)

    def __repr__(self):
        return f"<MimoDelaySystem n_z={self.n_z} n_u={self.n_u} n_x={self.n_x} sample_time={self.sample_time!r}>"


class StackedCoefficients(Frozen):
    """The stacked continuous coefficients of a :class:`MimoDelaySystem`.

    Inputs are stacked as ``u_o = [u_{k-m_bar}; ...; u_{k-1}; u_k]``, ``(m_bar + 1) * n_u``
    entries.

    Attributes
    -----------
    a_c: :class:`numpy.ndarray`
        Block-diagonal state matrix.
    v_mat: :class:`numpy.ndarray`
        Block-diagonal ``V = diag(v_ij I)``; zero on noise states.
    b_1c: :class:`numpy.ndarray`
        Input matrix acting on ``u_{k - m_ij}``.
    b_2c: :class:`numpy.ndarray`
        Input matrix acting on ``u_{k - m_ij + 1}``; zero rows where ``v_ij = 0``.
    b_bar_2c: :class:`numpy.ndarray`
        ``V (b_2c - b_1c)``.
    c_c: :class:`numpy.ndarray`
        Output matrix over the stacked state.
    d_o: :class:`numpy.ndarray`
        Feedthrough over the stacked input.
    g_c: :class:`numpy.ndarray`
        Process-noise gain over the stacked state (zero columns when deterministic).
    e_1: :class:`numpy.ndarray`
        One row per channel, in stacking order, selecting ``u_{k-m_ij}``.
    e_2: :class:`numpy.ndarray`
        Rows selecting ``u_{k-m_ij+1}``; zero where ``v_ij = 0``.
    m_bar: :class:`int`
        The largest integer delay constant.
    m_grid: :class:`numpy.ndarray`
        Integer delay constants ``m_ij``.
    v_grid: :class:`numpy.ndarray`
        Fractional delay constants ``v_ij``.
    """

    __slots__ = (
        "a_c",
        "v_mat",
        "b_1c",
        "b_2c",
        "b_bar_2c",
        "c_c",
        "d_o",
        "g_c",
        "e_1",
        "e_2",
        "m_bar",
        "m_grid",
        "v_grid",
        "sample_time",
    )

    if TYPE_CHECKING:
        a_c: np.ndarray
        v_mat: np.ndarray
        b_1c: np.ndarray
        b_2c: np.ndarray
        b_bar_2c: np.ndarray
        c_c: np.ndarray
        d_o: np.ndarray
        g_c: np.ndarray
        e_1: np.ndarray
        e_2: np.ndarray
        m_bar: int
        m_grid: np.ndarray
        v_grid: np.ndarray
        sample_time: float

    def __init__(self, **fields):
        self._set(**fields)

    @property
    def n_x(self) -> int:
        return self.a_c.shape[0]

    @property
    def n_z(self) -> int:
        return self.c_c.shape[0]

    @property
    def n_u(self) -> int:
        return self.m_grid.shape[1]

    @property
    def n_o(self) -> int:
        """:class:`int`: Width of the stacked input, ``(m_bar + 1) * n_u``."""
        return self.b_1c.shape[1]

    @property
    def n_w(self) -> int:
        return self.g_c.shape[1]

    @property
    def v_a_c(self) -> np.ndarray:
        return self.v_mat @ self.a_c

    @property
    def output_map(self) -> np.ndarray:
        """:class:`numpy.ndarray`: ``[C_c, D_o]``."""
        return np.hstack([self.c_c, self.d_o])

    def __repr__(self):
        return f"<StackedCoefficients n_x={self.n_x} n_u={self.n_u} n_z={self.n_z} m_bar={self.m_bar}>"


def stack_mimo(sys: MimoDelaySystem) -> StackedCoefficients:
    """Builds the stacked continuous coefficients of a MIMO delay system.

    Row block ``(i, j)`` of ``b_1c`` is ``b_{c,ij}`` times the selector of ``u_{k-m_ij}``
    (component ``j``); row block ``(i, j)`` of ``b_2c`` selects ``u_{k-m_ij+1}`` and is zero
    when ``v_ij = 0``.
    """
    ts = sys.sample_time
    n_z, n_u = sys.n_z, sys.n_u
    consts = sys.delay_grid()
    m_grid = np.array([[c.m for c in row] for row in consts], dtype=int)
    v_grid = np.array([[c.v for c in row] for row in consts], dtype=float)
    m_bar = int(m_grid.max())
    k_blocks = m_bar + 1
    n_o = k_blocks * n_u
    n_x = sys.n_x

    def selector(i_block: int, j: int) -> np.ndarray:
        # row vector picking component j of block i_block
        return selection_block(i_block, k_blocks, n_u)[j : j + 1]

    a_c = np.zeros((n_x, n_x))
    v_diag = np.zeros(n_x)
    b_1c = np.zeros((n_x, n_o))
    b_2c = np.zeros((n_x, n_o))
    c_c = np.zeros((n_z, n_x))
    d_o = np.zeros((n_z, n_o))
    e_1 = np.zeros((n_z * n_u, n_o))
    e_2 = np.zeros((n_z * n_u, n_o))

    offset = 0
    for i, j, ch in sys.iter_channels():
        m, v = int(m_grid[i, j]), float(v_grid[i, j])
        sl = slice(offset, offset + ch.n_x)
        a_c[sl, sl] = ch.a_c
        v_diag[sl] = v
        row = j * n_z + i
        e_1[row] = selector(k_blocks - m, j)[0]
        if v > 0.0:
            e_2[row] = selector(k_blocks - m + 1, j)[0]
        b_1c[sl] = ch.b_c @ e_1[row : row + 1]
        b_2c[sl] = ch.b_c @ e_2[row : row + 1]
        c_c[i, sl] = ch.c_c[0]
        d_o[i] += ch.d_c * e_1[row]
        offset += ch.n_x

    if sys.noise is not None:
        sl = slice(offset, offset + sys.noise.n_w)
        a_c[sl, sl] = sys.noise.a
        c_c[:, sl] = sys.noise.c
        g_c = np.zeros((n_x, sys.noise.n_omega))
        g_c[sl] = sys.noise.g
    elif sys.g_c is not None:
        g_c = np.array(sys.g_c)
    else:
        g_c = np.zeros((n_x, 0))

    v_mat = np.diag(v_diag)
    b_bar_2c = v_mat @ (b_2c - b_1c)

    coeffs = StackedCoefficients(
        a_c=a_c,
        v_mat=v_mat,
        b_1c=b_1c,
        b_2c=b_2c,
        b_bar_2c=b_bar_2c,
        c_c=c_c,
        d_o=d_o,
        g_c=g_c,
        e_1=e_1,
        e_2=e_2,
        m_bar=m_bar,
        m_grid=m_grid,
        v_grid=v_grid,
        sample_time=ts,
    )
    log.debug("stacked %r", coeffs)
    return coeffs


class AugmentedDiscreteSystem(Frozen):
    """The delay-free discrete realization

    ``x~_{k+1} = A~ x~_k + B~ u_k``, ``z_k = C~ x~_k + D~ u_k``

    with ``x~_k = [x_k; u_{k-m_bar}; ...; u_{k-1}]``.

    Attributes
    -----------
    a_tilde, b_tilde, c_tilde, d_tilde: :class:`numpy.ndarray`
        The realization matrices.
    n_x: :class:`int`
        The plant state dimension (without input history).
    m_bar: :class:`int`
        Number of stored past inputs.
    n_u: :class:`int`
        Number of inputs.
    """

    __slots__ = ("a_tilde", "b_tilde", "c_tilde", "d_tilde", "n_x", "m_bar", "n_u")

    if TYPE_CHECKING:
        a_tilde: np.ndarray
        b_tilde: np.ndarray
        c_tilde: np.ndarray
        d_tilde: np.ndarray
        n_x: int
        m_bar: int
        n_u: int

    def __init__(self, a_tilde, b_tilde, c_tilde, d_tilde, *, n_x: int, m_bar: int, n_u: int):
        self._set(
            a_tilde=np.array(a_tilde, dtype=float),
            b_tilde=np.array(b_tilde, dtype=float),
            c_tilde=np.array(c_tilde, dtype=float),
            d_tilde=np.array(d_tilde, dtype=float),
            n_x=n_x,
            m_bar=m_bar,
            n_u=n_u,
        )

    @property
    def n_state(self) -> int:
        """:class:`int`: The augmented state dimension ``n_x + m_bar * n_u``."""
        return self.n_x + self.m_bar * self.n_u

    @property
    def n_z(self) -> int:
        return self.c_tilde.shape[0]

    def initial_state(self, x0=None, u_history=None) -> np.ndarray:
        """Builds ``x~_0`` from a plant state and the ``m_bar`` inputs before ``t_0``
        (oldest first). Both default to zero.
        """
        x = np.zeros(self.n_state)
        if x0 is not None:
            x[: self.n_x] = np.asarray(x0, dtype=float).reshape(self.n_x)
        if u_history is not None and self.m_bar:
            hist = np.asarray(u_history, dtype=float).reshape(self.m_bar, self.n_u)
            x[self.n_x :] = hist.reshape(-1)
        return x

    def simulate(self, u_seq, x0=None) -> np.ndarray:
        """Runs the realization from ``x0`` (augmented, zero by default) and returns
        ``z_0 .. z_{N-1}`` as an ``N x n_z`` array.
        """
        u_seq = np.asarray(u_seq, dtype=float).reshape(-1, self.n_u)
        x = np.zeros(self.n_state) if x0 is None else np.asarray(x0, dtype=float).copy()
        out = np.empty((u_seq.shape[0], self.n_z))
        for k, u in enumerate(u_seq):
            out[k] = self.c_tilde @ x + self.d_tilde @ u
            x = self.a_tilde @ x + self.b_tilde @ u
        return out

    def __repr__(self):
        return f"<AugmentedDiscreteSystem n_x={self.n_x} m_bar={self.m_bar} n_u={self.n_u}>"


def augment_discrete(a, b_o, d_o, c_c, m_bar: int, n_u: int) -> AugmentedDiscreteSystem:
    """Assembles the delay-free realization from the discrete ``A``, ``B_o`` and the
    stacked ``C_c``, ``D_o``.

    ``B_{o,1}`` is the first ``m_bar * n_u`` columns of ``B_o`` and ``B_{o,2}`` the last
    ``n_u`` (the coefficient of ``u_k``); ``D_o`` splits the same way.

    Raises
    -------
    ~lqd.DimensionMismatch
        ``b_o`` or ``d_o`` is not ``(m_bar + 1) * n_u`` columns wide.
    """
    a = np.asarray(a, dtype=float)
    b_o = np.asarray(b_o, dtype=float)
    d_o = np.asarray(d_o, dtype=float)
    c_c = np.asarray(c_c, dtype=float)
    n_o = (m_bar + 1) * n_u
    if b_o.shape[1] != n_o or d_o.shape[1] != n_o:
        raise DimensionMismatch(
            f"b_o/d_o need {n_o} columns for m_bar={m_bar}, n_u={n_u}; got {b_o.shape[1]} and {d_o.shape[1]}"
        )
    n_x = a.shape[0]
    if a.shape != (n_x, n_x) or b_o.shape[0] != n_x or c_c.shape[1] != n_x or d_o.shape[0] != c_c.shape[0]:
        raise DimensionMismatch("a, b_o, c_c and d_o do not agree")

    n_hist = m_bar * n_u
    b_o1, b_o2 = b_o[:, :n_hist], b_o[:, n_hist:]
    d_o1, d_o2 = d_o[:, :n_hist], d_o[:, n_hist:]

    # I_A shifts the history up one block, I_B writes u_k into the last block
    i_a = np.eye(n_hist, k=n_u)
    i_b = np.zeros((n_hist, n_u))
    if n_hist:
        i_b[-n_u:] = np.eye(n_u)

    a_tilde = np.block([[a, b_o1], [np.zeros((n_hist, n_x)), i_a]])
    b_tilde = np.vstack([b_o2, i_b])
    c_tilde = np.hstack([c_c, d_o1])
    return AugmentedDiscreteSystem(a_tilde, b_tilde, c_tilde, d_o2, n_x=n_x, m_bar=m_bar, n_u=n_u)


def _rk4_propagator(a: np.ndarray, b: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    # one classic RK4 step of x' = a x + b u with u held: x+ = p x + q u
    n = a.shape[0]
    ha = h * a
    eye = np.eye(n)
    ha2 = ha @ ha
    ha3 = ha2 @ ha
    p = eye + ha + ha2 / 2 + ha3 / 6 + ha3 @ ha / 24
    q = h * (eye + ha / 2 + ha2 / 6 + ha3 / 24) @ b
    return p, q


def dense_reference_sim(sys: MimoDelaySystem, u_seq, substeps: int = 200, *, u_history=None) -> np.ndarray:
    """Integrates each delayed channel with a fine fixed-step RK4, splitting every sample
    interval at the delay switch time ``t_k + (1 - v) T_s``, and returns ``z`` at the
    sample instants (``N x n_z``).

    Inputs before ``t_0`` come from ``u_history`` (``m_bar x n_u``, oldest first) or are
    zero. Noise-model states carry no input and stay at zero.

    Raises
    -------
    ~lqd.NonFiniteValue
        The input sequence has NaN or Inf entries.
    ~lqd.InvalidStepCount
        Fewer than 100 substeps.
    """
    if substeps < 100:
        raise InvalidStepCount(f"substeps must be at least 100, got {substeps}")
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, sys.n_u)
    if not np.all(np.isfinite(u_seq)):
        raise NonFiniteValue("input sequence has nonfinite entries")

    ts = sys.sample_time
    consts = sys.delay_grid()
    m_bar = max(c.m for row in consts for c in row)
    hist = np.zeros((m_bar, sys.n_u)) if u_history is None else np.asarray(u_history, dtype=float).reshape(m_bar, sys.n_u)
    full = np.vstack([hist, u_seq])

    def u_at(idx: int, j: int) -> float:
        return full[idx + m_bar, j]

    n_steps = u_seq.shape[0]
    z = np.zeros((n_steps, sys.n_z))

    for i, j, ch in sys.iter_channels():
        m, v = consts[i][j].m, consts[i][j].v
        x = np.zeros(ch.n_x)
        first = (1.0 - v) * ts
        p1, q1 = _rk4_propagator(ch.a_c, ch.b_c, first / substeps)
        if v > 0.0:
            p2, q2 = _rk4_propagator(ch.a_c, ch.b_c, v * ts / substeps)

        for k in range(n_steps):
            z[k, i] += (ch.c_c @ x)[0] + ch.d_c * u_at(k - m, j)
            if ch.n_x == 0:
                continue
            u_early = u_at(k - m, j)
            for _ in range(substeps):
                x = p1 @ x + q1[:, 0] * u_early
            if v > 0.0:
                u_late = u_at(k - m + 1, j)
                for _ in range(substeps):
                    x = p2 @ x + q2[:, 0] * u_late

    return z
