from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.signal

from . import constants
from .delay_model import (
    MimoDelaySystem,
    NoiseModel,
    SisoDelayChannel,
    augment_discrete,
    stack_mimo,
)
from .enums import Method
from .errors import (
    ClosedLoopFailure,
    DimensionMismatch,
    ImproperTransferFunction,
    InfeasibleConstraints,
    InvalidScenario,
    QPNotConverged,
    SingularInnovation,
)
from .kalman import KalmanState, kalman_predict, kalman_update
from .mixins import Frozen
from .qp import InputBounds, MpcController
from .solvers import solve
from .utils import write_csv

if TYPE_CHECKING:
    from .types import ScenarioPayload, TransferFunctionPayload

__all__ = (
    "TransferFunction",
    "DisturbanceWindow",
    "ReferenceEvent",
    "NoiseSettings",
    "ScenarioConfig",
    "Trajectory",
    "tf_realize",
    "build_control_model",
    "build_plant_model",
    "run_closed_loop",
)

log = logging.getLogger(__name__)


class TransferFunction(Frozen):
    """Represents ``num(s) / den(s) e^{-delay s}``.

    Attributes
    -----------
    numerator: :class:`numpy.ndarray`
        Coefficients, highest power first.
    denominator: :class:`numpy.ndarray`
        Coefficients, highest power first. The leading one is nonzero.
    delay: :class:`float`
        The input delay.
    """

    __slots__ = ("numerator", "denominator", "delay")

    if TYPE_CHECKING:
        numerator: np.ndarray
        denominator: np.ndarray
        delay: float

    def __init__(self, numerator, denominator, delay: float = 0.0):
        num = np.atleast_1d(np.array(numerator, dtype=float))
        den = np.atleast_1d(np.array(denominator, dtype=float))
        if den.size == 0 or den[0] == 0.0:
            raise ImproperTransferFunction(f"denominator {den.tolist()} has a zero leading coefficient")
        num = np.trim_zeros(num, "f")
        if num.size == 0:
            num = np.zeros(1)
        if num.size > den.size:
            raise ImproperTransferFunction(
                f"numerator degree {num.size - 1} exceeds denominator degree {den.size - 1}"
            )
        self._set(numerator=num, denominator=den, delay=float(delay))

    @classmethod
    def from_payload(cls, data: TransferFunctionPayload) -> TransferFunction:
        return cls(data["num"], data["den"], data.get("delay", 0.0))

    def to_payload(self) -> TransferFunctionPayload:
        return {"num": self.numerator.tolist(), "den": self.denominator.tolist(), "delay": self.delay}

    @property
    def order(self) -> int:
        return self.denominator.size - 1

    def __repr__(self):
        return f"<TransferFunction num={self.numerator.tolist()} den={self.denominator.tolist()} delay={self.delay!r}>"


def tf_realize(tf: TransferFunction) -> SisoDelayChannel:
    """Realizes a transfer function in controllable canonical form. A static gain gets
    an empty state and ``d_c = num / den``.
    """
    if tf.order == 0:
        return SisoDelayChannel(
            np.zeros((0, 0)),
            np.zeros((0, 1)),
            np.zeros((1, 0)),
            tf.numerator[-1] / tf.denominator[0],
            tf.delay,
        )
    a, b, c, d = scipy.signal.tf2ss(tf.numerator, tf.denominator)
    return SisoDelayChannel(a, b, c, d.item() if np.size(d) else 0.0, tf.delay)


class DisturbanceWindow(NamedTuple):
    """``d(t) = value`` for ``start <= t < end``."""

    start: float
    end: float
    value: float


class ReferenceEvent(NamedTuple):
    """From ``time`` on, ``zbar`` is ``value`` (deviation from the steady state)."""

    time: float
    value: Tuple[float, ...]


class NoiseSettings(NamedTuple):
    """Plant noise. The filter uses ``r_vv`` whether or not the noise is enabled."""

    r_ww: np.ndarray
    r_vv: np.ndarray
    seed: int = 0
    enabled: bool = True


def _tf_grid(grid) -> Tuple[Tuple[TransferFunction, ...], ...]:
    return tuple(tuple(tf if isinstance(tf, TransferFunction) else TransferFunction(*tf) for tf in row) for row in grid)


class ScenarioConfig(Frozen):
    """A closed-loop experiment on a delayed MIMO plant, in deviation variables around
    ``(u_s, z_s)``. Times are in the unit of the transfer functions.

    Parameters
    -----------
    plant_gu: Sequence[Sequence[:class:`TransferFunction`]]
        The input-to-output transfer functions.
    plant_gd: Sequence[:class:`TransferFunction`]
        One disturbance-to-output transfer function per output.
    noise_tfs: Sequence[:class:`TransferFunction`]
        The stochastic part of the control model, one per output.
    ts: :class:`float`
        Sample time.
    sim_time: :class:`float`
        Simulated time.
    u_s, z_s: Sequence[:class:`float`]
        The steady state.
    disturbance: Sequence[:class:`DisturbanceWindow`]
        Windows of constant disturbance.
    reference_events: Sequence[:class:`ReferenceEvent`]
        Reference changes.
    bounds: :class:`InputBounds`
        Input and rate bounds, in deviation variables.
    noise: :class:`NoiseSettings`
        Plant process and measurement noise.
    q_c: Sequence[Sequence[:class:`float`]]
        Output weight of the controller.
    horizon: :class:`int`
        Controller horizon in samples.
    model_noise_intensity: :class:`float`
        Intensity of the white noise driving ``noise_tfs``.
    method: :class:`Method`
        Discretization method of the control model.
    """

    __slots__ = (
        "plant_gu",
        "plant_gd",
        "noise_tfs",
        "ts",
        "sim_time",
        "u_s",
        "z_s",
        "disturbance",
        "reference_events",
        "bounds",
        "noise",
        "q_c",
        "horizon",
        "model_noise_intensity",
        "method",
    )

    if TYPE_CHECKING:
        plant_gu: Tuple[Tuple[TransferFunction, ...], ...]
        plant_gd: Tuple[TransferFunction, ...]
        noise_tfs: Tuple[TransferFunction, ...]
        ts: float
        sim_time: float
        u_s: np.ndarray
        z_s: np.ndarray
        disturbance: Tuple[DisturbanceWindow, ...]
        reference_events: Tuple[ReferenceEvent, ...]
        bounds: InputBounds
        noise: NoiseSettings
        q_c: np.ndarray
        horizon: int
        model_noise_intensity: float
        method: Method

    def __init__(
        self,
        *,
        plant_gu,
        plant_gd,
        noise_tfs,
        ts: float,
        sim_time: float,
        u_s,
        z_s,
        disturbance: Sequence[DisturbanceWindow] = (),
        reference_events: Sequence[ReferenceEvent] = (),
        bounds: Optional[InputBounds] = None,
        noise: Optional[NoiseSettings] = None,
        q_c=None,
        horizon: int = constants.CEMENT_MILL_HORIZON,
        model_noise_intensity: float = 1.0,
        method: Union[Method, str] = Method.MATRIX_EXP,
    ):
        gu = _tf_grid(plant_gu)
        gd = _tf_grid([plant_gd])[0]
        h = _tf_grid([noise_tfs])[0]
        n_z, n_u = len(gu), len(gu[0])
        if len(gd) != n_z or len(h) != n_z:
            raise InvalidScenario(f"need {n_z} disturbance and noise transfer functions, got {len(gd)} and {len(h)}")
        if not ts > 0 or not sim_time >= ts:
            raise InvalidScenario(f"need 0 < ts <= sim_time, got ts={ts!r}, sim_time={sim_time!r}")
        if int(horizon) != horizon or horizon < 1:
            raise InvalidScenario(f"horizon must be a positive integer, got {horizon!r}")

        u_s = np.array(u_s, dtype=float).reshape(n_u)
        z_s = np.array(z_s, dtype=float).reshape(n_z)

        windows = tuple(DisturbanceWindow(*map(float, w)) for w in disturbance)
        for w in windows:
            if not 0.0 <= w.start < w.end <= sim_time:
                raise InvalidScenario(f"disturbance window [{w.start}, {w.end}) is not within [0, {sim_time}]")
        events = tuple(
            sorted((ReferenceEvent(float(e[0]), tuple(float(v) for v in e[1])) for e in reference_events), key=lambda e: e.time)
        )
        for e in events:
            if not 0.0 <= e.time <= sim_time or len(e.value) != n_z:
                raise InvalidScenario(f"reference event {e} is outside the simulation or has the wrong size")

        if bounds is None:
            bounds = InputBounds.unbounded(n_u)
        elif bounds.n_u != n_u:
            raise InvalidScenario(f"bounds cover {bounds.n_u} inputs, plant has {n_u}")

        if noise is None:
            noise = NoiseSettings(np.zeros((1, 1)), np.eye(n_z), 0, False)
        r_ww = np.atleast_2d(np.array(noise.r_ww, dtype=float))
        r_vv = np.array(noise.r_vv, dtype=float)
        if r_vv.ndim == 1:
            r_vv = np.diag(r_vv)
        if r_ww.shape != (1, 1) or r_vv.shape != (n_z, n_z):
            raise InvalidScenario(f"R_ww must be 1x1 and R_vv {n_z}x{n_z}, got {r_ww.shape} and {r_vv.shape}")
        noise = NoiseSettings(r_ww, r_vv, int(noise.seed), bool(noise.enabled))

        q_c = np.eye(n_z) if q_c is None else np.array(q_c, dtype=float).reshape(n_z, n_z)
        if isinstance(method, str):
            method = Method.from_alias(method)

        self._set(
            plant_gu=gu,
            plant_gd=gd,
            noise_tfs=h,
            ts=float(ts),
            sim_time=float(sim_time),
            u_s=u_s,
            z_s=z_s,
            disturbance=windows,
            reference_events=events,
            bounds=bounds,
            noise=noise,
            q_c=q_c,
            horizon=int(horizon),
            model_noise_intensity=float(model_noise_intensity),
            method=method,
        )

    @classmethod
    def cement_mill(cls, **overrides: Any) -> ScenarioConfig:
        """The bundled cement-mill experiment: 12 h at a 2 minute sample time, a hardness
        disturbance between hours 3 and 9, and a reference step at hour 6.
        """
        params: Dict[str, Any] = dict(
            plant_gu=[[TransferFunction(*tf) for tf in row] for row in constants.CEMENT_MILL_GU],
            plant_gd=[TransferFunction(*tf) for tf in constants.CEMENT_MILL_GD],
            noise_tfs=[TransferFunction(*tf) for tf in constants.CEMENT_MILL_NOISE],
            ts=constants.CEMENT_MILL_SAMPLE_TIME,
            sim_time=constants.CEMENT_MILL_SIM_TIME,
            u_s=constants.CEMENT_MILL_U_S,
            z_s=constants.CEMENT_MILL_Z_S,
            disturbance=[DisturbanceWindow(*w) for w in constants.CEMENT_MILL_DISTURBANCE],
            reference_events=[ReferenceEvent(*constants.CEMENT_MILL_REFERENCE_STEP)],
            bounds=InputBounds(
                constants.CEMENT_MILL_BOUNDS[0],
                constants.CEMENT_MILL_BOUNDS[1],
                constants.CEMENT_MILL_RATE_BOUNDS[0],
                constants.CEMENT_MILL_RATE_BOUNDS[1],
                n_u=2,
            ),
            noise=NoiseSettings(
                np.array([[constants.CEMENT_MILL_R_WW]]),
                np.diag(constants.CEMENT_MILL_R_VV),
                0,
                True,
            ),
            q_c=constants.CEMENT_MILL_Q_C,
            horizon=constants.CEMENT_MILL_HORIZON,
        )
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_payload(cls, data: ScenarioPayload) -> ScenarioConfig:
        """Builds a scenario from a parsed scenario document. Omitted keys take the
        cement-mill values.
        """
        kwargs: Dict[str, Any] = {}
        if "plant_gu" in data:
            kwargs["plant_gu"] = [[TransferFunction.from_payload(tf) for tf in row] for row in data["plant_gu"]]
        if "plant_gd" in data:
            kwargs["plant_gd"] = [TransferFunction.from_payload(tf) for tf in data["plant_gd"]]
        if "noise_model" in data:
            kwargs["noise_tfs"] = [TransferFunction.from_payload(tf) for tf in data["noise_model"]]
        for key in ("ts", "sim_time", "u_s", "z_s", "q_c", "horizon", "model_noise_intensity", "method"):
            if key in data:
                kwargs[key] = data[key]  # type: ignore
        if "disturbance" in data:
            kwargs["disturbance"] = [DisturbanceWindow(w["start"], w["end"], w["value"]) for w in data["disturbance"]]
        if "reference_events" in data:
            kwargs["reference_events"] = [ReferenceEvent(e["time"], tuple(e["value"])) for e in data["reference_events"]]
        if "constraints" in data:
            c = data["constraints"]
            kwargs["bounds"] = InputBounds(c["u_min"], c["u_max"], c["du_min"], c["du_max"])
        if "noise" in data:
            n = data["noise"]
            kwargs["noise"] = NoiseSettings(
                np.atleast_2d(n["r_ww"]), np.array(n["r_vv"], dtype=float), n.get("seed", 0), n.get("enabled", True)
            )
        return cls.cement_mill(**kwargs)

    def to_payload(self) -> ScenarioPayload:
        return {  # type: ignore
            "schema": 1,
            "ts": self.ts,
            "sim_time": self.sim_time,
            "u_s": self.u_s.tolist(),
            "z_s": self.z_s.tolist(),
            "plant_gu": [[tf.to_payload() for tf in row] for row in self.plant_gu],
            "plant_gd": [tf.to_payload() for tf in self.plant_gd],
            "noise_model": [tf.to_payload() for tf in self.noise_tfs],
            "model_noise_intensity": self.model_noise_intensity,
            "disturbance": [w._asdict() for w in self.disturbance],
            "reference_events": [{"time": e.time, "value": list(e.value)} for e in self.reference_events],
            "constraints": {
                "u_min": self.bounds.u_min.tolist(),
                "u_max": self.bounds.u_max.tolist(),
                "du_min": self.bounds.du_min.tolist(),
                "du_max": self.bounds.du_max.tolist(),
            },
            "noise": {
                "r_ww": self.noise.r_ww.tolist(),
                "r_vv": self.noise.r_vv.tolist(),
                "seed": self.noise.seed,
                "enabled": self.noise.enabled,
            },
            "q_c": self.q_c.tolist(),
            "horizon": self.horizon,
            "method": str(self.method),
        }

    @property
    def n_steps(self) -> int:
        return int(round(self.sim_time / self.ts))

    @property
    def n_u(self) -> int:
        return len(self.plant_gu[0])

    @property
    def n_z(self) -> int:
        return len(self.plant_gu)

    def disturbance_at(self, t: float) -> float:
        return sum(w.value for w in self.disturbance if w.start <= t < w.end)

    def reference_at(self, t: float) -> np.ndarray:
        zbar = np.zeros(self.n_z)
        for e in self.reference_events:
            if e.time <= t:
                zbar = np.array(e.value)
        return zbar

    def event_times(self) -> List[float]:
        times = {w.start for w in self.disturbance} | {w.end for w in self.disturbance}
        times |= {e.time for e in self.reference_events}
        return sorted(t for t in times if 0.0 < t < self.sim_time)

    def __repr__(self):
        return f"<ScenarioConfig n_z={self.n_z} n_u={self.n_u} ts={self.ts!r} sim_time={self.sim_time!r}>"


class Trajectory(Frozen):
    """The closed-loop record, in absolute units.

    Attributes
    -----------
    t: :class:`numpy.ndarray`
        Sample times.
    u, z, y, zbar: :class:`numpy.ndarray`
        Applied inputs, true outputs, measurements and references, one row per sample.
    d: :class:`numpy.ndarray`
        The disturbance.
    """

    __slots__ = ("t", "u", "z", "y", "zbar", "d", "u_s", "z_s", "bounds", "event_times")

    if TYPE_CHECKING:
        t: np.ndarray
        u: np.ndarray
        z: np.ndarray
        y: np.ndarray
        zbar: np.ndarray
        d: np.ndarray
        u_s: np.ndarray
        z_s: np.ndarray
        bounds: InputBounds
        event_times: Tuple[float, ...]

    def __init__(self, **fields):
        self._set(**fields)

    @property
    def steps(self) -> int:
        return self.t.size

    @property
    def header(self) -> List[str]:
        n_u, n_z = self.u.shape[1], self.z.shape[1]
        return (
            ["t"]
            + [f"u{i + 1}" for i in range(n_u)]
            + [f"z{i + 1}" for i in range(n_z)]
            + [f"y{i + 1}" for i in range(n_z)]
            + [f"zbar{i + 1}" for i in range(n_z)]
            + ["d"]
        )

    def rows(self):
        for k in range(self.steps):
            yield [self.t[k], *self.u[k], *self.z[k], *self.y[k], *self.zbar[k], self.d[k]]

    def to_csv(self, path: str) -> None:
        write_csv(path, self.header, self.rows())

    def settling_times(self) -> List[Dict[str, Optional[float]]]:
        """Time after each event until every tracking error stays within 1 % of its peak
        in that event's window. ``None`` if it never does before the next event.
        """
        err = np.abs(self.z - self.zbar)
        out = []
        bounds = list(self.event_times) + [math.inf]
        for start, stop in zip(bounds[:-1], bounds[1:]):
            idx = np.flatnonzero((self.t >= start) & (self.t < stop))
            if idx.size == 0:
                continue
            window = err[idx]
            peak = window.max(axis=0)
            outside = np.flatnonzero(np.any((window > 0.01 * peak) & (peak > 0), axis=1))
            if outside.size == 0:
                settle: Optional[float] = 0.0
            elif outside[-1] == idx.size - 1:
                settle = None
            else:
                settle = float(self.t[idx[outside[-1] + 1]] - start)
            out.append({"time": float(start), "settling": settle})
        return out

    def summary(self) -> Dict[str, Any]:
        u_dev = self.u - self.u_s
        return {
            "steps": self.steps,
            "settling_times": self.settling_times(),
            "peak_deviation": np.abs(self.z - self.zbar).max(axis=0).tolist(),
            "max_constraint_violation": self.bounds.violation(u_dev),
        }

    def __repr__(self):
        return f"<Trajectory steps={self.steps}>"


def build_control_model(scenario: ScenarioConfig) -> MimoDelaySystem:
    """``G_u(s)`` with the integrating noise model appended."""
    noise = NoiseModel.from_transfer_functions(scenario.noise_tfs, intensity=scenario.model_noise_intensity)
    return MimoDelaySystem.from_transfer_functions(scenario.plant_gu, scenario.ts, noise=noise)


def build_plant_model(scenario: ScenarioConfig) -> MimoDelaySystem:
    """``[G_u(s), G_d(s)]``: the disturbance is an extra, last input."""
    grid = [list(row) + [gd] for row, gd in zip(scenario.plant_gu, scenario.plant_gd)]
    return MimoDelaySystem.from_transfer_functions(grid, scenario.ts)


def _discrete(system: MimoDelaySystem, q_c=None, method: Method = Method.MATRIX_EXP):
    coeffs = stack_mimo(system)
    result = solve(coeffs, q_c, None, method=method)
    sys = augment_discrete(result.a, result.b_o, coeffs.d_o, coeffs.c_c, coeffs.m_bar, coeffs.n_u)
    return sys, result


def run_closed_loop(
    scenario: ScenarioConfig,
    control_model: Optional[MimoDelaySystem] = None,
    plant_model: Optional[MimoDelaySystem] = None,
) -> Trajectory:
    """Simulates the controller, a Kalman filter on the control model, and the plant.

    At every sample the plant output is measured, the filter is updated, the QP is solved
    for the current estimate and reference, and the first input is applied to the plant
    together with the disturbance and its process noise.

    Raises
    -------
    ~lqd.ClosedLoopFailure
        The QP or the filter failed; :attr:`~ClosedLoopFailure.step` is the sample index.
    ~lqd.DimensionMismatch
        A model feeds the current input straight to the output.
    """
    control_model = control_model or build_control_model(scenario)
    plant_model = plant_model or build_plant_model(scenario)
    n_u, n_z = scenario.n_u, scenario.n_z

    sys_c, res_c = _discrete(control_model, scenario.q_c, scenario.method)
    sys_p, _ = _discrete(plant_model)
    if np.any(sys_c.d_tilde) or np.any(sys_p.d_tilde[:, :n_u]):
        raise DimensionMismatch("closed loop needs models without feedthrough of the current input")

    controller = MpcController(sys_c, res_c.q, res_c.m, scenario.horizon, scenario.bounds)
    ks = KalmanState.initial(sys_c)
    r_vv = scenario.noise.r_vv
    rng = np.random.default_rng(scenario.noise.seed)
    noisy = scenario.noise.enabled
    w_std = math.sqrt(float(scenario.noise.r_ww[0, 0]))

    n_steps = scenario.n_steps
    steps_per_hour = max(1, int(round(60.0 / scenario.ts)))
    x_p = np.zeros(sys_p.n_state)
    u_prev = np.zeros(n_u)
    rec: Dict[str, List[Any]] = {key: [] for key in ("t", "u", "z", "y", "zbar", "d")}

    for k in range(n_steps):
        t = k * scenario.ts
        d = scenario.disturbance_at(t)
        zbar = scenario.reference_at(t)

        z = sys_p.c_tilde @ x_p + sys_p.d_tilde[:, n_u:] @ np.array([d])
        v = rng.multivariate_normal(np.zeros(n_z), r_vv) if noisy else np.zeros(n_z)
        y = z + v

        try:
            ks = kalman_update(ks, y, sys_c, r_vv)
            plan = controller.solve(ks.x_hat, zbar, u_prev)
        except (QPNotConverged, InfeasibleConstraints, SingularInnovation) as exc:
            raise ClosedLoopFailure(str(exc), step=k) from exc
        u = plan[0]

        w = rng.normal(0.0, w_std) if noisy else 0.0
        x_p = sys_p.a_tilde @ x_p + sys_p.b_tilde @ np.concatenate([u, [d + w]])
        ks = kalman_predict(ks, u, sys_c, res_c.r_ww)

        rec["t"].append(t)
        rec["u"].append(u + scenario.u_s)
        rec["z"].append(z + scenario.z_s)
        rec["y"].append(y + scenario.z_s)
        rec["zbar"].append(zbar + scenario.z_s)
        rec["d"].append(d)
        u_prev = u

        if k % steps_per_hour == 0:
            log.debug("closed loop: t=%g, z=%s, u=%s", t, z, u)

    return Trajectory(
        t=np.array(rec["t"]),
        u=np.array(rec["u"]).reshape(n_steps, n_u),
        z=np.array(rec["z"]).reshape(n_steps, n_z),
        y=np.array(rec["y"]).reshape(n_steps, n_z),
        zbar=np.array(rec["zbar"]).reshape(n_steps, n_z),
        d=np.array(rec["d"]),
        u_s=scenario.u_s,
        z_s=scenario.z_s,
        bounds=scenario.bounds,
        event_times=tuple(scenario.event_times()),
    )
