from typing import List, Literal, Optional, TypedDict, Union

MethodName = Literal["FIXED_STEP", "MATRIX_EXP", "STEP_DOUBLING"]
Matrix = List[List[float]]
Vector = List[float]


class _Versioned(TypedDict):
    schema: int


class TransferFunctionPayload(TypedDict, total=False):
    num: Vector
    den: Vector
    delay: float


class StateSpaceChannelPayload(TypedDict, total=False):
    a: Matrix
    b: Vector
    c: Vector
    d: float
    delay: float


ChannelPayload = Union[TransferFunctionPayload, StateSpaceChannelPayload]


class NoiseModelPayload(TypedDict, total=False):
    channels: List[TransferFunctionPayload]
    intensity: float


class SystemPayload(_Versioned, total=False):
    sample_time: float
    channels: List[List[ChannelPayload]]
    g_c: Matrix
    noise_model: NoiseModelPayload


class ProblemPayload(_Versioned, total=False):
    system: Union[SystemPayload, str]
    q_c: Matrix
    w_z: Matrix
    horizon: int
    references: Matrix
    x0: Vector
    p0: Matrix
    u_history: Matrix


class DisturbanceWindowPayload(TypedDict):
    start: float
    end: float
    value: float


class ReferenceEventPayload(TypedDict):
    time: float
    value: Vector


class ConstraintsPayload(TypedDict):
    u_min: Union[float, Vector]
    u_max: Union[float, Vector]
    du_min: Union[float, Vector]
    du_max: Union[float, Vector]


class NoisePayload(TypedDict, total=False):
    r_ww: Union[float, Matrix]
    r_vv: Union[Vector, Matrix]
    seed: int
    enabled: bool


class ScenarioPayload(_Versioned, total=False):
    ts: float
    sim_time: float
    u_s: Vector
    z_s: Vector
    plant_gu: List[List[TransferFunctionPayload]]
    plant_gd: List[TransferFunctionPayload]
    noise_model: List[TransferFunctionPayload]
    model_noise_intensity: float
    disturbance: List[DisturbanceWindowPayload]
    reference_events: List[ReferenceEventPayload]
    constraints: ConstraintsPayload
    noise: NoisePayload
    q_c: Matrix
    horizon: int
    method: str


class ResultPayload(_Versioned, total=False):
    method: MethodName
    tableau: Optional[str]
    n_steps: Optional[int]
    sample_time: float
    wall_time: float
    n_x: int
    m_bar: int
    n_u: int
    A: Matrix
    B_o: Matrix
    Gamma: Matrix
    A_tilde: Matrix
    B_tilde: Matrix
    C_tilde: Matrix
    D_tilde: Matrix
    Q: Matrix
    M: Matrix
    q_k: Matrix
    rho_k: Vector
    x0: Vector
    rho_w: float
    R_ww: Matrix
    rho_s_k: Vector
