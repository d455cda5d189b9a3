import math

from .enums import Method

__all__ = (
    "TABLEAUS",
    "DEFAULT_TABLEAU",
    "METHOD_ALIASES",
    "CEMENT_MILL_SAMPLE_TIME",
    "CEMENT_MILL_GU",
    "CEMENT_MILL_GD",
    "CEMENT_MILL_NOISE",
    "CEMENT_MILL_U_S",
    "CEMENT_MILL_Z_S",
    "CEMENT_MILL_Q_C",
    "CEMENT_MILL_HORIZON",
)

# butcher tableaus: name -> (a, b, order)
_GAUSS_R = math.sqrt(3.0) / 6.0

TABLEAUS = {
    "euler": ([[0.0]], [1.0], 1),
    "midpoint": ([[0.0, 0.0], [0.5, 0.0]], [0.0, 1.0], 2),
    "heun": ([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5], 2),
    "ralston": ([[0.0, 0.0], [2.0 / 3.0, 0.0]], [0.25, 0.75], 2),
    "rk3": (
        [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [-1.0, 2.0, 0.0]],
        [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        3,
    ),
    "rk4": (
        [
            [0.0, 0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        4,
    ),
    "rk38": (
        [
            [0.0, 0.0, 0.0, 0.0],
            [1.0 / 3.0, 0.0, 0.0, 0.0],
            [-1.0 / 3.0, 1.0, 0.0, 0.0],
            [1.0, -1.0, 1.0, 0.0],
        ],
        [0.125, 0.375, 0.375, 0.125],
        4,
    ),
    "backward_euler": ([[1.0]], [1.0], 1),
    "implicit_midpoint": ([[0.5]], [1.0], 2),
    "gauss2": (
        [[0.25, 0.25 - _GAUSS_R], [0.25 + _GAUSS_R, 0.25]],
        [0.5, 0.5],
        4,
    ),
}

DEFAULT_TABLEAU = "rk4"

METHOD_ALIASES = {
    "ode": Method.FIXED_STEP,
    "fixed_step": Method.FIXED_STEP,
    "expm": Method.MATRIX_EXP,
    "matrix_exp": Method.MATRIX_EXP,
    "doubling": Method.STEP_DOUBLING,
    "step_doubling": Method.STEP_DOUBLING,
}

# cement mill, time in minutes
# inputs: feed flow rate [TPH], separator speed [%]
# outputs: elevator load [kW], fineness [cm^2/g]
# disturbance: clinker hardness [HGI]
CEMENT_MILL_SAMPLE_TIME = 2.0

# (numerator, denominator, delay), polynomial coefficients highest power first
CEMENT_MILL_GU = (
    (([12.8], [16.7, 1.0], 1.0), ([-18.9], [21.0, 1.0], 3.0)),
    (([6.6], [10.9, 1.0], 7.0), ([-19.4], [14.4, 1.0], 3.0)),
)

CEMENT_MILL_GD = (
    ([-1.0], [32.0 * 21.0, 32.0 + 21.0, 1.0], 3.0),
    ([60.0], [30.0 * 20.0, 30.0 + 20.0, 1.0], 0.0),
)

# stochastic part of the control model, 1/s * 1/(10s + 1) on each output
CEMENT_MILL_NOISE = (
    ([1.0], [10.0, 1.0, 0.0]),
    ([1.0], [10.0, 1.0, 0.0]),
)

CEMENT_MILL_U_S = (128.0, 60.0)
CEMENT_MILL_Z_S = (25.0, 3100.0)
CEMENT_MILL_Q_C = ((1.0, 0.0), (0.0, 1.0))

# 200 minutes at the 2 minute sample time
CEMENT_MILL_HORIZON = 100

CEMENT_MILL_SIM_TIME = 720.0
CEMENT_MILL_DISTURBANCE = ((180.0, 540.0, 20.0),)
CEMENT_MILL_REFERENCE_STEP = (360.0, (1.0, 50.0))
CEMENT_MILL_R_WW = 1.0
CEMENT_MILL_R_VV = (0.1, 50.0)
CEMENT_MILL_BOUNDS = (-20.0, 20.0)
CEMENT_MILL_RATE_BOUNDS = (-2.0, 2.0)
