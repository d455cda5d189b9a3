from collections import namedtuple

import numpy as np

from lqd import MimoDelaySystem, SisoDelayChannel

ScalarCase = namedtuple("ScalarCase", "a b c tau ts")
DelayCase = namedtuple("DelayCase", "tau ts l m v")

INTEGRATOR = ScalarCase(a=0.0, b=1.0, c=1.0, tau=0.0, ts=1.0)  # x' = u, z = x
DELAYED_INTEGRATOR = ScalarCase(a=0.0, b=1.0, c=1.0, tau=0.5, ts=1.0)
FIRST_ORDER = ScalarCase(a=-0.5, b=2.0, c=1.0, tau=0.0, ts=0.4)

DELAY_CASES = (
    DelayCase(tau=0.0, ts=1.0, l=0.0, m=0, v=0.0),
    DelayCase(tau=3.0, ts=2.0, l=1.5, m=2, v=0.5),
    DelayCase(tau=4.0, ts=2.0, l=2.0, m=2, v=0.0),
    DelayCase(tau=0.3, ts=1.0, l=0.3, m=1, v=0.7),
)


def scalar_system(case: ScalarCase, g_c=None) -> MimoDelaySystem:
    channel = SisoDelayChannel([[case.a]], [case.b], [case.c], 0.0, case.tau)
    return MimoDelaySystem([[channel]], case.ts, g_c=g_c)


def random_system(seed: int, n_z: int = 2, n_u: int = 2, order: int = 2, ts: float = 1.0, noise: bool = True):
    """A stable MIMO system with fractional delays of up to three samples on every channel."""
    rng = np.random.default_rng(seed)
    grid = []
    for _ in range(n_z):
        row = []
        for _ in range(n_u):
            poles = -rng.uniform(0.2, 2.0, order)
            a = np.diag(poles) + np.triu(rng.uniform(-0.5, 0.5, (order, order)), k=1)
            b = rng.standard_normal(order)
            c = rng.standard_normal(order)
            tau = rng.uniform(0.0, 3.0) * ts
            row.append(SisoDelayChannel(a, b, c, 0.0, tau))
        grid.append(row)
    n_x = n_z * n_u * order
    g_c = 0.3 * rng.standard_normal((n_x, 2)) if noise else None
    return MimoDelaySystem(grid, ts, g_c=g_c)
