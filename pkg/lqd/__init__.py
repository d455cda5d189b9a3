__title__ = "lqd"
__author__ = "lqd.py contributors"
__license__ = "MIT"
__copyright__ = "Copyright 2024-present lqd.py contributors"
__version__ = "0.1.0a"

import logging

from . import utils
from .delay_model import *
from .enums import *
from .errors import *
from .kalman import *
from .lq_api import *
from .mpc_sim import *
from .ode_rhs import *
from .qp import *
from .solvers import *

logging.getLogger(__name__).addHandler(logging.NullHandler())
