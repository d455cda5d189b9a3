from enum import Enum, auto
from typing import Any

__all__ = (
    "Method",
    "try_enum",
)


class _LQDEnum(Enum):
    def _generate_next_value_(name, start, count, last_values):
        return name

    @classmethod
    def _missing_(cls, value):
        return cls[str(value).upper()]

    def __str__(self):
        return self.name


class Method(_LQDEnum):
    """Represents one of the three discretization methods. Each one returns an identical
    :class:`DiscretizationResult`.
    """

    FIXED_STEP = auto()
    MATRIX_EXP = auto()
    STEP_DOUBLING = auto()

    @classmethod
    def from_alias(cls, alias: str) -> "Method":
        """Resolves a command-line alias (``ode``, ``expm``, ``doubling``) or a member name."""
        from .constants import METHOD_ALIASES

        method = METHOD_ALIASES.get(alias.lower()) or try_enum(cls, alias)
        if not isinstance(method, cls):
            raise ValueError(f"unknown method {alias!r}")
        return method

    @property
    def uses_tableau(self) -> bool:
        return self is not Method.MATRIX_EXP


def try_enum(cls, val: Any) -> Any:
    try:
        return cls(val)
    except (TypeError, KeyError, ValueError):
        return val
