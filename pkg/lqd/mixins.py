from typing import Any

import numpy as np


class Frozen:
    """Read-only model base. Subclasses assign their slots once through :meth:`_set`;
    array attributes are flagged non-writeable so shared instances cannot drift.
    """

    __slots__ = ()

    def _set(self, **attrs: Any) -> None:
        for name, value in attrs.items():
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __setattr__(self, name: str, value: Any):
        raise AttributeError(f"{self.__class__.__name__} is immutable")

    def __delattr__(self, name: str):
        raise AttributeError(f"{self.__class__.__name__} is immutable")
