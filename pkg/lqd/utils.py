from __future__ import annotations

import csv
import json
import os
from typing import TYPE_CHECKING, Any, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import LQDException, PayloadError

if TYPE_CHECKING:
    from .delay_model import MimoDelaySystem
    from .lq_api import ContinuousLqProblem
    from .types import ProblemPayload, SystemPayload

__all__ = (
    "format_float",
    "load_json",
    "dump_json",
    "write_csv",
    "write_matrices_csv",
    "system_from_payload",
    "problem_from_payload",
    "cement_mill_problem_payload",
    "cement_mill_problem",
)

SCHEMA_VERSION = 1


def format_float(value: float) -> str:
    """17 significant digits, enough to read back the same double."""
    return "%.17g" % value


def load_json(path: str) -> Dict[str, Any]:
    """Reads a JSON document and checks its schema version.

    Raises
    -------
    ~lqd.PayloadError
        The file cannot be read, is not valid JSON (the error carries the line number),
        or has an unsupported schema version.
    """
    try:
        with open(path) as fp:
            data = json.load(fp)
    except json.JSONDecodeError as exc:
        raise PayloadError(exc.msg, path=path, line=exc.lineno) from exc
    except OSError as exc:
        raise PayloadError(exc.strerror or str(exc), path=path) from exc

    if not isinstance(data, dict):
        raise PayloadError("top level must be an object", path=path, line=1)
    schema = data.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise PayloadError(f"unsupported schema {schema!r}, expected {SCHEMA_VERSION}", path=path)
    return data


def dump_json(path: str, data: Mapping[str, Any]) -> None:
    with open(path, "w") as fp:
        json.dump(data, fp, indent=2)
        fp.write("\n")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Writes rows, formatting every float with :func:`format_float`."""
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrices_csv(path: str, matrices: Mapping[str, np.ndarray]) -> None:
    """Dumps named matrices in long form: ``name, row, col, value``."""

    def rows():
        for name, mat in matrices.items():
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            for (i, j), value in np.ndenumerate(mat):
                yield [name, i, j, float(value)]

    write_csv(path, ["name", "row", "col", "value"], rows())


def _require(data: Mapping[str, Any], key: str, path: Optional[str], where: str) -> Any:
    try:
        return data[key]
    except KeyError:
        raise PayloadError(f"{where} is missing {key!r}", path=path) from None


def system_from_payload(data: SystemPayload, *, path: Optional[str] = None) -> MimoDelaySystem:
    """Builds a :class:`MimoDelaySystem` from a system document.

    Channels are either transfer functions (``num``, ``den``, ``delay``) or state-space
    triples (``a``, ``b``, ``c``, ``d``, ``delay``).
    """
    from .delay_model import MimoDelaySystem, NoiseModel, SisoDelayChannel
    from .mpc_sim import TransferFunction, tf_realize

    ts = _require(data, "sample_time", path, "system")
    grid = _require(data, "channels", path, "system")
    try:
        channels = []
        for i, row in enumerate(grid):
            out_row = []
            for j, ch in enumerate(row):
                if "num" in ch:
                    out_row.append(tf_realize(TransferFunction.from_payload(ch)))
                elif "a" in ch:
                    out_row.append(
                        SisoDelayChannel(ch["a"], ch.get("b", []), ch.get("c", []), ch.get("d", 0.0), ch.get("delay", 0.0))
                    )
                else:
                    raise PayloadError(f"channel ({i}, {j}) needs 'num'/'den' or 'a'/'b'/'c'", path=path)
            channels.append(out_row)

        noise = None
        if "noise_model" in data:
            nm = data["noise_model"]
            tfs = [TransferFunction.from_payload(tf) for tf in _require(nm, "channels", path, "noise_model")]
            noise = NoiseModel.from_transfer_functions(tfs, intensity=nm.get("intensity", 1.0))
        return MimoDelaySystem(channels, ts, g_c=data.get("g_c"), noise=noise)
    except (KeyError, TypeError, ValueError) as exc:
        raise PayloadError(f"malformed system: {exc}", path=path) from exc


def problem_from_payload(data: ProblemPayload, *, path: Optional[str] = None) -> ContinuousLqProblem:
    """Builds a :class:`ContinuousLqProblem` from a problem document. A string ``system``
    is a path relative to the problem file.
    """
    from .lq_api import ContinuousLqProblem

    system_data = _require(data, "system", path, "problem")
    system_path = path
    if isinstance(system_data, str):
        base = os.path.dirname(path) if path else "."
        system_path = os.path.join(base, system_data)
        system_data = load_json(system_path)
    system = system_from_payload(system_data, path=system_path)

    try:
        return ContinuousLqProblem(
            system,
            data.get("q_c"),
            _require(data, "horizon", path, "problem"),
            data.get("references"),
            data.get("x0"),
            data.get("p0"),
            w_z=data.get("w_z"),
            u_history=data.get("u_history"),
        )
    except LQDException as exc:
        if isinstance(exc, PayloadError):
            raise
        raise PayloadError(str(exc), path=path) from exc


def cement_mill_problem_payload() -> ProblemPayload:
    """The cement-mill control model with its noise model, unit output weights and a
    200 minute horizon at the steady state.
    """
    from . import constants

    def tf(num, den, delay=0.0):
        return {"num": list(num), "den": list(den), "delay": delay}

    n_z = len(constants.CEMENT_MILL_GU)
    n_x = sum(len(den) - 1 for row in constants.CEMENT_MILL_GU for _, den, _ in row)
    n_x += sum(len(den) - 1 for _, den in constants.CEMENT_MILL_NOISE)
    horizon = constants.CEMENT_MILL_HORIZON
    return {  # type: ignore
        "schema": SCHEMA_VERSION,
        "system": {
            "schema": SCHEMA_VERSION,
            "sample_time": constants.CEMENT_MILL_SAMPLE_TIME,
            "channels": [[tf(*ch) for ch in row] for row in constants.CEMENT_MILL_GU],
            "noise_model": {"channels": [tf(*ch) for ch in constants.CEMENT_MILL_NOISE], "intensity": 1.0},
        },
        "q_c": [list(row) for row in constants.CEMENT_MILL_Q_C],
        "horizon": horizon,
        "references": [[0.0] * n_z for _ in range(horizon)],
        "x0": [0.0] * n_x,
        "p0": np.eye(n_x).tolist(),
    }


def cement_mill_problem() -> ContinuousLqProblem:
    return problem_from_payload(cement_mill_problem_payload())
