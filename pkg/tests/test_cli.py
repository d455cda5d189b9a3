import csv
import json
import logging

import pytest

from lqd import PayloadError, __version__
from lqd.cli import BENCH_HEADER, BENCH_THREADS_ENV, Check, bench_threads, closed_form_checks, main, realization_check
from lqd.utils import load_json, problem_from_payload, system_from_payload
from tests import random_system

SYSTEM = {
    "schema": 1,
    "sample_time": 0.5,
    "channels": [[{"num": [2.0], "den": [3.0, 1.0], "delay": 0.7}]],
    "g_c": [[0.5]],
}
PROBLEM = {"schema": 1, "system": SYSTEM, "q_c": [[1.0]], "horizon": 3, "p0": [[0.1]]}


def _write(path, data) -> str:
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fp:
        return list(csv.reader(fp))


def test_check_str() -> None:
    assert str(Check("closed form", True)) == "PASS closed form"
    assert str(Check("realization", False, "error 1")) == "FAIL realization (error 1)"


def test_closed_form_checks_pass() -> None:
    checks = closed_form_checks()
    assert len(checks) == 6
    assert all(c.passed for c in checks), [str(c) for c in checks]


def test_realization_check_passes() -> None:
    assert realization_check(random_system(0, noise=False), steps=20).passed


def test_load_json_errors(tmp_path) -> None:
    broken = _write(tmp_path / "broken.json", '{\n  "schema": 1,\n  oops\n}')
    with pytest.raises(PayloadError) as info:
        load_json(broken)
    assert info.value.line == 3
    assert f"{broken}:3" in str(info.value)

    with pytest.raises(PayloadError):
        load_json(str(tmp_path / "missing.json"))
    with pytest.raises(PayloadError):
        load_json(_write(tmp_path / "future.json", {"schema": 2}))
    with pytest.raises(PayloadError) as info:
        load_json(_write(tmp_path / "list.json", [1, 2]))
    assert info.value.line == 1


def test_problem_payload_errors() -> None:
    with pytest.raises(PayloadError, match="missing 'horizon'"):
        problem_from_payload({"system": SYSTEM, "q_c": [[1.0]]})
    with pytest.raises(PayloadError, match="channel"):
        system_from_payload({"sample_time": 1.0, "channels": [[{"delay": 1.0}]]})
    with pytest.raises(PayloadError, match="positive semidefinite"):
        problem_from_payload({"system": SYSTEM, "q_c": [[-1.0]], "horizon": 2})


def test_state_space_channels() -> None:
    system = system_from_payload(
        {"sample_time": 1.0, "channels": [[{"a": [[-1.0]], "b": [1.0], "c": [2.0], "delay": 0.5}]]}
    )
    assert system.n_x == 1
    assert system.channels[0][0].tau == 0.5


def test_system_path_is_relative_to_problem(tmp_path) -> None:
    _write(tmp_path / "system.json", SYSTEM)
    path = _write(tmp_path / "problem.json", dict(PROBLEM, system="system.json"))
    problem = problem_from_payload(load_json(path), path=path)
    assert problem.system.sample_time == 0.5
    assert problem.horizon_steps == 3


def test_discretize_to_stdout(tmp_path, capsys) -> None:
    path = _write(tmp_path / "problem.json", PROBLEM)
    assert main(["discretize", path, "--method", "doubling", "--j", "6"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["method"] == "STEP_DOUBLING"
    assert payload["n_steps"] == 64
    assert payload["m_bar"] == 2
    assert len(payload["rho_s_k"]) == 3


def test_discretize_deterministic_files(tmp_path) -> None:
    path = _write(tmp_path / "problem.json", PROBLEM)
    out = tmp_path / "result.json"
    assert main(["discretize", path, "--deterministic", "--out", str(out)]) == 0

    payload = json.loads(out.read_text())
    assert "R_ww" not in payload
    rows = _read_csv(tmp_path / "result.csv")
    assert rows[0] == ["name", "row", "col", "value"]
    assert {r[0] for r in rows[1:]} == {"A", "B_o", "Q", "M", "Gamma"}


def test_discretize_default_problem(tmp_path, capsys) -> None:
    path = str(tmp_path / "cement.json")
    assert main(["discretize", "--write-default", path]) == 0
    assert "cement-mill" in capsys.readouterr().out
    assert load_json(path)["horizon"] == 100

    out = tmp_path / "cement_result.json"
    assert main(["discretize", path, "--method", "doubling", "--j", "4", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert len(payload["q_k"]) == 100
    assert payload["n_x"] == 8


def test_malformed_file_exit_code(tmp_path, capsys) -> None:
    path = _write(tmp_path / "broken.json", '{\n  "schema": 1,\n  oops\n}')
    assert main(["discretize", path]) == 1
    assert f"lqd: error: {path}:3" in capsys.readouterr().err


def test_missing_problem(capsys) -> None:
    assert main(["discretize"]) == 1
    assert "no problem file given" in capsys.readouterr().err


def test_validate(tmp_path, capsys) -> None:
    path = _write(tmp_path / "problem.json", PROBLEM)
    assert main(["validate", path, "--n", "1024", "--j", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    assert any("realization" in line for line in lines)
    assert any("STEP_DOUBLING agrees" in line for line in lines)


def test_bench(tmp_path, capsys) -> None:
    path = _write(tmp_path / "problem.json", PROBLEM)
    out = tmp_path / "bench.csv"
    assert main(["bench", path, "--j", "4", "--repeats", "1", "--out", str(out)]) == 0
    assert "PASS step doubling equals fixed step" in capsys.readouterr().out

    rows = _read_csv(out)
    assert rows[0] == BENCH_HEADER
    assert [r[0] for r in rows[1:]] == ["MATRIX_EXP", "FIXED_STEP", "STEP_DOUBLING"]
    assert rows[1][2] == ""
    assert rows[2][2] == rows[3][2] == "16"
    assert float(rows[1][4]) == 0.0


def test_bench_takes_step_count_from_j(tmp_path, capsys) -> None:
    path = _write(tmp_path / "problem.json", PROBLEM)
    with pytest.raises(SystemExit) as exc:
        main(["bench", path, "--n", "8"])
    assert exc.value.code == 2
    assert "--n" in capsys.readouterr().err


def test_bench_threads(monkeypatch, caplog) -> None:
    monkeypatch.delenv(BENCH_THREADS_ENV, raising=False)
    assert bench_threads() == 1
    monkeypatch.setenv(BENCH_THREADS_ENV, "3")
    assert bench_threads() == 3
    monkeypatch.setenv(BENCH_THREADS_ENV, "many")
    with caplog.at_level(logging.WARNING, logger="lqd.cli"):
        assert bench_threads() == 1
    assert BENCH_THREADS_ENV in caplog.text


def test_simulate(tmp_path, capsys) -> None:
    data = {
        "schema": 1,
        "sim_time": 20.0,
        "horizon": 10,
        "disturbance": [],
        "reference_events": [{"time": 10.0, "value": [0.5, 10.0]}],
    }
    scenario = _write(tmp_path / "scenario.json", data)
    out = tmp_path / "traj.csv"
    assert main(["simulate", scenario, "--seed", "3", "--out", str(out)]) == 0
    assert "PASS input constraints" in capsys.readouterr().out

    rows = _read_csv(out)
    assert rows[0] == ["t", "u1", "u2", "z1", "z2", "y1", "y2", "zbar1", "zbar2", "d"]
    assert len(rows) == 11
    summary = json.loads((tmp_path / "traj.summary.json").read_text())
    assert summary["steps"] == 10
    assert summary["max_constraint_violation"] <= 1e-8


def test_simulate_write_default(tmp_path) -> None:
    path = str(tmp_path / "scenario.json")
    assert main(["simulate", "--write-default", path]) == 0
    data = load_json(path)
    assert data["horizon"] == 100
    assert data["noise"]["r_vv"] == [[0.1, 0.0], [0.0, 50.0]]


def test_simulate_rejects_bad_scenario(tmp_path, capsys) -> None:
    scenario = _write(tmp_path / "scenario.json", {"schema": 1, "sim_time": 20.0, "disturbance": [{"start": 5.0}]})
    assert main(["simulate", scenario, "--out", str(tmp_path / "t.csv")]) == 1
    assert "malformed scenario" in capsys.readouterr().err


def test_version(capsys) -> None:
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path) -> None:
    data = {"schema": 1, "sim_time": 10.0, "horizon": 5, "disturbance": [], "reference_events": []}
    scenario = _write(tmp_path / "scenario.json", data)
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    assert main(["simulate", scenario, "--seed", "11", "--out", str(first)]) == 0
    assert main(["simulate", scenario, "--seed", "11", "--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()
