from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import __version__
from .constants import DEFAULT_TABLEAU, METHOD_ALIASES, TABLEAUS
from .delay_model import MimoDelaySystem, SisoDelayChannel, augment_discrete, dense_reference_sim, stack_mimo
from .enums import Method
from .errors import LQDException, PayloadError
from .lq_api import Discretizer, discretize
from .mpc_sim import ScenarioConfig, run_closed_loop
from .solvers import DiscretizationResult, compare, discretize_timed, solve
from .utils import (
    cement_mill_problem_payload,
    dump_json,
    load_json,
    problem_from_payload,
    write_csv,
    write_matrices_csv,
)

__all__ = ("main",)

log = logging.getLogger(__name__)

BENCH_THREADS_ENV = "LQD_BENCH_THREADS"

# doubling and fixed-step must agree to this relative tolerance
_EQUIVALENCE_TOL = 1e-12
_CLOSED_FORM_TOL = 1e-12
_REALIZATION_TOL = 1e-6
_AGREEMENT_TOL = 1e-6
_PSD_TOL = 1e-12
_VIOLATION_TOL = 1e-8


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}" + (f" ({self.detail})" if self.detail else "")


def _sibling(path: str, suffix: str) -> str:
    root, _ = os.path.splitext(path)
    return root + suffix


def _load_problem(path: str):
    return problem_from_payload(load_json(path), path=path)


def _relative(x: np.ndarray, ref: np.ndarray) -> float:
    if not x.size:
        return 0.0
    return float(np.linalg.norm(x - ref, np.inf) / max(1.0, np.linalg.norm(ref, np.inf)))


def closed_form_checks(*, n: int = 16, j: int = 4, tableau: Optional[str] = None) -> List[Check]:
    """The integrator ``x' = u``, ``z = x`` at ``T_s = 1`` has closed-form coefficients.

    Without delay ``A = 1``, ``B_o = 1``, ``Q = [1, 1/2; 1/2, 1/3]``, ``M = -[1; 1/2]`` and
    ``R_ww = 1``. With a half-sample delay ``B_o = [1/2, 1/2]``. The integrands are
    polynomial, so a few steps of any order-3 method are exact.
    """
    delay_free = MimoDelaySystem([[SisoDelayChannel([[0.0]], [1.0], [1.0])]], 1.0, g_c=[[1.0]])
    delayed = MimoDelaySystem([[SisoDelayChannel([[0.0]], [1.0], [1.0], tau=0.5)]], 1.0)
    expected = {
        "A": np.array([[1.0]]),
        "B_o": np.array([[1.0]]),
        "Q": np.array([[1.0, 0.5], [0.5, 1.0 / 3.0]]),
        "M": -np.array([[1.0], [0.5]]),
        "R_ww": np.array([[1.0]]),
    }

    checks = []
    for method in Method:
        kw: Dict[str, Any] = dict(method=method, n=n, j=j, tableau=tableau)
        res = solve(stack_mimo(delay_free), [[1.0]], None, **kw)
        got = res.matrices()
        err = max(float(np.abs(got[name] - value).max()) for name, value in expected.items())
        checks.append(Check(f"closed form, integrator, {method}", err <= _CLOSED_FORM_TOL, f"max error {err:.3g}"))

        res = solve(stack_mimo(delayed), [[1.0]], None, **kw)
        err = float(np.abs(res.b_o - np.array([[0.5, 0.5]])).max())
        checks.append(Check(f"closed form, delayed integrator, {method}", err <= _CLOSED_FORM_TOL, f"max error {err:.3g}"))
    return checks


def realization_check(system: MimoDelaySystem, *, steps: int = 50, seed: int = 0) -> Check:
    """Drives the delay-free realization and the dense delayed-ODE integration with the
    same random inputs and compares the sampled outputs.
    """
    coeffs = stack_mimo(system)
    res = solve(coeffs, method=Method.MATRIX_EXP)
    sys = augment_discrete(res.a, res.b_o, coeffs.d_o, coeffs.c_c, coeffs.m_bar, coeffs.n_u)
    u_seq = np.random.default_rng(seed).standard_normal((steps, system.n_u))
    z = sys.simulate(u_seq)
    z_ref = dense_reference_sim(system, u_seq)
    err = float(np.abs(z - z_ref).max() / max(1.0, np.abs(z_ref).max()))
    return Check("realization vs dense simulation", err <= _REALIZATION_TOL, f"relative error {err:.3g}")


def agreement_checks(system: MimoDelaySystem, q_c, *, n: int, j: int, tableau: Optional[str]) -> List[Check]:
    coeffs = stack_mimo(system)
    ref = solve(coeffs, q_c, method=Method.MATRIX_EXP)
    checks = []
    for method in (Method.FIXED_STEP, Method.STEP_DOUBLING):
        res = solve(coeffs, q_c, method=method, n=n, j=j, tableau=tableau)
        errs = {name: _relative(got, ref.matrices()[name]) for name, got in res.matrices().items() if name != "Gamma"}
        worst = max(errs, key=errs.__getitem__)
        checks.append(
            Check(f"{method} agrees with MATRIX_EXP", errs[worst] <= _AGREEMENT_TOL, f"worst {worst} {errs[worst]:.3g}")
        )
    return checks


def _min_eig(x: np.ndarray) -> float:
    if not x.size:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (x + x.T)).min())


def psd_checks(problem, *, method: Method = Method.MATRIX_EXP) -> List[Check]:
    disc = discretize(problem, method)
    named = {"Q": disc.q, "R_ww": disc.r_ww}
    named.update({f"P_{k}": p for k, p in enumerate(disc.p_k)})
    checks = []
    for name, mat in named.items():
        scale = max(1.0, float(np.abs(mat).max())) if mat.size else 1.0
        asym = float(np.abs(mat - mat.T).max()) if mat.size else 0.0
        low = _min_eig(mat)
        ok = asym <= _PSD_TOL * scale and low >= -_PSD_TOL * scale
        if not ok or name in ("Q", "R_ww"):
            checks.append(Check(f"{name} symmetric PSD", ok, f"asymmetry {asym:.3g}, min eigenvalue {low:.3g}"))
    if all(c.passed for c in checks):
        checks.append(Check(f"P_0..P_{len(disc.p_k) - 1} symmetric PSD", True))
    return checks


class BenchRow(NamedTuple):
    result: DiscretizationResult
    errors: Dict[str, float]

    def cells(self) -> List[Any]:
        res = self.result
        return [
            str(res.method),
            res.tableau or "",
            res.n_steps if res.n_steps is not None else "",
            res.wall_time,
            *(self.errors[name] for name in ("A", "B_o", "R_ww", "M", "Q")),
        ]


BENCH_HEADER = ["method", "tableau", "N", "wall_time", "e_A", "e_B_o", "e_R_ww", "e_M", "e_Q"]


def bench_threads() -> int:
    raw = os.environ.get(BENCH_THREADS_ENV)
    if raw is None:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        threads = 0
    if threads < 1:
        log.warning("ignoring %s=%r, using 1 thread", BENCH_THREADS_ENV, raw)
        return 1
    return threads


def run_bench(problem_path: str, n_exponent: int, *, tableau: Optional[str] = None, repeats: int = 5, out: Optional[str] = None):
    """Times the three solvers on a problem and compares each one against the matrix
    exponential.

    Returns
    --------
    Tuple[List[:class:`BenchRow`], :class:`Check`]: The rows (matrix exponential first) and
    the check that step doubling reproduces the fixed-step result.
    """
    problem = _load_problem(problem_path)
    coeffs = stack_mimo(problem.system)
    n = 2**n_exponent

    jobs: Dict[Method, Callable[[], DiscretizationResult]] = {
        Method.MATRIX_EXP: lambda: discretize_timed(solve, coeffs, problem.q_c, method=Method.MATRIX_EXP, repeats=repeats),
        Method.FIXED_STEP: lambda: discretize_timed(
            solve, coeffs, problem.q_c, method=Method.FIXED_STEP, n=n, tableau=tableau, repeats=repeats
        ),
        Method.STEP_DOUBLING: lambda: discretize_timed(
            solve, coeffs, problem.q_c, method=Method.STEP_DOUBLING, j=n_exponent, tableau=tableau, repeats=repeats
        ),
    }
    threads = bench_threads()
    log.info("bench: N=2**%d, %d repeats, %d thread(s)", n_exponent, repeats, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {method: pool.submit(job) for method, job in jobs.items()}
        results = {method: fut.result() for method, fut in futures.items()}

    ref = results[Method.MATRIX_EXP]
    rows = [BenchRow(res, compare(res, ref)) for res in results.values()]

    fixed, doubled = results[Method.FIXED_STEP].matrices(), results[Method.STEP_DOUBLING].matrices()
    errs = {name: _relative(doubled[name], fixed[name]) for name in fixed}
    worst = max(errs, key=errs.__getitem__)
    equivalence = Check(
        "step doubling equals fixed step", errs[worst] <= _EQUIVALENCE_TOL, f"worst {worst} {errs[worst]:.3g}"
    )

    if out is not None:
        write_csv(out, BENCH_HEADER, (row.cells() for row in rows))
    return rows, equivalence


def run_simulate(scenario_path: str, out_path: str, *, seed: Optional[int] = None) -> int:
    """Runs a closed-loop scenario, writes the trajectory CSV and a ``.summary.json``
    next to it, and returns the exit status.
    """
    data = load_json(scenario_path)
    try:
        scenario = ScenarioConfig.from_payload(data)  # type: ignore
    except (KeyError, TypeError, ValueError) as exc:
        raise PayloadError(f"malformed scenario: {exc}", path=scenario_path) from exc

    if seed is not None:
        payload = scenario.to_payload()
        payload["noise"]["seed"] = seed
        scenario = ScenarioConfig.from_payload(payload)

    traj = run_closed_loop(scenario)
    traj.to_csv(out_path)
    summary = traj.summary()
    dump_json(_sibling(out_path, ".summary.json"), summary)

    check = Check(
        "input constraints", summary["max_constraint_violation"] <= _VIOLATION_TOL,
        f"max violation {summary['max_constraint_violation']:.3g}",
    )
    print(f"{traj.steps} steps written to {out_path}")
    print(check)
    return 0 if check.passed else 1


def _cmd_discretize(args: argparse.Namespace) -> int:
    if args.write_default:
        dump_json(args.write_default, cement_mill_problem_payload())
        print(f"wrote the cement-mill problem to {args.write_default}")
        if args.problem is None:
            return 0
    if args.problem is None:
        raise PayloadError("no problem file given")

    problem = _load_problem(args.problem)
    disc = Discretizer(args.method, tableau=args.tableau, n=args.n, j=args.j, stochastic=not args.deterministic)
    result = disc.discretize(problem)
    payload = result.to_payload()
    if args.out is None:
        print(json.dumps(payload, indent=2))
        return 0

    dump_json(args.out, payload)
    matrices = dict(result.result.matrices())
    if args.deterministic:
        matrices.pop("R_ww")
    write_matrices_csv(_sibling(args.out, ".csv"), matrices)
    log.info("wrote %s", args.out)
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    problem = _load_problem(args.problem)
    checks = closed_form_checks()
    checks.append(realization_check(problem.system, seed=args.seed))
    checks.extend(agreement_checks(problem.system, problem.q_c, n=args.n, j=args.j, tableau=args.tableau))
    checks.extend(psd_checks(problem))
    for check in checks:
        print(check)
    return 0 if all(c.passed for c in checks) else 1


def _cmd_bench(args: argparse.Namespace) -> int:
    rows, equivalence = run_bench(args.problem, args.j, tableau=args.tableau, repeats=args.repeats, out=args.out)
    for row in rows:
        res = row.result
        errs = " ".join(f"e({name})={value:.3g}" for name, value in row.errors.items())
        print(f"{str(res.method):<14} N={res.n_steps or '-':<6} {res.wall_time:.4f}s {errs}")
    print(equivalence)
    return 0 if equivalence.passed else 1


def _cmd_simulate(args: argparse.Namespace) -> int:
    if args.write_default:
        dump_json(args.write_default, ScenarioConfig.cement_mill().to_payload())
        print(f"wrote the cement-mill scenario to {args.write_default}")
        if args.scenario is None:
            return 0
    if args.scenario is None:
        raise PayloadError("no scenario file given")
    return run_simulate(args.scenario, args.out, seed=args.seed)


def _add_solver_flags(parser: argparse.ArgumentParser, *, with_n: bool = True) -> None:
    # bench derives N from --j so both step counts agree
    if with_n:
        parser.add_argument("--n", type=int, default=2**14, help="fixed-step count (default: 2**14)")
    parser.add_argument("--j", type=int, default=14, help="doubling passes, N = 2**j (default: 14)")
    parser.add_argument("--tableau", choices=sorted(TABLEAUS), default=DEFAULT_TABLEAU)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqd", description="Discretize linear-quadratic control problems with input delays."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("discretize", help="discretize a problem file")
    p.add_argument("problem", nargs="?")
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="expm")
    _add_solver_flags(p)
    p.add_argument("--deterministic", action="store_true", help="skip the covariance terms")
    p.add_argument("--out", help="JSON result path; a CSV matrix dump is written next to it")
    p.add_argument("--write-default", metavar="PATH", help="write the bundled cement-mill problem")
    p.set_defaults(func=_cmd_discretize)

    p = sub.add_parser("validate", help="check a problem against closed forms and oracles")
    p.add_argument("problem")
    _add_solver_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("bench", help="time and compare the three solvers")
    p.add_argument("problem")
    _add_solver_flags(p, with_n=False)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("simulate", help="run a closed-loop scenario")
    p.add_argument("scenario", nargs="?")
    p.add_argument("--seed", type=int, default=None, help="override the scenario noise seed")
    p.add_argument("--out", default="trajectory.csv")
    p.add_argument("--write-default", metavar="PATH", help="write the bundled cement-mill scenario")
    p.set_defaults(func=_cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LQDException as exc:
        print(f"lqd: error: {exc}", file=sys.stderr)
        return 1
