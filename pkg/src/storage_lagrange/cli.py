"""Command-line front end: generate | solve | verify | bench.

Exit codes: 0 ok, 2 bad input, 3 solver did not converge, 4 verification failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .costs import DomainError
from .oracle import (
    DpConfig,
    InfeasibleScheduleError,
    check_feasible,
    dp_solve,
    kkt_residuals,
    marginal_scale,
)
from .policy import PolicyVariant
from .scenario import (
    ScenarioFormatError,
    generate_pwl,
    generate_quadratic,
    read_scenario,
    read_schedule,
    write_scenario,
    write_schedule,
)
from .schedule import Schedule, objective_of
from .search import ConvergenceError, SearchConfig, solve, solve_bounds, solve_horizon

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_VERIFY = 0, 2, 3, 4

BENCH_COLUMNS = ("method", "T", "J", "trials", "median_ns", "p90_ns", "iterations_median",
                 "peak_state_bytes", "ratio_to_prev")
DP_MAX_T = 100
THREADS_ENV = "STORAGE_SOLVER_THREADS"

_VARIANTS = {
    "relaxed": PolicyVariant.RELAXED,
    "charge": PolicyVariant.CHARGE_PREFERRING,
    "discharge": PolicyVariant.DISCHARGE_PREFERRING,
}

log = logging.getLogger("storage_lagrange")


class VerificationFailed(Exception):
    pass


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _int_list(text: str) -> list[int]:
    try:
        values = [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("T values must be positive")
    return values


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be at least 1")
    return n


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    if args.family == "quadratic":
        sc = generate_quadratic(args.seed, args.T, args.alpha_range, args.beta_range)
    else:
        sc = generate_pwl(args.seed, args.T, args.J, args.c_max, args.demand_span)
    write_scenario(sc, args.output)
    print(f"wrote {sc.family} T={sc.T} seed={sc.seed} to {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    sc = read_scenario(args.scenario)
    cfg = SearchConfig(epsilon=args.epsilon)
    if args.variant == "bounds":
        b = solve_bounds(sc.spec, sc.costs, sc.terminal, cfg)
        print(f"theta_lo={_fmt(b.theta_lo)}")
        print(f"theta_hi={_fmt(b.theta_hi)}")
        print(f"p_lo={_fmt(b.p_lo)}")
        print(f"p_hi={_fmt(b.p_hi)}")
        return EXIT_OK
    variant = _VARIANTS[args.variant]
    sol = solve(sc.spec, sc.costs, sc.terminal, cfg, variant)
    d = sol.first_control
    print(f"theta={_fmt(sol.theta)}")
    print(f"net={_fmt(d.net)}")
    print(f"p_plus={_fmt(d.p_plus)}")
    print(f"p_minus={_fmt(d.p_minus)}")
    print(f"prefix={sol.prefix_len}")
    print(f"iterations={sol.iterations}")
    print(f"outcome={sol.kind.name}")
    if args.horizon:
        sched = solve_horizon(sc.spec, sc.costs, sc.terminal, cfg, variant)
        print(f"objective={_fmt(sched.objective)}")
        print(f"solves={sched.solves}")
        write_schedule(sched, args.horizon)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _candidate(args, sc, cfg) -> Schedule:
    if args.schedule:
        sched = read_schedule(args.schedule)
        if sched.T != sc.T:
            raise ScenarioFormatError(
                f"schedule has {sched.T} periods, scenario has {sc.T}", field="t")
    else:
        sched = solve_horizon(sc.spec, sc.costs, sc.terminal, cfg)
    if args.perturb:
        net = sched.net.copy()
        net[0] += args.perturb
        sched = Schedule.from_net(net, sc.spec.e0, sc.spec.eta, theta=sched.theta)
    return sched


def cmd_verify(args) -> int:
    sc = read_scenario(args.scenario)
    cfg = SearchConfig(epsilon=args.epsilon)
    sched = _candidate(args, sc, cfg)
    dp = dp_solve(sc.spec, sc.costs, sc.terminal, DpConfig(args.soc_grid, args.power_grid))
    scale = marginal_scale(sc.spec, sc.costs, sc.terminal)
    kkt_tol = args.kkt_tolerance * max(scale, 1.0)
    failures = []
    try:
        check_feasible(sc.spec, sched)
    except InfeasibleScheduleError as exc:
        failures.append(f"infeasible schedule: {exc}")
        sched.objective = float("nan")
        report = None
    else:
        sched.objective = objective_of(sc.spec, sc.costs, sc.terminal, sched)
        report = kkt_residuals(sc.spec, sc.costs, sc.terminal, sched,
                               power_tol=args.power_tol * sc.spec.P)
    gap = (sched.objective - dp.objective) / max(abs(dp.objective), 1e-12)
    print(f"objective_solver={_fmt(sched.objective)}")
    print(f"objective_dp={_fmt(dp.objective)}")
    print(f"relative_gap={_fmt(gap)}")
    if report is not None:
        print(f"kkt_stationarity={_fmt(report.max_stationarity_residual)}")
        print(f"kkt_complementarity={_fmt(report.max_complementarity_residual)}")
        print(f"kkt_dual_infeasibility={_fmt(report.max_dual_infeasibility)}")
        print(f"kkt_worst_period={report.worst_period}")
        print(f"kkt_tolerance={_fmt(kkt_tol)}")
        if report.max_residual > kkt_tol:
            failures.append(f"KKT residual {report.max_residual:.3g} exceeds {kkt_tol:.3g}")
    if report is not None and not abs(gap) <= args.tolerance:
        failures.append(f"objective gap {gap:.3g} exceeds {args.tolerance:.3g}")
    if failures:
        for msg in failures:
            print(f"FAIL: {msg}")
        raise VerificationFailed("; ".join(failures))
    print("PASS")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def _make(family: str, seed: int, T: int, J: int):
    if family == "quadratic":
        return generate_quadratic(seed, T)
    return generate_pwl(seed, T, J)


def _peak_state_bytes(sc, cfg: SearchConfig) -> int:
    """Peak traced allocation during one solve, prefix collection off.

    The costs are already in memory and handed out as views, so what is
    traced is the solver's own working state.
    """
    lean = replace(cfg, collect_prefix=False)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        solve(sc.spec, sc.costs, sc.terminal, lean)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def _time_runs(fn, items) -> tuple[list[int], list[int]]:
    times, iters = [], []
    for item in items:
        t0 = time.perf_counter_ns()
        out = fn(item)
        times.append(time.perf_counter_ns() - t0)
        iters.append(getattr(out, "iterations", 0))
    return times, iters


def bench_rows(family: str, T_list, J: int, trials: int, seed: int,
               epsilon: float = 1e-3, with_dp: bool = False) -> list[dict]:
    """Benchmark rows; each trial is a distinct seeded instance."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if family == "pwl" and J < 1:
        raise ValueError("J must be at least 1")
    cfg = SearchConfig(epsilon=epsilon, collect_prefix=False)
    rows = []
    prev = {}
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        for T in T_list:
            seeds = [seed + i for i in range(trials)]
            scenarios = list(pool.map(lambda s: _make(family, s, T, J), seeds))
            # warm-up: compile kernels and touch caches; excluded from timing
            solve(scenarios[0].spec, scenarios[0].costs, scenarios[0].terminal, cfg)
            methods = [("solve", lambda sc: solve(sc.spec, sc.costs, sc.terminal, cfg))]
            if with_dp and T <= DP_MAX_T:
                methods.append(("dp", lambda sc: dp_solve(sc.spec, sc.costs, sc.terminal)))
            for name, fn in methods:
                times, iters = _time_runs(fn, scenarios)
                median = float(np.median(times))
                peak = _peak_state_bytes(scenarios[0], cfg) if name == "solve" else ""
                ratio = median / prev[name] if name in prev and prev[name] > 0 else ""
                prev[name] = median
                rows.append({
                    "method": name, "T": T, "J": J if family == "pwl" else "",
                    "trials": trials, "median_ns": int(median),
                    "p90_ns": int(np.percentile(times, 90)),
                    "iterations_median": float(np.median(iters)) if name == "solve" else "",
                    "peak_state_bytes": peak,
                    "ratio_to_prev": f"{ratio:.4g}" if ratio != "" else "",
                })
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.family, args.T_list, args.J, args.trials, args.seed,
                      args.epsilon, args.dp)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="storage-lagrange", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded scenario file")
    g.add_argument("family", choices=("quadratic", "pwl"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=int, default=24)
    g.add_argument("--J", type=int, default=100)
    g.add_argument("--c-max", type=float, default=50.0)
    g.add_argument("--demand-span", type=float, default=1.0)
    g.add_argument("--alpha-range", type=_pair, default=(0.0, 10.0))
    g.add_argument("--beta-range", type=_pair, default=(-10.0, 0.0))
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve for the initial dual and first control")
    s.add_argument("scenario")
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.add_argument("--variant", choices=(*_VARIANTS, "bounds"), default="relaxed")
    s.add_argument("--horizon", metavar="CSV",
                   help="also solve the full horizon and write the schedule here")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", help="compare against the DP oracle and check KKT residuals")
    v.add_argument("scenario")
    v.add_argument("--epsilon", type=float, default=1e-3)
    v.add_argument("--soc-grid", type=int, default=401)
    v.add_argument("--power-grid", type=int, default=201)
    v.add_argument("--tolerance", type=float, default=0.02,
                   help="relative objective gap allowed against DP")
    v.add_argument("--kkt-tolerance", type=float, default=1e-3,
                   help="KKT residual allowed, relative to the largest marginal")
    v.add_argument("--power-tol", type=float, default=1e-3,
                   help="active-set radius for KKT checks, as a fraction of P")
    v.add_argument("--schedule", metavar="CSV", help="check this schedule instead of solving")
    v.add_argument("--perturb", type=float, default=0.0,
                   help="add this to the period-1 net control before checking")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time solve over seeded instances, CSV out")
    b.add_argument("family", choices=("quadratic", "pwl"))
    b.add_argument("--T-list", type=_int_list, default=[1000, 10000, 100000])
    b.add_argument("--J", type=int, default=100)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--epsilon", type=float, default=1e-3)
    b.add_argument("--dp", action="store_true", help=f"also time the DP oracle for T <= {DP_MAX_T}")
    b.add_argument("-o", "--output", help="CSV path (default stdout)")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which matches the input-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationFailed:
        return EXIT_VERIFY
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ScenarioFormatError, DomainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
