"""Command-line interface: ``wjko simulate|control|validate|compare-oracle <config>``.

Exit codes: 0 success, 1 usage or configuration error, 2 a check or
invariant failed. All artifacts are deterministic functions of the config
(and ``--seed``), so reruns produce byte-identical files.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .control import decode, solve_control
from .io import (
    ORACLE_FORMAT,
    TRACE_FORMAT,
    write_json,
    write_steps_csv,
    write_table_csv,
    write_trajectory_csv,
)
from .jko import SolutionCurve, run_scheme
from .measures import DiscreteMeasure
from .verify import (
    VerifyReport,
    check_evi,
    check_lambda_convexity,
    check_scheme_bounds,
    check_stability,
    oracle_convergence,
    residual_convergence,
)

__all__ = ["main", "build_parser"]

log = logging.getLogger("wjko")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2

# all-pairs W_2 checks are quadratic in k; beyond this only per-step/cumulative run
_ALL_PAIRS_MAX_K = 128


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for check failures
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wjko", description="Lagrangian JKO scheme for controlled aggregation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "run the scheme and write the trajectory",
        "control": "optimise a parametrized control against the configured cost",
        "validate": "run the scheme and every numerical check",
        "compare-oracle": "convergence of the scheme against a fine particle reference",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", type=Path, help="TOML or JSON run configuration")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for control evaluations (fallback: $WJKO_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _threads(arg: int | None) -> int | None:
    if arg is None:
        env = os.environ.get("WJKO_THREADS")
        if env is None or env.strip() == "":
            return None
        try:
            arg = int(env)
        except ValueError:
            raise _UsageError(f"WJKO_THREADS: expected an integer, got {env!r}") from None
        name = "WJKO_THREADS"
    else:
        name = "--threads"
    if arg < 1:
        raise _UsageError(f"{name}: must be >= 1, got {arg}")
    return arg


def _write_solution(cfg: RunConfig, out: Path, sol: SolutionCurve) -> None:
    if "csv" in cfg.formats:
        write_trajectory_csv(sol, out / "trajectory.csv")
        write_steps_csv(sol, out / "steps.csv")
    if "json" in cfg.formats:
        write_json(sol.to_json(), out / "trajectory.json")


def _finish(report: VerifyReport, out: Path, write: bool) -> int:
    if write:
        write_json(report.to_json(), out / "verify.json")
    print(report.table())
    return EXIT_OK if report.passed else EXIT_CHECK


def _simulate(cfg: RunConfig, out: Path, threads) -> int:
    nu = cfg.nu
    sol = run_scheme(nu, cfg.W, cfg.V, cfg.rho0, cfg.scheme)
    _write_solution(cfg, out, sol)
    unconverged = sum(not s.inner_converged for s in sol.steps)
    print(f"simulate: k={sol.k} tau={sol.tau:.6g} n={sol.points.shape[1]} d={sol.dim} "
          f"unconverged_steps={unconverged} -> {out}")
    if not cfg.emit_verify:
        return EXIT_OK
    report = check_scheme_bounds(sol, cfg.W, cfg.V, cfg.M, nu=nu, all_pairs=sol.k <= _ALL_PAIRS_MAX_K)
    return _finish(report, out, True)


def _control(cfg: RunConfig, out: Path, threads) -> int:
    if cfg.theta0 is None:
        raise ConfigError("control.mode: the control command needs mode = 'parametrized'")
    if cfg.cost is None:
        raise ConfigError("cost: the control command needs a [cost] section")
    opt = cfg.optimizer
    if threads is not None:
        opt = replace(opt, threads=threads)
    res = solve_control(cfg.cost, cfg.W, cfg.V, cfg.rho0, cfg.scheme, cfg.theta0, opt)
    nu = decode(res.theta)
    violations = nu.violations()
    summary = {
        "cost": res.cost,
        "initial_cost": res.trace[0].cost if res.trace else math.nan,
        "evaluations": len(res.trace),
        "inadmissible_candidates": res.violations,
        "control_violations": violations,
        "optimizer": {"method": opt.method, "budget": opt.budget, "tol": opt.tol, "step": opt.step},
        "cost_functional": cfg.cost.to_json(),
    }
    write_json({**res.theta.to_json(), "cost": res.cost}, out / "theta.json")
    write_json({**summary, "control": nu.to_json()}, out / "control.json")
    header = ["eval", "cost", "best", "admissible", "clamped"] + [f"theta{j}" for j in range(res.theta.vector().size)]
    write_table_csv(out / "trace.csv", TRACE_FORMAT, header,
                    ([e.index, e.cost, e.best, e.admissible, e.clamped, *e.theta] for e in res.trace))
    if res.solution is not None:
        _write_solution(cfg, out, res.solution)
    print(f"control: J(theta0)={summary['initial_cost']:.10g} J*={res.cost:.10g} "
          f"evaluations={len(res.trace)} violations={len(violations)} -> {out}")
    ok = (opt.budget == 0 or math.isfinite(res.cost)) and not violations and res.violations == 0
    return EXIT_OK if ok else EXIT_CHECK


def _perturbed(mu: DiscreteMeasure, rng: np.random.Generator, scale: float) -> DiscreteMeasure:
    return mu.with_points(mu.points + scale * rng.normal(size=mu.points.shape))


def _validate(cfg: RunConfig, out: Path, threads) -> int:
    nu = cfg.nu
    W, V, M = cfg.W, cfg.V, cfg.M
    sol = run_scheme(nu, W, V, cfg.rho0, cfg.scheme)
    _write_solution(cfg, out, sol)
    report = VerifyReport("validate", info={"config": cfg.name})
    report.extend(check_scheme_bounds(sol, W, V, M, nu=nu, all_pairs=sol.k <= _ALL_PAIRS_MAX_K))
    lam = min(W.lam, V.lam)
    if not math.isfinite(lam):
        report.info["lambda_checks"] = "skipped: no finite semiconvexity constant"
    else:
        rng = np.random.default_rng(cfg.verify.seed)
        for j in range(cfg.verify.lambda_pairs):
            i = int(rng.integers(0, sol.k + 1))
            t = float(sol.times[i])
            xi = _perturbed(sol.measure(i), rng, 0.2)
            eta = _perturbed(sol.measure(int(rng.integers(0, sol.k + 1))), rng, 0.2)
            sub = check_lambda_convexity(W, V, nu.at(t), xi, eta, M=M)
            for e in sub.entries:
                e.label = f"pair={j} {e.label}"
            report.entries.extend(sub.entries)
        if cfg.verify.evi and sol.k >= 2:
            for label, eta in (("eta=rho0", cfg.rho0), ("eta=rhoT", sol.measure(sol.k))):
                sub = check_evi(sol, nu, W, V, eta, M=M)
                for e in sub.entries:
                    e.label = f"{label} {e.label}"
                report.extend(sub)
        if cfg.verify.stability_shift > 0:
            shift = np.zeros(cfg.rho0.dim)
            shift[0] = cfg.verify.stability_shift
            sol2 = run_scheme(nu, W, V, cfg.rho0.with_points(cfg.rho0.points + shift), cfg.scheme)
            report.extend(check_stability(sol, sol2, lam, M))
    if cfg.verify.residual_k:
        for i, phi in enumerate(cfg.verify.test_functions):
            sub = residual_convergence(W, V, nu, cfg.rho0, phi, cfg.verify.residual_k, cfg.scheme.T,
                                       cfg.scheme.inner)
            for e in sub.entries:
                e.label = f"phi={i} {e.label}"
            report.entries.extend(sub.entries)
            report.info[f"residual_convergence.phi{i}"] = sub.info
    return _finish(report, out, True)


def _compare_oracle(cfg: RunConfig, out: Path, threads) -> int:
    o = cfg.oracle
    rep = oracle_convergence(cfg.W, cfg.V, cfg.nu, cfg.rho0, o.k_list, o.k_ref, cfg.scheme.T,
                             cfg.scheme.inner, min_ratio=None, min_order=o.min_order)
    gaps = rep.info["gaps"]
    ratios = [math.nan] + rep.info["ratios"]
    rows = [[k, g, r] for k, g, r in zip(o.k_list, gaps, ratios)]
    if "csv" in cfg.formats:
        write_table_csv(out / "oracle.csv", ORACLE_FORMAT, ["k", "sup_w2_gap", "ratio"], rows)
    if "json" in cfg.formats:
        write_json(rep.to_json(), out / "oracle.json")
    for k, g, r in rows:
        print(f"k={k:<6d} gap={g:.6e} ratio={r:.4g}")
    print(f"fitted order {rep.info['order']:.4g} (k_ref={o.k_ref})")
    print(rep.table())
    return EXIT_OK if rep.passed else EXIT_CHECK


_COMMANDS = {
    "simulate": _simulate,
    "control": _control,
    "validate": _validate,
    "compare-oracle": _compare_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wjko: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        cfg = load_config(args.config, seed=args.seed)
        out = args.out if args.out is not None else cfg.out_dir
        return _COMMANDS[args.command](cfg, out, threads)
    except (_UsageError, ConfigError) as exc:
        print(f"wjko: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"wjko: check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
