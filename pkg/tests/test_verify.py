from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_measure
from wjko.jko import SchemeConfig, run_scheme
from wjko.kernels import make_abs_kernel, make_morse_kernel, make_quadratic_capped_kernel, make_zero_kernel
from wjko.measures import ControlCurve, DiscreteMeasure
from wjko.verify import (
    CheckEntry,
    SpaceBump,
    TestFunction,
    TimeBump,
    VerifyReport,
    check_evi,
    check_lambda_convexity,
    check_scheme_bounds,
    check_stability,
    combined_lambda,
    oracle_convergence,
    residual_convergence,
)

MORSE = make_morse_kernel(1.0, 1.0, 0.5, 2.0)
QUAD = make_quadratic_capped_kernel(0.5, 2.0)
Z = make_zero_kernel()


def test_entries_and_report():
    e = CheckEntry("f", "x", 1.0, 0.5, 0.6)
    assert e.slack == -0.5 and e.passed
    assert not CheckEntry("f", "x", math.nan, 0.0, 1.0).passed
    rep = VerifyReport("r")
    rep.add("a", "1", 0.0, 1.0, 0.0)
    rep.add("b", "1", 2.0, 1.0, 0.0)
    assert not rep.passed and len(rep.failures) == 1
    assert rep.worst_slack() == {"a": 1.0, "b": -1.0}
    assert rep.to_json()["entries"][1]["pass"] is False
    assert "FAIL" in rep.table()


def test_combined_lambda():
    assert combined_lambda(MORSE, QUAD) == MORSE.lam
    with pytest.raises(ValueError):
        combined_lambda(make_morse_kernel(0.5, 2.0, 1.0, 1.0), QUAD)


def test_lambda_convexity_holds_and_detects_overclaims(rng):
    nu = DiscreteMeasure([[0.0, 1.0], [0.5, -0.5]], [0.6, 0.4])
    worst_true, worst_false = math.inf, math.inf
    for _ in range(40):
        xi = random_measure(rng, int(rng.integers(3, 6)), 2)
        eta = random_measure(rng, int(rng.integers(3, 6)), 2)
        rep = check_lambda_convexity(MORSE, QUAD, nu, xi, eta)
        assert rep.passed, rep.failures
        worst_true = min(worst_true, min(rep.worst_slack().values()))
        over = check_lambda_convexity(replace(MORSE, lam=2.0), replace(QUAD, lam=2.0), nu, xi, eta)
        worst_false = min(worst_false, min(over.worst_slack().values()))
    assert worst_true >= -1e-8 and worst_false < 0


def test_evi_and_stability_on_morse(two_clusters, point_control):
    sol = run_scheme(point_control, MORSE, QUAD, two_clusters, SchemeConfig(1.0, 16))
    for eta in (two_clusters, sol.measure(16), DiscreteMeasure.uniform(np.zeros((16, 2)))):
        rep = check_evi(sol, point_control, MORSE, QUAD, eta, M=1.0)
        assert rep.passed, rep.failures
    shifted = two_clusters.with_points(two_clusters.points + [0.1, 0.0])
    sol2 = run_scheme(point_control, MORSE, QUAD, shifted, SchemeConfig(1.0, 16))
    rep = check_stability(sol, sol2, combined_lambda(MORSE, QUAD), 1.0)
    assert rep.passed, rep.failures
    with pytest.raises(ValueError):
        check_stability(sol, run_scheme(point_control, MORSE, QUAD, shifted, SchemeConfig(1.0, 8)), -1.0, 1.0)


def test_scheme_bounds_pass_and_corrupted_curve_fails(two_clusters, point_control):
    W = make_abs_kernel(1.0)
    sol = run_scheme(point_control, W, QUAD, two_clusters, SchemeConfig(1.0, 8))
    assert check_scheme_bounds(sol, W, QUAD, 1.0, nu=point_control).passed
    corrupt = sol.replaced(5, sol.measure(5).with_points(sol.points[5] + 3.0))
    rep = check_scheme_bounds(corrupt, W, QUAD, 1.0, nu=point_control)
    assert not rep.passed
    assert {e.family for e in rep.failures} >= {"per_step", "energy_descent"}


def test_residual_convergence_floor_for_static_solution():
    nu = ControlCurve.constant(DiscreteMeasure.zero(1), 1.0, mass=0.0, radius=0.0)
    phi = TestFunction(TimeBump(0.2, 0.8), SpaceBump((0.0,), 1.0))
    rho0 = DiscreteMeasure.dirac([0.3])
    rep = residual_convergence(Z, Z, nu, rho0, phi, [8, 16], floor=1e-2)
    assert rep.passed and rep.info["order"] == math.inf
    with pytest.raises(ValueError):
        residual_convergence(Z, Z, nu, rho0, phi, [16, 8])


def test_oracle_convergence_zero_kernel_gap_is_zero():
    nu = ControlCurve.constant(DiscreteMeasure.zero(1), 1.0, mass=0.0, radius=0.0)
    rep = oracle_convergence(Z, Z, nu, DiscreteMeasure.uniform([[0.0], [1.0]]), [4, 8, 16], 64, min_order=0.8)
    assert rep.info["gaps"] == [0.0, 0.0, 0.0]
    assert rep.passed


def test_lambda_convexity_endpoints_are_equalities(rng):
    xi, eta = random_measure(rng, 3, 1), random_measure(rng, 4, 1)
    rep = check_lambda_convexity(MORSE, QUAD, DiscreteMeasure.dirac([0.0]), xi, eta, (0.0, 1.0))
    assert all(abs(e.slack) < 1e-12 for e in rep.entries)


def test_evi_trivial_and_single_particle_cases():
    nu0 = ControlCurve.constant(DiscreteMeasure.zero(1), 1.0, mass=0.0, radius=0.0)
    rho0 = DiscreteMeasure.uniform([[0.0], [1.0]])
    static = run_scheme(nu0, Z, Z, rho0, SchemeConfig(1.0, 4))
    rep = check_evi(static, nu0, Z, Z, rho0, M=0.0)
    assert all(e.lhs == 0.0 and e.rhs == 0.0 for e in rep.entries)
    c = 1.0
    nu = ControlCurve.constant(DiscreteMeasure.dirac([c]), 1.0)
    V = make_quadratic_capped_kernel(1.0, 5.0)
    sol = run_scheme(nu, Z, V, DiscreteMeasure.dirac([-1.0]), SchemeConfig(1.0, 16))
    rep = check_evi(sol, nu, Z, V, DiscreteMeasure.dirac([c]), M=1.0)
    # closed form: d(t) = |x(t) - c|, F(eta) = 0, F(rho) = d^2 / 2, so the right side is -d^2/2
    for i, e in enumerate(rep.entries, start=1):
        assert e.rhs == pytest.approx(-0.5 * (sol.points[i, 0, 0] - c) ** 2)
        assert e.slack > 0


def test_stability_trivial_cases():
    nu = ControlCurve.constant(DiscreteMeasure.dirac([0.0]), 1.0)
    V = make_quadratic_capped_kernel(1.0, 5.0)
    cfg = SchemeConfig(1.0, 8)
    a = run_scheme(nu, Z, V, DiscreteMeasure.dirac([1.0]), cfg)
    assert check_stability(a, a, 0.0, 1.0).passed
    b = run_scheme(nu, Z, V, DiscreteMeasure.dirac([2.0]), cfg)
    rep = check_stability(a, b, 0.0, 1.0)
    d = [e.lhs for e in rep.entries]
    assert rep.passed and all(y <= x for x, y in zip(d, d[1:]))


def test_scheme_bounds_zero_kernels():
    nu = ControlCurve.constant(DiscreteMeasure.zero(2), 1.0, mass=0.0, radius=0.0)
    sol = run_scheme(nu, Z, Z, DiscreteMeasure.uniform([[0.0, 0.0], [1.0, 1.0]]), SchemeConfig(1.0, 4))
    rep = check_scheme_bounds(sol, Z, Z, 0.0, nu=nu)
    assert rep.passed and all(e.lhs == 0.0 for e in rep.entries if e.family in ("per_step", "cumulative"))


def test_residual_decay_of_the_explicit_oracle():
    g = np.random.default_rng(3)
    rho0 = DiscreteMeasure.uniform(g.uniform(-1, 1, size=(8, 2)))
    nu = ControlCurve.constant(DiscreteMeasure.dirac([0.5, 0.0]), 1.0)
    W, V = make_quadratic_capped_kernel(1.0, 1.0), make_quadratic_capped_kernel(4.0, 1.5)
    phi = TestFunction(TimeBump(0.05, 0.95), SpaceBump((0.0, 0.0), 1.5, (0.3, -0.2)))
    rep = residual_convergence(W, V, nu, rho0, phi, [8, 16, 32, 64], method="explicit")
    assert rep.passed and rep.info["order"] > 0.8
