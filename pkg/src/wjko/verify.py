"""Numerical checks of the quantitative estimates satisfied by the scheme.

Every check returns a :class:`VerifyReport`: a list of named comparisons
``lhs <= rhs`` with ``slack = rhs - lhs`` and a tolerance; an entry passes
iff ``slack >= -tol``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .energy import EnergyContext, total_energy
from .jko import (
    InnerConfig,
    SchemeConfig,
    SolutionCurve,
    lipschitz_constant,
    particle_ode_oracle,
    run_scheme,
    sup_gap,
    weak_form_residual,
)
from .kernels import Kernel
from .measures import ControlCurve, DiscreteMeasure
from .testfunctions import SpaceBump, TestFunction, TimeBump
from .tolerances import TOL
from .transport import displacement_interpolate, wasserstein

__all__ = [
    "CheckEntry",
    "VerifyReport",
    "TestFunction",
    "TimeBump",
    "SpaceBump",
    "combined_lambda",
    "check_lambda_convexity",
    "check_evi",
    "check_stability",
    "check_scheme_bounds",
    "residual_convergence",
    "oracle_convergence",
]


@dataclass
class CheckEntry:
    family: str
    label: str
    lhs: float
    rhs: float
    tol: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        # nan never passes
        return bool(self.slack >= -self.tol)

    def to_json(self) -> dict:
        return {"family": self.family, "label": self.label, "lhs": self.lhs, "rhs": self.rhs,
                "slack": self.slack, "tol": self.tol, "pass": self.passed}


@dataclass
class VerifyReport:
    name: str
    entries: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def add(self, family: str, label: str, lhs: float, rhs: float, tol: float) -> CheckEntry:
        entry = CheckEntry(family, label, float(lhs), float(rhs), float(tol))
        self.entries.append(entry)
        return entry

    def extend(self, other: "VerifyReport") -> "VerifyReport":
        self.entries.extend(other.entries)
        for key, val in other.info.items():
            self.info[f"{other.name}.{key}"] = val
        return self

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> list:
        return [e for e in self.entries if not e.passed]

    def worst_slack(self) -> dict:
        """Smallest slack per check family."""
        out: dict = {}
        for e in self.entries:
            out[e.family] = min(out.get(e.family, math.inf), e.slack)
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "worst_slack": self.worst_slack(),
            "info": self.info,
            "entries": [e.to_json() for e in self.entries],
        }

    def table(self) -> str:
        """One line per check family: count, failures and worst slack."""
        rows = [f"{'check':<28} {'n':>5} {'fail':>5} {'worst slack':>14}  status"]
        fam: dict = {}
        for e in self.entries:
            n, bad, worst = fam.get(e.family, (0, 0, math.inf))
            fam[e.family] = (n + 1, bad + (not e.passed), min(worst, e.slack))
        for name, (n, bad, worst) in fam.items():
            rows.append(f"{name:<28} {n:>5} {bad:>5} {worst:>14.6g}  {'PASS' if not bad else 'FAIL'}")
        rows.append(f"{self.name}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def combined_lambda(W: Kernel, V: Kernel) -> float:
    """``min(lam_W, lam_V)``; both kernels must carry a finite semiconvexity constant."""
    lam = min(W.lam, V.lam)
    if not math.isfinite(lam):
        raise ValueError(f"both kernels need a finite semiconvexity constant (got {W.lam}, {V.lam})")
    return lam


def check_lambda_convexity(
    W: Kernel,
    V: Kernel,
    nu_t: DiscreteMeasure,
    xi: DiscreteMeasure,
    eta: DiscreteMeasure,
    s_samples: Iterable[float] = (0.25, 0.5, 0.75),
    M: float | None = None,
    tol: float = 1e-8,
) -> VerifyReport:
    """``F(gamma_s) <= (1-s) F(xi) + s F(eta) - (1 + M/2) lam s (1-s) W_2(xi, eta)^2`` along the geodesic."""
    lam = combined_lambda(W, V)
    M = nu_t.total_mass if M is None else M
    ctx = EnergyContext(W, V, nu_t)
    dist, plan = wasserstein(xi, eta, 2)
    f_xi, f_eta = total_energy(ctx, xi), total_energy(ctx, eta)
    rep = VerifyReport("lambda_convexity", info={"lambda_bar": lam, "M": M, "w2": dist})
    for s in s_samples:
        s = float(s)
        lhs = total_energy(ctx, displacement_interpolate(plan, s))
        rhs = (1 - s) * f_xi + s * f_eta - (1 + M / 2) * lam * s * (1 - s) * dist**2
        rep.add("lambda_convexity", f"s={s:g}", lhs, rhs, tol)
    return rep


def _evi_constant(W: Kernel, V: Kernel, M: float) -> float:
    L = lipschitz_constant(W, V, M)
    return 2.0 * L * L + 2.0 * (W.lip + M * V.lip) * L


def check_evi(
    sol: SolutionCurve,
    nu: ControlCurve,
    W: Kernel,
    V: Kernel,
    eta: DiscreteMeasure,
    M: float | None = None,
    C: float | None = None,
) -> VerifyReport:
    """Discrete evolution variational inequality at interior grid times.

    ``1/2 d/dt W_2(rho, eta)^2 + (1 + M/2) lam W_2(rho, eta)^2 <= F(eta) - F(rho)``
    with the time derivative replaced by a centred difference; each entry is
    allowed a violation of ``C * tau`` (default ``C = 2 L^2 + 2 (Lip W + M Lip V) L``).
    """
    if sol.k < 2:
        raise ValueError("EVI check needs at least 3 grid times")
    lam = combined_lambda(W, V)
    if M is None:
        M = nu.mass if math.isfinite(nu.mass) else max(k.total_mass for k in nu.knots)
    C = _evi_constant(W, V, M) if C is None else C
    tau = sol.tau
    d2 = np.array([wasserstein(sol.measure(i), eta, 2)[0] ** 2 for i in range(sol.k + 1)])
    rep = VerifyReport("evi", info={"lambda_bar": lam, "M": M, "C": C, "tau": tau})
    for i in range(1, sol.k):
        t = float(sol.times[i])
        ctx = EnergyContext(W, V, nu.at(t))
        deriv = (d2[i + 1] - d2[i - 1]) / (sol.times[i + 1] - sol.times[i - 1])
        lhs = 0.5 * deriv + (1 + M / 2) * lam * d2[i]
        rhs = total_energy(ctx, eta) - total_energy(ctx, sol.measure(i))
        rep.add("evi", f"t={t:.6g}", lhs, rhs, C * tau)
    return rep


def check_stability(
    sol1: SolutionCurve,
    sol2: SolutionCurve,
    lam_bar: float,
    M: float,
    step_slack: float = TOL.inner_slack,
) -> VerifyReport:
    """``W_2(rho(t), rho_hat(t)) <= W_2(rho(0), rho_hat(0)) exp(-lam (M + 2) t)``.

    Grid time ``t_i`` gets a tolerance of ``2 * step_slack * i``.
    """
    if sol1.k != sol2.k or not np.allclose(sol1.times, sol2.times, rtol=0, atol=1e-12):
        raise ValueError("grid mismatch: stability check needs two curves on the same grid")
    if not math.isfinite(lam_bar):
        raise ValueError("stability envelope needs a finite lambda")
    d0 = wasserstein(sol1.measure(0), sol2.measure(0), 2)[0]
    rep = VerifyReport("stability", info={"lambda_bar": lam_bar, "M": M, "d0": d0})
    for i in range(sol1.k + 1):
        t = float(sol1.times[i])
        d = wasserstein(sol1.measure(i), sol2.measure(i), 2)[0]
        rep.add("stability", f"t={t:.6g}", d, d0 * math.exp(-lam_bar * (M + 2) * t), 2 * step_slack * i)
    return rep


def check_scheme_bounds(
    sol: SolutionCurve,
    W: Kernel,
    V: Kernel,
    M: float,
    nu: ControlCurve | None = None,
    eta: float = TOL.inner_slack,
    all_pairs: bool = True,
) -> VerifyReport:
    """Re-check a scheme output from its measures alone.

    Families: ``mass`` (probability measures), ``per_step`` (one-step W_2
    bound ``L tau``), ``cumulative`` (``W_2(rho_0, rho_i) <= L t_i``),
    ``all_pairs`` (``W_2(rho_s, rho_t) <= L (t - s) + k eta``) and, when the
    control is supplied, ``energy_descent``
    (``W_2^2 / (2 tau) <= F(rho_i) - F(rho_{i+1})`` with ``F`` at ``t_{i+1}``).
    """
    L = lipschitz_constant(W, V, M)
    k = sol.k
    rep = VerifyReport("scheme_bounds", info={"L": L, "k": k, "tau": sol.tau})
    for i in range(k + 1):
        rep.add("mass", f"i={i}", abs(sol.measure(i).total_mass - 1.0), 0.0, TOL.mass)
    steps = [wasserstein(sol.measure(i), sol.measure(i + 1), 2)[0] for i in range(k)]
    for i, w2 in enumerate(steps):
        dt = sol.times[i + 1] - sol.times[i]
        rep.add("per_step", f"i={i}", w2, L * dt, eta)
    for i in range(1, k + 1):
        d = wasserstein(sol.measure(0), sol.measure(i), 2)[0]
        rep.add("cumulative", f"i={i}", d, L * sol.times[i], eta)
    if all_pairs:
        for i in range(k + 1):
            for j in range(i + 2, k + 1):
                d = wasserstein(sol.measure(i), sol.measure(j), 2)[0]
                rep.add("all_pairs", f"{i}-{j}", d, L * (sol.times[j] - sol.times[i]), k * eta)
    if nu is not None:
        for i, w2 in enumerate(steps):
            dt = sol.times[i + 1] - sol.times[i]
            ctx = EnergyContext(W, V, nu.at(sol.times[i + 1]))
            drop = total_energy(ctx, sol.measure(i)) - total_energy(ctx, sol.measure(i + 1))
            rep.add("energy_descent", f"i={i}", w2 * w2 / (2 * dt), drop, eta)
    return rep


def _fit_order(ks: Sequence[int], values: Sequence[float]) -> float:
    """Decay order ``p`` of ``values ~ k^{-p}`` from a least-squares log-log fit."""
    slope = np.polyfit(np.log(np.asarray(ks, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)[0]
    return float(-slope)


def residual_convergence(
    W: Kernel,
    V: Kernel,
    nu: ControlCurve,
    rho0: DiscreteMeasure,
    phi: TestFunction,
    k_list: Sequence[int],
    T: float | None = None,
    inner: InnerConfig = InnerConfig(),
    method: str = "jko",
    min_order: float = 0.8,
    floor: float = 1e-12,
) -> VerifyReport:
    """Weak-form residual for each ``k`` and its fitted decay order.

    ``method`` is ``jko`` (the scheme) or ``explicit`` / ``implicit`` (the
    particle oracle). Passes if the fitted order is at least ``min_order``,
    or if every residual is already below ``floor`` (nothing left to decay).
    """
    k_list = list(k_list)
    if len(k_list) < 2 or any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("k_list must be increasing with at least two entries")
    T = nu.horizon if T is None else T
    residuals = []
    for k in k_list:
        cfg = SchemeConfig(T, k, inner)
        if method == "jko":
            sol = run_scheme(nu, W, V, rho0, cfg)
        else:
            sol = particle_ode_oracle(W, V, nu, rho0, cfg, method)
        residuals.append(weak_form_residual(sol, nu, W, V, phi))
    rep = VerifyReport("residual_convergence", info={"k": k_list, "residuals": residuals, "method": method})
    if max(residuals) <= floor:
        rep.info["order"] = math.inf
        rep.add("residual_floor", "max residual", max(residuals), floor, 0.0)
    else:
        order = _fit_order(k_list, [max(r, floor) for r in residuals])
        rep.info["order"] = order
        rep.add("residual_order", "fitted order", min_order, order, 0.0)
    return rep


def oracle_convergence(
    W: Kernel,
    V: Kernel,
    nu: ControlCurve,
    rho0: DiscreteMeasure,
    k_list: Sequence[int],
    k_ref: int,
    T: float | None = None,
    inner: InnerConfig = InnerConfig(),
    min_ratio: float | None = 1.5,
    min_order: float | None = None,
    floor: float = 1e-12,
) -> VerifyReport:
    """Sup-in-time W_2 gap between the scheme and a fine implicit-Euler particle reference.

    With ``min_ratio`` the gap must shrink by at least that factor at every
    doubling of ``k``; with ``min_order`` the log-log fitted decay order must
    reach it. Gaps below ``floor`` (e.g. a trivial energy) count as converged.
    """
    k_list = list(k_list)
    if len(k_list) < 2 or any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("k_list must be increasing with at least two entries")
    T = nu.horizon if T is None else T
    ref = particle_ode_oracle(W, V, nu, rho0, SchemeConfig(T, k_ref, inner), "implicit")
    gaps = [sup_gap(run_scheme(nu, W, V, rho0, SchemeConfig(T, k, inner)), ref) for k in k_list]
    ratios = [math.inf if max(ga, gb) <= floor or gb == 0 else ga / gb for ga, gb in zip(gaps, gaps[1:])]
    order = math.inf if max(gaps) <= floor else _fit_order(k_list, [max(g, floor) for g in gaps])
    rep = VerifyReport("oracle_convergence",
                       info={"k": k_list, "k_ref": k_ref, "gaps": gaps, "ratios": ratios, "order": order})
    if min_ratio is not None:
        for ka, kb, ratio in zip(k_list, k_list[1:], ratios):
            rep.add("oracle_ratio", f"{ka}->{kb}", min_ratio, ratio, 0.0)
    if min_order is not None:
        rep.add("oracle_order", "fitted order", min_order, order, 0.0)
    return rep
