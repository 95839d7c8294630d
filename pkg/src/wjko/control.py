"""Outer optimal-control problem over admissible control curves.

Controls are ``m`` particles with fixed masses whose positions at a fixed
set of knot times are the free parameters. :func:`decode` turns any
parameter vector into an admissible :class:`ControlCurve` by projection,
so every candidate the optimizer looks at satisfies the mass, support and
flat-Lipschitz constraints by construction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .jko import SchemeConfig, SolutionCurve, run_scheme
from .kernels import Kernel
from .measures import PIECEWISE_LINEAR, ControlCurve, DiscreteMeasure
from .tolerances import TOL

__all__ = [
    "ControlParametrization",
    "ClampReport",
    "CostFunctional",
    "OptimizerConfig",
    "TraceEntry",
    "ControlResult",
    "decode",
    "decode_report",
    "canonical",
    "evaluate_cost",
    "solve_control",
]

EVACUATION = "evacuation"
SECOND_MOMENT = "second_moment"
COMPOSITE = "composite"
_KINDS = (EVACUATION, SECOND_MOMENT, COMPOSITE)


@dataclass(frozen=True, eq=False)
class ControlParametrization:
    """``m`` control particles with fixed ``masses`` moving through ``positions[j, c]``.

    ``positions`` has shape ``(m, n_knots, d)``. The bounds are the maximal
    knot-to-knot speed ``v_max``, the support radius ``R`` and the mass cap ``M``.
    """

    masses: np.ndarray
    knot_times: np.ndarray
    positions: np.ndarray
    v_max: float
    R: float
    M: float

    def __post_init__(self) -> None:
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        times = np.asarray(self.knot_times, dtype=float).reshape(-1)
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 2:
            pos = pos[:, :, None]
        if pos.ndim != 3 or pos.shape[:2] != (masses.size, times.size):
            raise ValueError(
                f"positions must have shape (m, n_knots, d) = ({masses.size}, {times.size}, d), got {pos.shape}"
            )
        if masses.size == 0:
            raise ValueError("need at least one control particle")
        if np.any(masses < 0) or masses.sum() > self.M + TOL.mass:
            raise ValueError(f"control masses must be >= 0 with total <= M={self.M}")
        if times.size < 2 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("knot times must start at 0 and increase strictly (at least two knots)")
        if not (self.v_max >= 0 and self.R >= 0 and self.M >= 0):
            raise ValueError("v_max, R and M must be nonnegative")
        if not np.all(np.isfinite(pos)):
            raise ValueError("control positions must be finite")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "knot_times", times)
        object.__setattr__(self, "positions", pos)

    @property
    def m(self) -> int:
        return self.masses.size

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def T(self) -> float:
        return float(self.knot_times[-1])

    @property
    def lip(self) -> float:
        """Flat-metric Lipschitz certificate ``L' = (sum of masses) * v_max``."""
        return float(self.masses.sum() * self.v_max)

    @classmethod
    def stationary(cls, masses, start, knot_times, v_max: float, R: float, M: float) -> "ControlParametrization":
        """Particles parked at ``start`` (shape ``(m, d)``) for every knot."""
        start = np.atleast_2d(np.asarray(start, dtype=float))
        times = np.asarray(knot_times, dtype=float)
        pos = np.repeat(start[:, None, :], times.size, axis=1)
        return cls(masses, times, pos, v_max, R, M)

    def vector(self) -> np.ndarray:
        return self.positions.reshape(-1).copy()

    def with_vector(self, v) -> "ControlParametrization":
        return replace(self, positions=np.asarray(v, dtype=float).reshape(self.positions.shape))

    def to_json(self) -> dict:
        return {
            "masses": self.masses.tolist(),
            "knot_times": self.knot_times.tolist(),
            "positions": self.positions.tolist(),
            "v_max": self.v_max,
            "R": self.R,
            "M": self.M,
        }


@dataclass(frozen=True)
class ClampReport:
    """How much :func:`decode` had to change the raw parameters."""

    projected: int = 0
    speed_clamped: int = 0

    @property
    def clamped(self) -> bool:
        return bool(self.projected or self.speed_clamped)


def _project_ball(x: np.ndarray, R: float) -> tuple[np.ndarray, bool]:
    r = float(np.linalg.norm(x))
    if r <= R:
        return x, False
    return x * (R / r), True


def _clamped_positions(theta: ControlParametrization) -> tuple[np.ndarray, ClampReport]:
    pos = np.empty_like(theta.positions)
    dts = np.diff(theta.knot_times)
    projected = clamped = 0
    for j in range(theta.m):
        p, hit = _project_ball(theta.positions[j, 0], theta.R)
        projected += hit
        pos[j, 0] = p
        for c in range(1, theta.knot_times.size):
            q, hit = _project_ball(theta.positions[j, c], theta.R)
            projected += hit
            step = q - pos[j, c - 1]
            length = float(np.linalg.norm(step))
            limit = theta.v_max * dts[c - 1]
            if length > limit:
                # the segment stays inside the (convex) ball
                q = pos[j, c - 1] + step * (limit / length)
                clamped += 1
            pos[j, c] = q
    return pos, ClampReport(projected, clamped)


def decode_report(theta: ControlParametrization) -> tuple[ControlCurve, ClampReport]:
    """Like :func:`decode`, also reporting how many positions were clamped."""
    pos, report = _clamped_positions(theta)
    knots = [DiscreteMeasure(pos[:, c, :], theta.masses, theta.dim) for c in range(theta.knot_times.size)]
    curve = ControlCurve(theta.knot_times, knots, PIECEWISE_LINEAR, theta.lip, theta.M, theta.R, check=False)
    return curve, report


def decode(theta: ControlParametrization) -> ControlCurve:
    """Admissible piecewise-linear control curve for ``theta``.

    Positions are projected onto the closed ball of radius ``R`` and each
    particle's knot-to-knot displacement is shortened to at most
    ``v_max * dt``; translating atoms of total mass ``m`` by at most ``v``
    moves them by at most ``m v`` in the flat metric, so ``L' = m v_max``.
    """
    return decode_report(theta)[0]


def canonical(theta: ControlParametrization) -> ControlParametrization:
    """The parametrization whose raw positions are already admissible (decode is the identity on it)."""
    return replace(theta, positions=_clamped_positions(theta)[0])


@dataclass(frozen=True, eq=False)
class CostFunctional:
    """Running cost ``J = int_0^T c(t) C(t) dt`` evaluated by the midpoint rule.

    ``evacuation``: ``C(t) = int |x - x0|^p d target(t)``, where the target is
    the control ``nu`` (``applies_to="control"``) or the crowd ``rho``
    (``applies_to="crowd"``).
    ``second_moment``: ``C(t) = int |x - mean(rho(t))|^2 d rho(t)``.
    ``composite``: ``evac_weight`` times the first plus ``moment_weight``
    times the second. Every kind adds ``effort`` times the control's kinetic
    action ``sum_j m_j int |x_j'|^2 dt``.

    ``c`` is either ``None`` (``c = 1``) or samples at the ``k + 1`` scheme
    grid times, linearly interpolated to the cell midpoints.
    """

    kind: str = EVACUATION
    x0: tuple = (0.0,)
    p: float = 2.0
    c: tuple | None = None
    effort: float = 0.0
    evac_weight: float = 1.0
    moment_weight: float = 1.0
    applies_to: str = "control"

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; expected one of {list(_KINDS)}")
        if self.applies_to not in ("control", "crowd"):
            raise ValueError("cost.applies_to must be 'control' or 'crowd'")
        if not self.p >= 1:
            raise ValueError("cost.p must be >= 1")
        if self.effort < 0 or self.evac_weight < 0 or self.moment_weight < 0:
            raise ValueError("cost weights must be nonnegative")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.c is not None:
            c = tuple(float(v) for v in self.c)
            if any(v < 0 or not math.isfinite(v) for v in c):
                raise ValueError("time weights c(t) must be finite and nonnegative")
            object.__setattr__(self, "c", c)

    @property
    def lower_bound(self) -> float:
        """All integrands are nonnegative."""
        return 0.0

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "x0": list(self.x0), "p": self.p,
            "c": None if self.c is None else list(self.c), "effort": self.effort,
            "evac_weight": self.evac_weight, "moment_weight": self.moment_weight,
            "applies_to": self.applies_to,
        }


def _moment_p(mu: DiscreteMeasure, x0: np.ndarray, p: float) -> float:
    if len(mu) == 0:
        return 0.0
    r = np.linalg.norm(mu.points - x0, axis=1)
    return float(mu.weights @ r**p)


def _centered_moment(mu: DiscreteMeasure) -> float:
    m = mu.total_mass
    if m == 0:
        return 0.0
    mean = (mu.weights @ mu.points) / m
    return float(mu.weights @ np.sum((mu.points - mean) ** 2, axis=1))


def _kinetic_action(nu: ControlCurve) -> float:
    total = 0.0
    for i in range(len(nu.knots) - 1):
        dt = nu.knot_times[i + 1] - nu.knot_times[i]
        a, b = nu.knots[i], nu.knots[i + 1]
        if a.weights.shape != b.weights.shape:
            raise ValueError("kinetic action needs knots sharing one weight vector")
        total += float(a.weights @ np.sum((b.points - a.points) ** 2, axis=1)) / dt
    return total


def evaluate_cost(J: CostFunctional, nu: ControlCurve, sol: SolutionCurve) -> float:
    """Midpoint-rule value of ``J`` along the scheme's grid.

    On cell ``[t_i, t_{i+1}]`` the crowd is ``rho_i`` (the curve is piecewise
    constant) and the control is ``nu`` at the cell midpoint.
    """
    T = float(sol.times[-1])
    if abs(nu.horizon - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"grid mismatch: control horizon {nu.horizon} vs solution horizon {T}")
    if nu.dim != sol.dim:
        raise ValueError(f"grid mismatch: control dimension {nu.dim} vs solution dimension {sol.dim}")
    if len(J.x0) != sol.dim and J.kind != SECOND_MOMENT:
        raise ValueError(f"cost target x0 has dimension {len(J.x0)}, expected {sol.dim}")
    if J.c is not None and len(J.c) != sol.k + 1:
        raise ValueError(f"grid mismatch: {len(J.c)} samples of c(t) for {sol.k + 1} grid times")
    x0 = np.asarray(J.x0)
    total = 0.0
    for i in range(sol.k):
        t0, t1 = sol.times[i], sol.times[i + 1]
        tm = 0.5 * (t0 + t1)
        weight = 1.0 if J.c is None else 0.5 * (J.c[i] + J.c[i + 1])
        value = 0.0
        if J.kind in (EVACUATION, COMPOSITE):
            target = nu.at(tm) if J.applies_to == "control" else sol.measure(i)
            scale = J.evac_weight if J.kind == COMPOSITE else 1.0
            value += scale * _moment_p(target, x0, J.p)
        if J.kind in (SECOND_MOMENT, COMPOSITE):
            scale = J.moment_weight if J.kind == COMPOSITE else 1.0
            value += scale * _centered_moment(sol.measure(i))
        total += (t1 - t0) * weight * value
    if J.effort:
        total += J.effort * _kinetic_action(nu)
    return total


@dataclass(frozen=True)
class OptimizerConfig:
    """``method`` is ``nelder_mead`` or ``compass``; ``budget`` counts forward solves."""

    method: str = "compass"
    budget: int = 100
    tol: float = 1e-4
    step: float = 0.5
    threads: int = 1

    def __post_init__(self) -> None:
        if self.method not in ("nelder_mead", "compass"):
            raise ValueError(f"optimizer.method must be 'nelder_mead' or 'compass', got {self.method!r}")
        if not (isinstance(self.budget, int) and self.budget >= 0):
            raise ValueError("optimizer.budget must be an integer >= 0")
        if not (self.tol > 0 and self.step > 0):
            raise ValueError("optimizer.tol and optimizer.step must be > 0")
        if self.threads < 1:
            raise ValueError("optimizer.threads must be >= 1")


@dataclass
class TraceEntry:
    index: int
    theta: list
    cost: float
    best: float
    admissible: bool
    clamped: bool


@dataclass
class ControlResult:
    theta: ControlParametrization
    cost: float
    trace: list = field(default_factory=list)
    solution: SolutionCurve | None = None

    @property
    def violations(self) -> int:
        return sum(not e.admissible for e in self.trace)


class _BudgetExhausted(Exception):
    pass


class _Evaluator:
    """Scores parameter vectors, records the trace and enforces the budget."""

    def __init__(self, J, W, V, rho0, cfg, theta0, budget, threads):
        self.J, self.W, self.V, self.rho0, self.cfg = J, W, V, rho0, cfg
        self.theta0 = theta0
        self.budget = budget
        self.threads = threads
        self.trace: list[TraceEntry] = []
        self.best = (math.inf, theta0.vector(), None)

    @property
    def remaining(self) -> int:
        return self.budget - len(self.trace)

    def _solve(self, v: np.ndarray):
        theta = self.theta0.with_vector(v)
        nu, report = decode_report(theta)
        admissible = not nu.violations()
        try:
            sol = run_scheme(nu, self.W, self.V, self.rho0, self.cfg)
            cost = evaluate_cost(self.J, nu, sol)
            if not math.isfinite(cost):
                raise FloatingPointError("non-finite cost")
        except (FloatingPointError, RuntimeError, ValueError, np.linalg.LinAlgError):
            sol, cost = None, math.inf
        return cost, admissible, report.clamped, sol

    def many(self, vectors: list) -> list[float]:
        """Evaluate in order; results are recorded in the given order whatever ``threads`` is."""
        vectors = [np.asarray(v, dtype=float) for v in vectors[: max(self.remaining, 0)]]
        if not vectors:
            raise _BudgetExhausted
        if self.threads > 1 and len(vectors) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(self._solve, vectors))
        else:
            results = [self._solve(v) for v in vectors]
        out = []
        for v, (cost, admissible, clamped, sol) in zip(vectors, results):
            if cost < self.best[0]:
                self.best = (cost, v.copy(), sol)
            self.trace.append(TraceEntry(len(self.trace), v.tolist(), cost, self.best[0], admissible, clamped))
            out.append(cost)
        return out

    def one(self, v) -> float:
        return self.many([v])[0]


def _compass(ev: _Evaluator, x0: np.ndarray, f0: float, step: float, tol: float) -> None:
    """Complete-poll compass search: try ``x +- step e_i``, move to the best improvement, else halve."""
    x, fx = x0.copy(), f0
    n = x.size
    while step >= tol:
        polls = []
        for i in range(n):
            for sign in (1.0, -1.0):
                y = x.copy()
                y[i] += sign * step
                polls.append(y)
        values = ev.many(polls)
        k = int(np.argmin(values))
        if values[k] < fx:
            x, fx = polls[k], values[k]
        else:
            step *= 0.5
        if len(values) < len(polls):
            raise _BudgetExhausted


def _nelder_mead(ev: _Evaluator, x0: np.ndarray, step: float, tol: float) -> None:
    n = x0.size
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(n)])
    minimize(
        ev.one, x0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": tol, "fatol": tol * 1e-3,
                 "maxfev": ev.remaining, "adaptive": n > 4},
    )


def solve_control(
    J: CostFunctional,
    W: Kernel,
    V: Kernel,
    rho0: DiscreteMeasure,
    cfg: SchemeConfig,
    theta0: ControlParametrization,
    opt: OptimizerConfig = OptimizerConfig(),
) -> ControlResult:
    """Derivative-free minimisation of ``J`` over decoded control curves.

    The starting point is always evaluated first, so the returned cost is
    never worse than ``theta0``'s. A zero budget returns ``theta0`` unchanged
    with cost ``nan`` (nothing was evaluated). Candidates whose forward solve fails are
    scored ``+inf``. The returned parametrization is canonical (already
    admissible, decode leaves it unchanged).
    """
    if theta0.dim != rho0.dim:
        raise ValueError("control and crowd dimensions differ")
    if abs(theta0.T - cfg.T) > 1e-12 * max(1.0, cfg.T):
        raise ValueError(f"control knots end at {theta0.T}, scheme horizon is {cfg.T}")
    if opt.budget == 0:
        # nothing may be evaluated: hand back the starting point untouched
        return ControlResult(theta0, math.nan, [], None)
    ev = _Evaluator(J, W, V, rho0, cfg, theta0, opt.budget, opt.threads)
    x0 = theta0.vector()
    try:
        f0 = ev.one(x0)
        if opt.method == "compass":
            _compass(ev, x0, f0, opt.step, opt.tol)
        else:
            _nelder_mead(ev, x0, opt.step, opt.tol)
    except _BudgetExhausted:
        pass
    cost, vec, sol = ev.best
    theta = canonical(theta0.with_vector(vec))
    return ControlResult(theta, cost, ev.trace, sol)
