"""Semi-implicit minimizing-movement scheme on particle clouds.

Each step moves the atoms of the previous iterate (weights are frozen) to
minimise ``W_2(rho_prev, rho)^2 / (2 tau) + F_{nu(t_{i+1})}(rho)``, with the
control sampled at the forward time of the step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import root

from .energy import EnergyContext, drift, energy_hessian, total_energy
from .kernels import Kernel
from .measures import PIECEWISE_CONSTANT, ControlCurve, DiscreteMeasure
from .testfunctions import TestFunction
from .tolerances import TOL
from .transport import wasserstein

__all__ = [
    "InnerConfig",
    "SchemeConfig",
    "StepMeta",
    "SolutionCurve",
    "jko_step",
    "run_scheme",
    "interpolate_control",
    "weak_form_residual",
    "particle_ode_oracle",
    "sup_gap",
    "lipschitz_constant",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerConfig:
    """Settings of the per-step descent (Newton / gradient trials with Armijo backtracking)."""

    max_iters: int = 500
    grad_tol: float = 1e-9
    armijo: float = 1e-4
    shrink: float = 0.5
    restarts: int = 0

    def __post_init__(self) -> None:
        if self.max_iters < 0:
            raise ValueError("inner.max_iters must be >= 0")
        if not self.grad_tol > 0:
            raise ValueError("inner.grad_tol must be > 0")
        if not 0 < self.shrink < 1:
            raise ValueError("inner.shrink must lie in (0, 1)")
        if self.restarts < 0:
            raise ValueError("inner.restarts must be >= 0")


@dataclass(frozen=True)
class SchemeConfig:
    T: float
    k: int
    inner: InnerConfig = field(default_factory=InnerConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.T, (int, float)) and self.T > 0):
            raise ValueError(f"scheme.T must be > 0, got {self.T!r}")
        if not (isinstance(self.k, int) and self.k >= 1):
            raise ValueError(f"scheme.k must be an integer >= 1, got {self.k!r}")

    @property
    def tau(self) -> float:
        return self.T / self.k

    def with_k(self, k: int) -> "SchemeConfig":
        return replace(self, k=k)


@dataclass
class StepMeta:
    w2_step: float
    energy_before: float
    energy_after: float
    inner_iters: int
    inner_converged: bool
    grad_norm: float = 0.0


class SolutionCurve:
    """Grid curve ``t_i -> rho_i`` of probability measures sharing one weight vector.

    ``points`` has shape ``(k + 1, n, d)``; between grid times the curve is
    piecewise constant (``rho(t) = rho_i`` on ``[t_i, t_{i+1})``).
    """

    def __init__(self, times, points, weights, steps: Sequence[StepMeta] = (), label: str = "jko"):
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if points.ndim != 3 or points.shape[0] != times.shape[0] or points.shape[1] != weights.shape[0]:
            raise ValueError("inconsistent solution-curve shapes")
        if abs(weights.sum() - 1.0) > TOL.mass:
            raise ValueError("solution curve must carry probability measures")
        self.times = times
        self.points = points
        self.weights = weights
        self.steps = list(steps)
        self.label = label
        for a in (self.times, self.points, self.weights):
            a.setflags(write=False)

    @property
    def k(self) -> int:
        return self.times.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.points.shape[2]

    @property
    def tau(self) -> float:
        return float(self.times[1] - self.times[0]) if self.k else 0.0

    def measure(self, i: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.points[i], self.weights, self.dim)

    @property
    def measures(self) -> list[DiscreteMeasure]:
        return [self.measure(i) for i in range(self.k + 1)]

    def at(self, t: float) -> DiscreteMeasure:
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.measure(min(max(i, 0), self.k))

    def replaced(self, i: int, measure: DiscreteMeasure) -> "SolutionCurve":
        pts = self.points.copy()
        pts[i] = measure.points
        return SolutionCurve(self.times, pts, self.weights, self.steps, self.label)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "times": self.times.tolist(),
            "weights": self.weights.tolist(),
            "points": self.points.tolist(),
            "steps": [asdict(s) for s in self.steps],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SolutionCurve":
        return cls(obj["times"], obj["points"], obj["weights"],
                   [StepMeta(**s) for s in obj.get("steps", [])], obj.get("label", "jko"))


def lipschitz_constant(W: Kernel, V: Kernel, M: float) -> float:
    """Time-Lipschitz bound ``6 (M Lip(V) + Lip(W))`` of the scheme in ``W_2``."""
    return 6.0 * (M * V.lip + W.lip)


class _Objective:
    """Penalised energy of the position matrix ``Y`` (weights frozen)."""

    def __init__(self, ctx: EnergyContext, prev: DiscreteMeasure, tau: float):
        self.ctx = ctx
        self.prev = prev
        self.tau = tau

    def value(self, Y: np.ndarray):
        mu = self.prev.with_points(Y)
        dist, plan = wasserstein(self.prev, mu, 2)
        val = dist * dist / (2.0 * self.tau) + total_energy(self.ctx, mu)
        if not math.isfinite(val):
            raise FloatingPointError("non-finite penalised energy in JKO step")
        return val, plan, mu

    def direction(self, Y: np.ndarray, plan, mu: DiscreteMeasure) -> np.ndarray:
        """Gradient divided by atom weight (plan held fixed)."""
        X = self.prev.points
        w = self.prev.weights
        metric = np.zeros_like(Y)
        np.add.at(metric, plan.tgt, plan.mass[:, None] * (Y[plan.tgt] - X[plan.src]))
        safe = np.where(w > 0, w, 1.0)[:, None]
        return metric / (self.tau * safe) + drift(self.ctx, mu)

    def newton(self, g: np.ndarray, mu: DiscreteMeasure, labels: np.ndarray | None) -> np.ndarray | None:
        """Newton displacement for the plan-fixed objective, or ``None``.

        Atoms sharing a position move rigidly together. ``None`` when a kernel
        has no Hessian or the (reduced) Hessian is not positive definite.
        """
        H = energy_hessian(self.ctx, mu)
        if H is None:
            return None
        n, d = g.shape
        w = self.prev.weights
        H = H + np.diag(np.repeat(w / self.tau, d))
        rhs = (w[:, None] * g).reshape(-1)
        if labels is not None:
            P = np.zeros((n, labels.max() + 1))
            P[np.arange(n), labels] = 1.0
            P = np.kron(P, np.eye(d))
            H = P.T @ H @ P
            rhs = P.T @ rhs
        try:
            step = cho_solve(cho_factor(H), rhs)
        except np.linalg.LinAlgError:
            return None
        if labels is not None:
            step = P @ step
        return step.reshape(n, d) if np.all(np.isfinite(step)) else None


def _groups(Y: np.ndarray) -> np.ndarray | None:
    """Label atoms by identical position; ``None`` when all atoms are distinct."""
    _, inv, counts = np.unique(Y, axis=0, return_inverse=True, return_counts=True)
    return inv.reshape(-1) if np.any(counts > 1) else None


def _group_average(g: np.ndarray, labels: np.ndarray, w: np.ndarray) -> np.ndarray:
    n_groups = labels.max() + 1
    mass = np.bincount(labels, weights=w, minlength=n_groups)
    avg = np.zeros((n_groups, g.shape[1]))
    np.add.at(avg, labels, w[:, None] * g)
    avg /= np.where(mass > 0, mass, 1.0)[:, None]
    return avg[labels]


def _cluster_direction(g: np.ndarray, labels: np.ndarray, w: np.ndarray, cusp: float) -> np.ndarray:
    """Approximate minimal-norm subgradient direction for atoms sharing positions.

    Each member moves with its cluster's mean force plus its own deviation,
    soft-thresholded by what the cusp of ``W`` can hold (``cusp`` times the
    mass of the other members). Members whose deviation fits stay together.
    """
    g_avg = _group_average(g, labels, w)
    mass = np.bincount(labels, weights=w)[labels]
    dev = g - g_avg
    size = np.linalg.norm(dev, axis=1)
    hold = cusp * (mass - w)
    keep = np.where(size > hold, 1.0 - hold / np.where(size > 0, size, 1.0), 0.0)
    return g_avg + keep[:, None] * dev


def _reduced_norm(g: np.ndarray, labels: np.ndarray | None, w: np.ndarray, cusp: float) -> float:
    """Max-norm of the stationarity defect, allowing clusters held together by the cusp."""
    if g.size == 0:
        return 0.0
    if labels is None:
        return float(np.max(np.abs(g)))
    return float(np.max(np.abs(_cluster_direction(g, labels, w, cusp))))


def _snap_candidate(Y: np.ndarray, g: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray | None:
    """Merge atoms that would cross within one step of length ``alpha``."""
    n = Y.shape[0]
    if n < 2:
        return None
    dY = Y[:, None, :] - Y[None, :, :]
    dg = g[:, None, :] - g[None, :, :]
    dist = np.linalg.norm(dY, axis=2)
    closing = np.sum(dY * dg, axis=2) > 0
    near = closing & (dist > 0) & (dist <= alpha * np.linalg.norm(dg, axis=2))
    if not near.any():
        return None
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(*np.nonzero(np.triu(near | (dist == 0), 1))):
        parent[find(i)] = find(j)
    roots = np.array([find(i) for i in range(n)])
    out = Y.copy()
    for r in np.unique(roots):
        idx = roots == r
        if idx.sum() > 1:
            m = w[idx].sum()
            out[idx] = (w[idx] @ Y[idx]) / m if m > 0 else Y[idx].mean(axis=0)
    return out


def _descend(obj: _Objective, Y0: np.ndarray, inner: InnerConfig, cusp: float):
    """Preconditioned descent with Barzilai-Borwein trial steps and backtracking.

    While the predicted decrease is well above the rounding level of the
    objective, steps must pass an Armijo test; below it the objective can no
    longer rank candidates and a step is accepted only if it shrinks the
    gradient's max-norm.
    """
    Y = Y0.copy()
    val, plan, mu = obj.value(Y)
    w = obj.prev.weights
    alpha = obj.tau
    alpha_max = 4.0 * obj.tau
    alpha_min = 1e-12 * obj.tau
    gnorm = math.inf
    it = 0
    converged = False
    prev_Y = prev_g = None
    while it < inner.max_iters:
        g = obj.direction(Y, plan, mu)
        labels = _groups(Y) if cusp > 0 else None
        candidates = [g]
        gnorm = _reduced_norm(g, labels, w, cusp)
        if labels is not None:
            d_cl = _cluster_direction(g, labels, w, cusp)
            candidates.insert(0, d_cl)
        if gnorm < inner.grad_tol:
            converged = True
            break
        rigid = labels is None or np.array_equal(d_cl, _group_average(g, labels, w))
        step = obj.newton(g, mu, labels) if rigid else None
        it += 1
        if prev_g is not None and labels is None:
            s_k = Y - prev_Y
            y_k = g - prev_g
            sy = float(np.sum(w[:, None] * s_k * y_k))
            if sy > 0:
                alpha = float(np.sum(w[:, None] * s_k * s_k)) / sy
        alpha = min(max(alpha, 1e-3 * obj.tau), alpha_max)
        if cusp > 0:
            snapped = _snap_candidate(Y, g, w, alpha)
            if snapped is not None:
                s_val, s_plan, s_mu = obj.value(snapped)
                if s_val <= val:
                    Y, val, plan, mu = snapped, s_val, s_plan, s_mu
                    prev_Y = prev_g = None
                    continue
        noise = 8.0 * np.finfo(float).eps * (abs(val) + 1.0)
        accepted = False
        trials = [(d, alpha, float(np.sum(w[:, None] * d * d)), alpha_min) for d in candidates]
        if step is not None:
            trials.insert(0, (step, 1.0, float(np.sum(w[:, None] * g * step)), 1e-3))
        for k, (d, a, slope, a_min) in enumerate(trials):
            if slope <= 0:
                continue
            resolved = inner.armijo * a * slope > 100.0 * noise
            while a >= a_min:
                Y_new = Y - a * d
                new_val, new_plan, new_mu = obj.value(Y_new)
                if resolved:
                    accepted = new_val <= val - inner.armijo * a * slope
                elif new_val <= val + noise:
                    g_new = obj.direction(Y_new, new_plan, new_mu)
                    new_labels = _groups(Y_new) if cusp > 0 else None
                    accepted = _reduced_norm(g_new, new_labels, w, cusp) < gnorm
                if accepted:
                    break
                a *= inner.shrink
            if accepted:
                if step is None or k > 0:
                    alpha = a
                break
        if not accepted:
            break
        prev_Y, prev_g = Y, g
        Y, val, plan, mu = Y_new, new_val, new_plan, new_mu
    return Y, val, it, converged, gnorm


def _cusp_strength(W: Kernel, dim: int) -> float:
    e = np.zeros((1, dim))
    e[0, 0] = 1e-12
    return float(np.linalg.norm(W.min_subgrad(e)[0])) if not W.smooth_everywhere else 0.0


def jko_step(
    ctx: EnergyContext,
    rho_prev: DiscreteMeasure,
    tau: float,
    inner: InnerConfig = InnerConfig(),
    seed=0,
) -> tuple[DiscreteMeasure, StepMeta]:
    """One minimizing-movement step over the atom positions of ``rho_prev``.

    Returns the best of ``rho_prev`` itself and all descent runs, so the
    penalised energy never exceeds ``F(rho_prev)`` even when the inner solver
    stops on ``max_iters``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    obj = _Objective(ctx, rho_prev, tau)
    X = rho_prev.points
    e_before = total_energy(ctx, rho_prev)
    if not math.isfinite(e_before):
        raise FloatingPointError("non-finite energy at the previous iterate")

    best_Y, best_val = X, e_before
    best = (0, False, math.inf)
    rng = np.random.default_rng(seed)
    jitter = tau * ctx.W.lip
    cusp = _cusp_strength(ctx.W, rho_prev.dim)
    for r in range(inner.restarts + 1):
        start = X if r == 0 else X + jitter * rng.uniform(-1.0, 1.0, size=X.shape)
        Y, val, iters, conv, gnorm = _descend(obj, start, inner, cusp)
        if val < best_val or (r == 0 and val <= best_val):
            best_Y, best_val, best = Y, val, (iters, conv, gnorm)
    rho_next = rho_prev.with_points(best_Y)
    w2, _ = wasserstein(rho_prev, rho_next, 2)
    meta = StepMeta(
        w2_step=w2,
        energy_before=e_before,
        energy_after=total_energy(ctx, rho_next),
        inner_iters=best[0],
        inner_converged=best[1],
        grad_norm=best[2],
    )
    return rho_next, meta


def _step_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, i])


def run_scheme(
    control: ControlCurve, W: Kernel, V: Kernel, rho0: DiscreteMeasure, cfg: SchemeConfig
) -> SolutionCurve:
    """``k`` JKO steps on ``[0, T]``; step ``i`` sees the control at ``(i + 1) tau``."""
    if not rho0.is_probability():
        raise ValueError(f"initial datum must be a probability measure (mass {rho0.total_mass!r})")
    if control.dim != rho0.dim:
        raise ValueError("control and initial datum have different dimensions")
    tau = cfg.tau
    pts = np.empty((cfg.k + 1, len(rho0), rho0.dim))
    pts[0] = rho0.points
    rho = rho0
    steps = []
    for i in range(cfg.k):
        ctx = EnergyContext(W, V, control.at((i + 1) * tau))
        rho, meta = jko_step(ctx, rho, tau, cfg.inner, _step_seed(cfg.seed, i))
        if not meta.inner_converged:
            log.debug("step %d: inner solver stopped at |g|=%.3g after %d iterations",
                      i, meta.grad_norm, meta.inner_iters)
        pts[i + 1] = rho.points
        steps.append(meta)
    times = tau * np.arange(cfg.k + 1)
    times[-1] = cfg.T
    return SolutionCurve(times, pts, rho0.weights, steps, "jko")


def interpolate_control(nu: ControlCurve, k: int, T: float) -> ControlCurve:
    """Piecewise-constant control taking the value ``nu((j+1) tau)`` on ``[j tau, (j+1) tau)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tau = T / k
    times = tau * np.arange(k + 1)
    times[-1] = T
    knots = [nu.at(min((j + 1) * tau, T)) for j in range(k)] + [nu.at(T)]
    return ControlCurve(times, knots, PIECEWISE_CONSTANT, nu.lip, nu.mass, nu.radius, check=False)


def weak_form_residual(
    sol: SolutionCurve, nu: ControlCurve, W: Kernel, V: Kernel, phi: TestFunction
) -> float:
    """Absolute residual of the weak transport identity along a grid curve.

    Evaluates ``int_0^T int (d_t phi - (dW*rho + dV*nu) . grad phi) d rho dt``
    with the midpoint rule on the curve's grid; on each cell the measure is
    the piecewise-constant value ``rho_i``.
    """
    T = float(sol.times[-1])
    if not phi.vanishes_near_ends(T):
        raise ValueError("test function must vanish near t = 0 and t = T")
    if phi.xi.dim != sol.dim:
        raise ValueError("test function dimension does not match the solution")
    total = 0.0
    for i in range(sol.k):
        t0, t1 = sol.times[i], sol.times[i + 1]
        tm = 0.5 * (t0 + t1)
        mu = sol.measure(i)
        u = drift(EnergyContext(W, V, nu.at(tm)), mu)
        integrand = phi.dt(tm, mu.points) - np.sum(u * phi.grad(tm, mu.points), axis=1)
        total += (t1 - t0) * float(mu.weights @ integrand)
    return abs(total)


def _implicit_euler(ctx: EnergyContext, mu: DiscreteMeasure, tau: float, tol: float = 1e-13) -> np.ndarray:
    X = mu.points

    def velocity_residual(Y):
        return Y - X + tau * drift(ctx, mu.with_points(Y))

    Y = X - tau * drift(ctx, mu)
    for _ in range(200):
        Y_new = X - tau * drift(ctx, mu.with_points(Y))
        err = float(np.max(np.abs(Y_new - Y)))
        Y = Y_new
        if err < tol:
            return Y
    sol = root(lambda y: velocity_residual(y.reshape(X.shape)).ravel(), Y.ravel(), method="hybr",
               options={"xtol": 1e-14})
    if not sol.success:
        raise RuntimeError(f"implicit Euler solve failed: {sol.message}")
    return sol.x.reshape(X.shape)


def particle_ode_oracle(
    W: Kernel, V: Kernel, nu: ControlCurve, rho0: DiscreteMeasure, cfg: SchemeConfig, method: str = "explicit"
) -> SolutionCurve:
    """Euler integration of the particle system ``x' = -(dW*rho + dV*nu)(x)``.

    ``explicit`` uses the control at the start of each step, ``implicit``
    solves ``y = x - tau * drift(y)`` with the control at the end of the step.
    """
    if method not in ("explicit", "implicit"):
        raise ValueError(f"unknown oracle method {method!r}")
    tau = cfg.tau
    pts = np.empty((cfg.k + 1, len(rho0), rho0.dim))
    pts[0] = rho0.points
    mu = rho0
    steps = []
    for i in range(cfg.k):
        t_eval = (i + 1) * tau if method == "implicit" else i * tau
        ctx = EnergyContext(W, V, nu.at(t_eval))
        if method == "explicit":
            Y = mu.points - tau * drift(ctx, mu)
        else:
            Y = _implicit_euler(ctx, mu, tau)
        nxt = mu.with_points(Y)
        w2, _ = wasserstein(mu, nxt, 2)
        steps.append(StepMeta(w2, total_energy(ctx, mu), total_energy(ctx, nxt), 1, True))
        pts[i + 1] = Y
        mu = nxt
    times = tau * np.arange(cfg.k + 1)
    times[-1] = cfg.T
    return SolutionCurve(times, pts, rho0.weights, steps, f"ode-{method}")


def sup_gap(sol: SolutionCurve, ref: SolutionCurve) -> float:
    """``max_i W_2(sol(t_i), ref(t_i))`` over the grid of ``sol``.

    ``ref`` may be finer, as long as its step count is a multiple of ``sol``'s.
    """
    if ref.k % sol.k:
        raise ValueError(f"reference grid ({ref.k} steps) does not refine {sol.k} steps")
    r = ref.k // sol.k
    return max(wasserstein(sol.measure(i), ref.measure(r * i), 2)[0] for i in range(sol.k + 1))
