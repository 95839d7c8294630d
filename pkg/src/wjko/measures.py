"""Finite weighted point clouds, control curves and the flat metric."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .tolerances import TOL

__all__ = [
    "DiscreteMeasure",
    "ControlCurve",
    "total_mass",
    "second_moment",
    "push_forward",
    "flat_distance",
    "PIECEWISE_CONSTANT",
    "PIECEWISE_LINEAR",
]

PIECEWISE_CONSTANT = "piecewise_constant"
PIECEWISE_LINEAR = "piecewise_linear"
_MODES = (PIECEWISE_CONSTANT, PIECEWISE_LINEAR)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """A weighted point cloud ``sum_i w_i delta_{x_i}`` in R^d.

    ``points`` has shape ``(n, dim)`` and ``weights`` shape ``(n,)``. Both
    arrays are stored read-only; build a new measure to change anything.
    """

    points: np.ndarray
    weights: np.ndarray
    dim: int = field(default=0)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        dim = int(self.dim)
        if pts.size == 0:
            if dim <= 0:
                dim = pts.shape[-1] if pts.ndim == 2 and pts.shape[-1] > 0 else 0
            if dim <= 0:
                raise ValueError("empty measure needs an explicit positive dim")
            pts = pts.reshape(0, dim)
        else:
            if pts.ndim == 1:
                pts = pts.reshape(-1, 1) if dim in (0, 1) else pts.reshape(-1, dim)
            if pts.ndim != 2:
                raise ValueError(f"points must be 2-D, got shape {pts.shape}")
            if dim <= 0:
                dim = pts.shape[1]
            if pts.shape[1] != dim:
                raise ValueError(f"points have dimension {pts.shape[1]}, expected {dim}")
        if pts.shape[0] != w.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise ValueError("points and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "dim", dim)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> "DiscreteMeasure":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x.reshape(1, -1), [mass])

    @classmethod
    def zero(cls, dim: int) -> "DiscreteMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0), dim)

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def is_probability(self, tol: float = TOL.mass) -> bool:
        return abs(self.total_mass - 1.0) <= tol

    def with_points(self, points) -> "DiscreteMeasure":
        return DiscreteMeasure(points, self.weights, self.dim)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, self.weights * factor, self.dim)

    def radius(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteMeasure":
        try:
            dim = int(obj["dim"])
            return cls(np.asarray(obj["points"], dtype=float).reshape(-1, dim), obj["weights"], dim)
        except KeyError as exc:
            raise ValueError(f"measure is missing key {exc.args[0]!r}") from None

    def __repr__(self) -> str:
        return f"DiscreteMeasure(n={len(self)}, dim={self.dim}, mass={self.total_mass:.6g})"


def total_mass(mu: DiscreteMeasure) -> float:
    return mu.total_mass


def second_moment(mu: DiscreteMeasure) -> float:
    return float(np.sum(mu.weights * np.sum(mu.points**2, axis=1)))


def push_forward(mu: DiscreteMeasure, f: Callable[[np.ndarray], np.ndarray]) -> DiscreteMeasure:
    """Image measure ``f_# mu``: every atom is moved by ``f``, weights kept.

    ``f`` acts on a single point. A point where ``f`` raises or returns a
    non-finite value is reported as a domain error (``ValueError``).
    """
    out = np.empty_like(mu.points)
    for i, x in enumerate(mu.points):
        try:
            y = np.asarray(f(x.copy()), dtype=float).reshape(-1)
        except (ArithmeticError, ValueError) as exc:
            raise ValueError(f"map undefined at support point {x.tolist()}: {exc}") from exc
        if y.shape != (mu.dim,) or not np.all(np.isfinite(y)):
            raise ValueError(f"map undefined at support point {x.tolist()}")
        out[i] = y
    return DiscreteMeasure(out, mu.weights, mu.dim)


def _signed_atoms(mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    pts = np.vstack([mu.points, nu.points])
    c = np.concatenate([mu.weights, -nu.weights])
    if pts.shape[0] == 0:
        return pts, c
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    net = np.zeros(uniq.shape[0])
    np.add.at(net, inv.reshape(-1), c)
    keep = net != 0.0
    return uniq[keep], net[keep]


def flat_distance(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Bounded-Lipschitz (flat) distance between two finite measures.

    ``sup { int f d(mu - nu) : |f| <= 1, Lip(f) <= 1 }``. Only the values of
    ``f`` on the union of the supports matter (any admissible table of values
    extends to R^d), so this is a finite LP solved exactly by dual simplex.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    pts, c = _signed_atoms(mu, nu)
    n = c.shape[0]
    if n == 0:
        return 0.0
    if n == 1:
        return float(abs(c[0]))
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    iu, ju = np.triu_indices(n, k=1)
    active = dist[iu, ju] < 2.0  # otherwise implied by the box constraints
    iu, ju = iu[active], ju[active]
    m = iu.shape[0]
    if m == 0:
        return float(np.sum(np.abs(c)))
    rows = np.arange(m)
    a = np.zeros((2 * m, n))
    a[rows, iu] = 1.0
    a[rows, ju] = -1.0
    a[m + rows, iu] = -1.0
    a[m + rows, ju] = 1.0
    b = np.concatenate([dist[iu, ju], dist[iu, ju]])
    res = linprog(-c, A_ub=a, b_ub=b, bounds=[(-1.0, 1.0)] * n, method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"flat-distance LP failed: {res.message}")
    return max(0.0, float(c @ res.x))


class ControlCurve:
    """Time-indexed control measures with a flat-metric Lipschitz certificate.

    Knot measures live in the class of measures with mass ``<= mass`` and
    support in the closed ball of radius ``radius``; adjacent knots must be
    within ``lip * dt`` in :func:`flat_distance`. In piecewise-linear mode the
    knots share one weight vector and points move linearly in between.
    """

    def __init__(
        self,
        knot_times: Sequence[float],
        knots: Sequence[DiscreteMeasure],
        mode: str = PIECEWISE_CONSTANT,
        lip: float = np.inf,
        mass: float = np.inf,
        radius: float = np.inf,
        check: bool = True,
    ) -> None:
        times = np.asarray(knot_times, dtype=float).reshape(-1)
        if mode not in _MODES:
            raise ValueError(f"unknown control mode {mode!r}")
        if times.size == 0 or len(knots) != times.size:
            raise ValueError("need one knot measure per knot time")
        if times[0] != 0.0:
            raise ValueError("first knot time must be 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        dims = {k.dim for k in knots}
        if len(dims) != 1:
            raise ValueError("knot measures have different dimensions")
        if mode == PIECEWISE_LINEAR:
            w0 = knots[0].weights
            for k in knots[1:]:
                if k.weights.shape != w0.shape or np.any(k.weights != w0):
                    raise ValueError("piecewise-linear knots must share one weight vector")
        self.knot_times = _frozen(times)
        self.knots = tuple(knots)
        self.mode = mode
        self.lip = float(lip)
        self.mass = float(mass)
        self.radius = float(radius)
        self.dim = dims.pop()
        if check:
            bad = self.violations()
            if bad:
                raise ValueError("inadmissible control curve: " + "; ".join(bad))

    @property
    def horizon(self) -> float:
        return float(self.knot_times[-1])

    @classmethod
    def constant(cls, measure: DiscreteMeasure, T: float, **certificate) -> "ControlCurve":
        certificate.setdefault("lip", 0.0)
        certificate.setdefault("mass", measure.total_mass)
        certificate.setdefault("radius", measure.radius())
        times = [0.0, T] if T > 0 else [0.0]
        return cls(times, [measure] * len(times), PIECEWISE_CONSTANT, **certificate)

    def __call__(self, t: float) -> DiscreteMeasure:
        return self.at(t)

    def at(self, t: float) -> DiscreteMeasure:
        times = self.knot_times
        if t <= times[0]:
            return self.knots[0]
        if t >= times[-1]:
            return self.knots[-1]
        i = bisect.bisect_right(times.tolist(), t) - 1
        if self.mode == PIECEWISE_CONSTANT:
            return self.knots[i]
        t0, t1 = times[i], times[i + 1]
        s = (t - t0) / (t1 - t0)
        a, b = self.knots[i], self.knots[i + 1]
        return DiscreteMeasure((1.0 - s) * a.points + s * b.points, a.weights, a.dim)

    def violations(self, tol: float = TOL.metric) -> list[str]:
        """Human-readable list of broken admissibility constraints (empty if fine)."""
        out = []
        for t, k in zip(self.knot_times, self.knots):
            if k.total_mass > self.mass + TOL.mass:
                out.append(f"mass {k.total_mass:.12g} > M={self.mass:.12g} at t={t:g}")
            if k.radius() > self.radius + TOL.support:
                out.append(f"support radius {k.radius():.12g} > R={self.radius:.12g} at t={t:g}")
        if np.isfinite(self.lip):
            for i in range(len(self.knots) - 1):
                dt = self.knot_times[i + 1] - self.knot_times[i]
                d = flat_distance(self.knots[i], self.knots[i + 1])
                if d > self.lip * dt + tol:
                    out.append(
                        f"flat distance {d:.12g} > L'*dt={self.lip * dt:.12g} "
                        f"on [{self.knot_times[i]:g}, {self.knot_times[i + 1]:g}]"
                    )
        return out

    def to_json(self) -> dict:
        return {
            "knot_times": self.knot_times.tolist(),
            "knots": [k.to_json() for k in self.knots],
            "mode": self.mode,
            "lip": self.lip,
            "mass": self.mass,
            "radius": self.radius,
        }

    @classmethod
    def from_json(cls, obj: dict, check: bool = True) -> "ControlCurve":
        try:
            return cls(
                obj["knot_times"],
                [DiscreteMeasure.from_json(k) for k in obj["knots"]],
                obj.get("mode", PIECEWISE_CONSTANT),
                obj.get("lip", np.inf),
                obj.get("mass", np.inf),
                obj.get("radius", np.inf),
                check=check,
            )
        except KeyError as exc:
            raise ValueError(f"control curve is missing key {exc.args[0]!r}") from None

    def __repr__(self) -> str:
        return (
            f"ControlCurve(knots={len(self.knots)}, T={self.horizon:g}, mode={self.mode}, "
            f"L'={self.lip:g}, M={self.mass:g}, R={self.radius:g})"
        )
