"""Interaction potentials with certified Lipschitz / semiconvexity constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import DiscreteMeasure
from .tolerances import TOL

__all__ = [
    "Kernel",
    "ValidationReport",
    "make_abs_kernel",
    "make_morse_kernel",
    "make_quadratic_capped_kernel",
    "make_zero_kernel",
    "kernel_from_spec",
    "convolve_min_subgrad",
    "validate_kernel",
    "certify_radial_lambda",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Kernel:
    """A potential ``K: R^d -> R`` with the constants the scheme relies on.

    ``eval`` maps an array of displacements ``(..., d)`` to ``(...)`` and
    ``min_subgrad`` to ``(..., d)``; the latter is the minimal-norm element
    of the subdifferential (the gradient wherever ``K`` is differentiable).
    ``hessian`` (optional) maps ``(..., d)`` to ``(..., d, d)`` away from the
    cusp; the inner JKO solver uses it for Newton steps when present.
    ``lam`` is a semiconvexity constant (``K - lam/2 |x|^2`` convex, ``lam <= 0``),
    ``quad_bound`` a ``C`` with ``K(x) <= C (1 + |x|^2)`` and ``lower_bound``
    a ``V_0`` with ``K >= V_0``.
    """

    eval: ArrayFn
    min_subgrad: ArrayFn
    lip: float
    lam: float
    even: bool = True
    value_at_zero: float = 0.0
    smooth_everywhere: bool = False
    lower_bound: float = -math.inf
    quad_bound: float = math.inf
    name: str = "custom"
    params: dict = field(default_factory=dict)
    hessian: ArrayFn | None = None

    def __call__(self, z) -> np.ndarray:
        return self.eval(np.asarray(z, dtype=float))

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    @property
    def satisfies_self(self) -> bool:
        """Flags required of a self-interaction kernel: even, zero at 0, finite lam."""
        return self.even and self.value_at_zero == 0.0 and math.isfinite(self.lam)

    def to_json(self) -> dict:
        return {"kind": self.name, **self.params}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"Kernel({self.name}({args}), lip={self.lip:g}, lam={self.lam:g})"


def _norm(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(z * z, axis=-1))


def _radial(profile: Callable, slope: Callable, curvature: Callable) -> tuple[ArrayFn, ArrayFn, ArrayFn]:
    def ev(z):
        return profile(_norm(np.asarray(z, dtype=float)))

    def grad(z):
        z = np.asarray(z, dtype=float)
        r = _norm(z)
        safe = np.where(r > 0, r, 1.0)
        factor = np.where(r > 0, slope(r) / safe, 0.0)
        return z * factor[..., None]

    def hess(z):
        z = np.asarray(z, dtype=float)
        r = _norm(z)
        pos = r > 0
        safe = np.where(pos, r, 1.0)
        u = z / safe[..., None]
        radial = np.where(pos, curvature(r), 0.0)
        tangential = np.where(pos, slope(r) / safe, 0.0)
        outer = u[..., :, None] * u[..., None, :]
        eye = np.eye(z.shape[-1])
        return radial[..., None, None] * outer + tangential[..., None, None] * (eye - outer)

    return ev, grad, hess


def certify_radial_lambda(
    profile: Callable, slope: Callable, r_max: float, h: float = 1e-3, margin: float = TOL.kernel_margin,
    curvature: Callable | None = None,
) -> float:
    """Semiconvexity constant of ``x -> g(|x|)`` from dense sampling of the profile ``g``.

    Takes the smallest of the radial curvature (the exact ``g''`` when
    ``curvature`` is given, including its limit at ``r = 0+``; otherwise
    second difference quotients), the quotient straddling the origin
    ``2 (g(h) - g(0)) / h^2`` and the tangential curvature ``g'(r)/r``,
    caps at 0 and subtracts ``margin``. A concave kink at the origin
    (``g'(0+) < 0``) admits no finite constant.
    """
    if slope(np.array([0.0]))[0] < -1e-12:
        return -math.inf
    r = np.arange(0.0, r_max + h, h)
    g = profile(r)
    if curvature is not None:
        radial = float(np.min(curvature(r)))
    else:
        radial = float(np.min((g[2:] - 2.0 * g[1:-1] + g[:-2]) / h**2))
    across = 2.0 * (g[1] - g[0]) / h**2
    tangential = slope(r[1:]) / r[1:]
    observed = min(radial, across, float(tangential.min()))
    return min(observed, 0.0) - margin


def make_abs_kernel(a: float = 1.0) -> Kernel:
    """``W(x) = a |x|``: convex, cusp at the origin."""
    if not a > 0:
        raise ValueError(f"abs kernel needs a > 0, got {a}")
    ev, grad, hess = _radial(lambda r: a * r, lambda r: np.full_like(r, a), np.zeros_like)
    return Kernel(ev, grad, lip=a, lam=0.0, lower_bound=0.0, quad_bound=a / 2.0,
                  name="abs", params={"a": a}, hessian=hess)


def make_morse_kernel(C_a: float, l_a: float, C_r: float, l_r: float) -> Kernel:
    """Morse potential shifted to vanish at the origin.

    ``W(x) = -C_a exp(-|x|/l_a) + C_r exp(-|x|/l_r) + (C_a - C_r)``.
    Parameters with ``C_a/l_a < C_r/l_r`` put a concave kink at 0; the kernel
    is still built (it evaluates fine) but gets ``lam = -inf`` and is rejected
    wherever a semiconvex self-kernel is required.
    """
    for name, val in (("C_a", C_a), ("l_a", l_a), ("C_r", C_r), ("l_r", l_r)):
        if not val > 0:
            raise ValueError(f"Morse parameter {name} must be > 0, got {val}")

    def profile(r):
        return -C_a * np.exp(-r / l_a) + C_r * np.exp(-r / l_r) + (C_a - C_r)

    def slope(r):
        return C_a / l_a * np.exp(-r / l_a) - C_r / l_r * np.exp(-r / l_r)

    def curvature(r):
        return -C_a / l_a**2 * np.exp(-r / l_a) + C_r / l_r**2 * np.exp(-r / l_r)

    ev, grad, hess = _radial(profile, slope, curvature)
    lip = C_a / l_a + C_r / l_r
    r_max = 40.0 * max(l_a, l_r)
    lam = certify_radial_lambda(profile, slope, r_max, curvature=curvature)
    grid = profile(np.linspace(0.0, r_max, 20001))
    lower = min(float(grid.min()), C_a - C_r) - TOL.kernel_margin
    return Kernel(ev, grad, lip=lip, lam=lam, lower_bound=lower, quad_bound=lip / 2.0,
                  name="morse", params={"C_a": C_a, "l_a": l_a, "C_r": C_r, "l_r": l_r},
                  hessian=hess)


def make_quadratic_capped_kernel(s: float = 1.0, cap_radius: float = 1.0) -> Kernel:
    """``s|x|^2/2`` inside ``|x| <= cap_radius``, continued linearly (C^1) outside."""
    if not (s > 0 and cap_radius > 0):
        raise ValueError("quadratic_capped needs s > 0 and cap_radius > 0")
    rc = cap_radius

    def profile(r):
        return np.where(r <= rc, 0.5 * s * r * r, s * rc * r - 0.5 * s * rc * rc)

    def slope(r):
        return s * np.minimum(r, rc)

    def curvature(r):
        return np.where(r <= rc, s, 0.0)

    ev, grad, hess = _radial(profile, slope, curvature)
    return Kernel(ev, grad, lip=s * rc, lam=0.0, smooth_everywhere=True, lower_bound=0.0,
                  quad_bound=0.5 * s * max(1.0, rc), name="quadratic_capped",
                  params={"s": s, "cap_radius": cap_radius}, hessian=hess)


def make_zero_kernel() -> Kernel:
    def ev(z):
        return np.zeros(np.shape(z)[:-1])

    def grad(z):
        return np.zeros(np.shape(z))

    def hess(z):
        return np.zeros(np.shape(z) + (np.shape(z)[-1],))

    return Kernel(ev, grad, lip=0.0, lam=0.0, smooth_everywhere=True, lower_bound=0.0,
                  quad_bound=0.0, name="zero", params={}, hessian=hess)


_BUILDERS = {
    "abs": (make_abs_kernel, ("a",)),
    "morse": (make_morse_kernel, ("C_a", "l_a", "C_r", "l_r")),
    "quadratic_capped": (make_quadratic_capped_kernel, ("s", "cap_radius")),
    "zero": (make_zero_kernel, ()),
}


def kernel_from_spec(spec: dict) -> Kernel:
    """Build a kernel from ``{"kind": ..., <params>}``."""
    kind = spec.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {sorted(_BUILDERS)}")
    builder, names = _BUILDERS[kind]
    extra = set(spec) - set(names) - {"kind"}
    if extra:
        raise ValueError(f"unexpected parameters for {kind} kernel: {sorted(extra)}")
    try:
        args = [float(spec[n]) for n in names]
    except KeyError as exc:
        raise ValueError(f"{kind} kernel is missing parameter {exc.args[0]!r}") from None
    return builder(*args)


def convolve_min_subgrad(K: Kernel, mu: DiscreteMeasure, x) -> np.ndarray:
    """``sum_{y != x} w_y dK(x - y)``: atoms sitting exactly at ``x`` are skipped.

    ``x`` may be a single point ``(d,)`` or a batch ``(q, d)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = x.reshape(1, -1) if single else x
    if xs.shape[1] != mu.dim:
        raise ValueError(f"dimension mismatch: point has {xs.shape[1]}, measure {mu.dim}")
    if len(mu) == 0:
        out = np.zeros_like(xs)
    else:
        diff = xs[:, None, :] - mu.points[None, :, :]
        g = K.min_subgrad(diff)
        same = np.all(diff == 0.0, axis=2)
        g[same] = 0.0
        out = np.einsum("qjd,j->qd", g, mu.weights)
    return out[0] if single else out


@dataclass
class ValidationReport:
    kernel: str
    observed_lip: float
    observed_lambda: float
    evenness_defect: float
    zero_defect: float
    quad_bound_defect: float
    lower_bound_defect: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def validate_kernel(
    K: Kernel, samples: int = 2000, radius: float = 5.0, seed: int = 0, dim: int = 2,
    tol: float = TOL.kernel_margin,
) -> ValidationReport:
    """Check a kernel's claimed constants against random samples in ``B(0, radius)``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)

    def ball(n):
        v = rng.normal(size=(n, dim))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        return v * radius * rng.random((n, 1)) ** (1.0 / dim)

    x = ball(samples)
    # far pairs, near pairs, and pairs symmetric about the origin (cusp)
    third = max(samples // 3, 1)
    y = np.vstack([ball(samples)[:third],
                   x[third:2 * third] + 1e-2 * rng.normal(size=(len(x[third:2 * third]), dim)),
                   -x[2 * third:]])
    fx, fy = K.eval(x), K.eval(y)
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 1e-12
    observed_lip = float(np.max(np.abs(fx - fy)[ok] / dist[ok], initial=0.0))
    fm = K.eval(0.5 * (x + y))
    defect = 0.5 * fx + 0.5 * fy - fm
    # evaluating the defect loses ~eps * (|fx| + |fy| + |fm|); that error is
    # amplified by 8 / dist^2, so it is credited back before comparing
    quotient = 8.0 * defect[ok] / dist[ok] ** 2
    roundoff = 8.0 * 4 * np.finfo(float).eps * (np.abs(fx) + np.abs(fy) + np.abs(fm))[ok] / dist[ok] ** 2
    observed_lambda = float(np.min(quotient, initial=0.0))
    lambda_gap = float(np.min(quotient + roundoff - K.lam, initial=math.inf))
    evenness = float(np.max(np.abs(fx - K.eval(-x)), initial=0.0))
    zero = float(K.eval(np.zeros((1, dim)))[0])
    r2 = np.sum(x * x, axis=1)
    quad = float(np.max(fx - K.quad_bound * (1.0 + r2), initial=-math.inf))
    low = float(np.max(K.lower_bound - fx, initial=-math.inf))

    failures = []
    if observed_lip > K.lip + tol:
        failures.append(f"observed Lipschitz constant {observed_lip:.9g} exceeds certified {K.lip:.9g}")
    if lambda_gap < -tol:
        failures.append(f"observed semiconvexity {observed_lambda:.9g} below certified {K.lam:.9g}")
    if K.even and evenness > 1e-12:
        failures.append(f"kernel claims to be even but |K(x)-K(-x)| reaches {evenness:.3g}")
    if abs(zero - K.value_at_zero) > 1e-12:
        failures.append(f"K(0) = {zero:.3g} differs from declared {K.value_at_zero:.3g}")
    if quad > tol:
        failures.append(f"quadratic bound violated by {quad:.3g}")
    if low > tol:
        failures.append(f"lower bound violated by {low:.3g}")
    return ValidationReport(K.name, observed_lip, observed_lambda, evenness, zero, quad, low, failures)
