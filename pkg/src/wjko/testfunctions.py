"""Smooth compactly supported test functions ``phi(t, x) = theta(t) xi(x)``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TimeBump", "SpaceBump", "TestFunction"]


def _bump(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``b(s) = exp(-1/(1-s))`` for ``0 <= s < 1`` (else 0) and its derivative in ``s``."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    one_minus = np.where(inside, 1.0 - s, 1.0)
    val = np.where(inside, np.exp(-1.0 / one_minus), 0.0)
    der = np.where(inside, -val / one_minus**2, 0.0)
    return val, der


@dataclass(frozen=True)
class TimeBump:
    """``theta(t) = amplitude * exp(-1/(1 - u^2))`` with ``u`` the position in ``(start, stop)``."""

    start: float
    stop: float
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        if not self.stop > self.start:
            raise ValueError("time bump needs start < stop")

    def _u(self, t):
        mid = 0.5 * (self.start + self.stop)
        half = 0.5 * (self.stop - self.start)
        return (np.asarray(t, dtype=float) - mid) / half, half

    def __call__(self, t) -> np.ndarray:
        u, _ = self._u(t)
        return self.amplitude * _bump(u * u)[0]

    def derivative(self, t) -> np.ndarray:
        u, half = self._u(t)
        return self.amplitude * _bump(u * u)[1] * 2.0 * u / half


@dataclass(frozen=True)
class SpaceBump:
    """``xi(x) = (1 + slope . (x - center)) * exp(-1/(1 - |x - center|^2 / r^2))``."""

    center: tuple
    radius: float
    slope: tuple = ()
    hess_bound: float = field(default=np.nan, compare=False)

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("space bump radius must be > 0")
        c = tuple(float(v) for v in np.atleast_1d(self.center))
        s = tuple(float(v) for v in self.slope) if len(self.slope) else (0.0,) * len(c)
        if len(s) != len(c):
            raise ValueError("slope and center must have the same dimension")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "slope", s)
        if np.isnan(self.hess_bound):
            object.__setattr__(self, "hess_bound", self._estimate_hess_bound())

    @property
    def dim(self) -> int:
        return len(self.center)

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        z = x - np.asarray(self.center)
        s = np.sum(z * z, axis=-1) / self.radius**2
        b, db = _bump(s)
        lin = 1.0 + z @ np.asarray(self.slope)
        return z, b, db, lin

    def __call__(self, x) -> np.ndarray:
        _, b, _, lin = self._parts(x)
        return lin * b

    def gradient(self, x) -> np.ndarray:
        z, b, db, lin = self._parts(x)
        return (b[..., None] * np.asarray(self.slope)
                + (lin * db * 2.0 / self.radius**2)[..., None] * z)

    def _estimate_hess_bound(self, n: int = 4000, h: float = 1e-5) -> float:
        rng = np.random.default_rng(12345)
        c = np.asarray(self.center)
        x = c + self.radius * rng.uniform(-1.0, 1.0, size=(n, self.dim))
        worst = 0.0
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            col = (self.gradient(x + e) - self.gradient(x - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(col))))
        return worst * self.dim


@dataclass(frozen=True)
class TestFunction:
    """Product test function ``phi(t, x) = theta(t) * xi(x)``."""

    __test__ = False  # not a pytest class

    theta: TimeBump
    xi: SpaceBump

    def dt(self, t: float, x) -> np.ndarray:
        return self.theta.derivative(t) * self.xi(x)

    def grad(self, t: float, x) -> np.ndarray:
        return self.theta(t) * self.xi.gradient(x)

    def vanishes_near_ends(self, T: float) -> bool:
        return self.theta.start > 0.0 and self.theta.stop < T

    def to_json(self) -> dict:
        return {
            "theta": {"start": self.theta.start, "stop": self.theta.stop, "amplitude": self.theta.amplitude},
            "xi": {"center": list(self.xi.center), "radius": self.xi.radius, "slope": list(self.xi.slope)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TestFunction":
        th, xi = obj["theta"], obj["xi"]
        return cls(
            TimeBump(float(th["start"]), float(th["stop"]), float(th.get("amplitude", 1.0))),
            SpaceBump(tuple(xi["center"]), float(xi["radius"]), tuple(xi.get("slope", ()))),
        )
