"""Interaction, cross and penalised energies of particle clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import Kernel, convolve_min_subgrad
from .measures import DiscreteMeasure, second_moment
from .transport import wasserstein

__all__ = [
    "EnergyContext",
    "interaction_energy",
    "cross_energy",
    "total_energy",
    "penalized_energy",
    "energy_gradient",
    "drift",
    "energy_hessian",
    "energy_lower_bound",
]


@dataclass(frozen=True)
class EnergyContext:
    """Self kernel ``W``, cross kernel ``V`` and the control measure frozen at one time."""

    W: Kernel
    V: Kernel
    control: DiscreteMeasure

    def __post_init__(self) -> None:
        if not self.W.satisfies_self:
            raise ValueError(
                f"self kernel {self.W!r} must be even, vanish at 0 and have a finite semiconvexity constant"
            )
        if not math.isfinite(self.V.lower_bound):
            raise ValueError(f"cross kernel {self.V!r} must be bounded from below")

    def at(self, control: DiscreteMeasure) -> "EnergyContext":
        return EnergyContext(self.W, self.V, control)


def _check_dim(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def _pair_sum(K: Kernel, x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray) -> float:
    if x.shape[0] == 0 or y.shape[0] == 0:
        return 0.0
    vals = K.eval(x[:, None, :] - y[None, :, :])
    return float(wx @ vals @ wy)


def interaction_energy(W: Kernel, mu: DiscreteMeasure) -> float:
    """``1/2 sum_ij w_i w_j W(x_i - x_j)`` (diagonal included; ``W(0) = 0``)."""
    return 0.5 * _pair_sum(W, mu.points, mu.weights, mu.points, mu.weights)


def cross_energy(V: Kernel, nu_t: DiscreteMeasure, mu: DiscreteMeasure) -> float:
    _check_dim(nu_t, mu)
    return _pair_sum(V, mu.points, mu.weights, nu_t.points, nu_t.weights)


def total_energy(ctx: EnergyContext, mu: DiscreteMeasure) -> float:
    _check_dim(ctx.control, mu)
    return interaction_energy(ctx.W, mu) + cross_energy(ctx.V, ctx.control, mu)


def penalized_energy(ctx: EnergyContext, mu_bar: DiscreteMeasure, mu: DiscreteMeasure, tau: float) -> float:
    """``W_2(mu_bar, mu)^2 / (2 tau) + F(mu)``."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    dist, _ = wasserstein(mu_bar, mu, 2)
    return dist * dist / (2.0 * tau) + total_energy(ctx, mu)


def drift(ctx: EnergyContext, mu: DiscreteMeasure) -> np.ndarray:
    """Per-atom ``dW * mu + dV * nu``; particles move with velocity ``-drift``."""
    return convolve_min_subgrad(ctx.W, mu, mu.points) + convolve_min_subgrad(ctx.V, ctx.control, mu.points)


def energy_gradient(ctx: EnergyContext, mu: DiscreteMeasure) -> np.ndarray:
    """Gradient of ``total_energy`` with respect to the atom positions, shape ``(n, d)``."""
    return mu.weights[:, None] * drift(ctx, mu)


def energy_hessian(ctx: EnergyContext, mu: DiscreteMeasure) -> np.ndarray | None:
    """Hessian of ``total_energy`` in the atom positions, shape ``(n*d, n*d)``.

    Pairs of coincident atoms contribute nothing (the self kernel's cusp has
    no Hessian there). Returns ``None`` if a kernel provides no Hessian.
    """
    if ctx.W.hessian is None or ctx.V.hessian is None:
        return None
    n, d = mu.points.shape
    w = mu.weights
    diff = mu.points[:, None, :] - mu.points[None, :, :]
    hw = ctx.W.hessian(diff) * (w[:, None] * w[None, :])[..., None, None]
    same = np.all(diff == 0.0, axis=2)
    hw[same] = 0.0
    H = -hw.transpose(0, 2, 1, 3).copy()
    block = hw.sum(axis=1)
    if len(ctx.control):
        hv = ctx.V.hessian(mu.points[:, None, :] - ctx.control.points[None, :, :])
        block = block + w[:, None, None] * np.einsum("ijab,j->iab", hv, ctx.control.weights)
    idx = np.arange(n)
    H[idx, :, idx, :] += block
    return H.reshape(n * d, n * d)


def energy_lower_bound(ctx: EnergyContext, mu: DiscreteMeasure) -> float:
    """A lower bound for ``total_energy(ctx, mu)`` from the kernel certificates.

    Uses ``W(z) >= lam/2 |z|^2`` (``W - lam/2|.|^2`` is convex, even and
    vanishes at 0) and ``V >= V_0``.
    """
    m = mu.total_mass
    self_part = 0.5 * ctx.W.lam * m * second_moment(mu) if ctx.W.lam < 0 else 0.0
    return self_part + m * ctx.control.total_mass * ctx.V.lower_bound
