"""Exact discrete optimal transport between finite measures."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .measures import DiscreteMeasure
from .tolerances import TOL

__all__ = [
    "Coupling",
    "InfeasibleTransport",
    "wasserstein",
    "wasserstein_many",
    "brute_force_wasserstein",
    "displacement_interpolate",
    "cost_matrix",
]

BRUTE_FORCE_CAP = 8


class InfeasibleTransport(ValueError):
    """The two measures cannot be coupled (different masses, or one is empty)."""


@dataclass(frozen=True, eq=False)
class Coupling:
    """Sparse transport plan: ``mass[k]`` goes from ``source[src[k]]`` to ``target[tgt[k]]``."""

    source: DiscreteMeasure
    target: DiscreteMeasure
    src: np.ndarray
    tgt: np.ndarray
    mass: np.ndarray
    p: float
    cost: float

    def dense(self) -> np.ndarray:
        g = np.zeros((len(self.source), len(self.target)))
        np.add.at(g, (self.src, self.tgt), self.mass)
        return g

    def marginal_defect(self) -> float:
        g = self.dense()
        return float(
            max(
                np.max(np.abs(g.sum(axis=1) - self.source.weights), initial=0.0),
                np.max(np.abs(g.sum(axis=0) - self.target.weights), initial=0.0),
            )
        )

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "cost": self.cost,
            "plan": [[int(i), int(j), float(m)] for i, j, m in zip(self.src, self.tgt, self.mass)],
        }


def cost_matrix(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    if p == 2:
        return np.einsum("ijk,ijk->ij", diff, diff)
    return np.linalg.norm(diff, axis=2) ** p


def _check_pair(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> None:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if (len(mu) == 0) != (len(nu) == 0):
        raise InfeasibleTransport("cannot couple an empty measure with a nonempty one")
    if abs(mu.total_mass - nu.total_mass) > TOL.marginal:
        raise InfeasibleTransport(
            f"total masses differ: {mu.total_mass!r} vs {nu.total_mass!r}"
        )


def _is_uniform_pair(mu: DiscreteMeasure, nu: DiscreteMeasure) -> bool:
    if len(mu) != len(nu):
        return False
    w = mu.weights[0]
    return bool(np.all(mu.weights == w) and np.all(nu.weights == w))


def _pair_costs(mu, nu, src, tgt, p) -> np.ndarray:
    diff = mu.points[src] - nu.points[tgt]
    if p == 2:
        return np.einsum("ij,ij->i", diff, diff)
    return np.linalg.norm(diff, axis=1) ** p


def _assignment(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float):
    n = len(mu)
    if mu.dim == 1:
        # monotone rearrangement is optimal for convex costs on the line
        src = np.argsort(mu.points[:, 0], kind="stable")
        tgt = np.argsort(nu.points[:, 0], kind="stable")
    else:
        src, tgt = linear_sum_assignment(cost_matrix(mu.points, nu.points, p))
    order = np.argsort(src, kind="stable")
    return src[order], tgt[order], np.full(n, mu.weights[0])


def _transport_lp(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float):
    n, m = len(mu), len(nu)
    c = cost_matrix(mu.points, nu.points, p).reshape(-1)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([mu.weights, nu.weights])
    # rescale target marginals onto the source mass so the system is consistent
    b_eq[n:] *= mu.total_mass / nu.total_mass if nu.total_mass > 0 else 1.0
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise InfeasibleTransport(f"transport LP failed: {res.message}")
    x = np.clip(res.x.reshape(n, m), 0.0, None)
    src, tgt = np.nonzero(x > 0)
    return src, tgt, x[src, tgt]


def wasserstein(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 2.0) -> tuple[float, Coupling]:
    """Exact ``W_p(mu, nu)`` and an optimal (vertex) plan.

    Equal-size uniform clouds go through an assignment solver (sorting on
    the line); everything else is a transportation LP solved by dual
    simplex, so the plan is a vertex of the transportation polytope.
    """
    _check_pair(mu, nu, p)
    n, m = len(mu), len(nu)
    if n == 0:
        empty = np.zeros(0, dtype=int)
        return 0.0, Coupling(mu, nu, empty, empty, np.zeros(0), float(p), 0.0)
    if n == 1 or m == 1:
        if n == 1:
            src, tgt, mass = np.zeros(m, dtype=int), np.arange(m), nu.weights.copy()
        else:
            src, tgt, mass = np.arange(n), np.zeros(n, dtype=int), mu.weights.copy()
    elif _is_uniform_pair(mu, nu):
        src, tgt, mass = _assignment(mu, nu, p)
    else:
        src, tgt, mass = _transport_lp(mu, nu, p)
    cost = float(np.sum(mass * _pair_costs(mu, nu, src, tgt, p)))
    plan = Coupling(mu, nu, np.asarray(src, dtype=int), np.asarray(tgt, dtype=int),
                    np.asarray(mass, dtype=float), float(p), cost)
    return max(cost, 0.0) ** (1.0 / p), plan


def wasserstein_many(
    pairs: Sequence[tuple[DiscreteMeasure, DiscreteMeasure]], p: float = 2.0, threads: int = 1
) -> list[float]:
    """Distances for many pairs; thread count never changes the results."""
    def one(pair):
        return wasserstein(pair[0], pair[1], p)[0]

    if threads <= 1 or len(pairs) < 2:
        return [one(pr) for pr in pairs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, pairs))


def brute_force_wasserstein(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 2.0) -> float:
    """Reference W_p for supports of at most 8 atoms each.

    Uniform equal-size clouds: minimum over all permutations. Otherwise an
    exact transportation simplex in rational arithmetic: north-west-corner
    start, then basis pivots (Bland's rule) until every reduced cost is
    nonnegative. No floating-point tolerance enters the pivoting.
    """
    _check_pair(mu, nu, p)
    n, m = len(mu), len(nu)
    if n > BRUTE_FORCE_CAP or m > BRUTE_FORCE_CAP:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_CAP} atoms per measure")
    if n == 0:
        return 0.0
    cost = cost_matrix(mu.points, nu.points, p)
    if _is_uniform_pair(mu, nu):
        w = mu.weights[0]
        best = min(
            sum(cost[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(m))
        )
        return (w * best) ** (1.0 / p)
    a = [Fraction(float(x)) for x in mu.weights]
    b = [Fraction(float(x)) for x in nu.weights]
    # absorb the (<= 1e-10) mass mismatch into the last target atom
    b[-1] += sum(a) - sum(b)
    if b[-1] < 0:
        raise InfeasibleTransport("mass mismatch too large for exact solve")
    c = [[Fraction(float(cost[i, j])) for j in range(m)] for i in range(n)]
    flow = _exact_transport_simplex(a, b, c)
    total = sum(x * c[i][j] for (i, j), x in flow.items())
    return max(float(total), 0.0) ** (1.0 / p)


def _northwest_corner(a: list, b: list) -> dict:
    n, m = len(a), len(b)
    ra, rb = list(a), list(b)
    flow = {}
    i = j = 0
    while i < n and j < m:
        x = min(ra[i], rb[j])
        flow[(i, j)] = x
        ra[i] -= x
        rb[j] -= x
        if i == n - 1 and j == m - 1:
            break
        if ra[i] == 0 and i < n - 1:
            i += 1
        else:
            j += 1
    return flow


def _tree_path(basis, start_row: int, end_col: int) -> list:
    """Cells on the unique basis-tree path from row ``start_row`` to column ``end_col``."""
    adj: dict = {}
    for (i, j) in basis:
        adj.setdefault(("r", i), []).append((("c", j), (i, j)))
        adj.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("r", start_row), ("c", end_col)
    prev = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt, cell in adj.get(node, ()):
            if nxt not in prev:
                prev[nxt] = (node, cell)
                stack.append(nxt)
    path = []
    node = goal
    while prev[node] is not None:
        node, cell = prev[node]
        path.append(cell)
    return path[::-1]


def _exact_transport_simplex(a: list, b: list, c: list) -> dict:
    n, m = len(a), len(b)
    flow = _northwest_corner(a, b)
    while True:
        u: dict = {0: Fraction(0)}
        v: dict = {}
        pending = list(flow)
        while pending:
            rest = []
            for (i, j) in pending:
                if i in u and j not in v:
                    v[j] = c[i][j] - u[i]
                elif j in v and i not in u:
                    u[i] = c[i][j] - v[j]
                elif i not in u and j not in v:
                    rest.append((i, j))
            if len(rest) == len(pending):
                raise RuntimeError("transport basis is not a spanning tree")
            pending = rest
        entering = None
        for i in range(n):
            for j in range(m):
                if (i, j) not in flow and c[i][j] - u[i] - v[j] < 0:
                    entering = (i, j)
                    break
            if entering:
                break
        if entering is None:
            return flow
        path = _tree_path(flow, entering[0], entering[1])
        minus = path[0::2]
        theta = min(flow[cell] for cell in minus)
        leaving = min(cell for cell in minus if flow[cell] == theta)
        for k, cell in enumerate(path):
            flow[cell] += -theta if k % 2 == 0 else theta
        flow[entering] = theta
        del flow[leaving]


def displacement_interpolate(plan: Coupling, s: float) -> DiscreteMeasure:
    """Point cloud of ``((1-s) pi_1 + s pi_2)_# plan``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s must lie in [0, 1], got {s}")
    x = plan.source.points[plan.src]
    y = plan.target.points[plan.tgt]
    return DiscreteMeasure((1.0 - s) * x + s * y, plan.mass, plan.source.dim)


def geodesic_points(plan: Coupling, s_values: Iterable[float]) -> list[DiscreteMeasure]:
    return [displacement_interpolate(plan, s) for s in s_values]
