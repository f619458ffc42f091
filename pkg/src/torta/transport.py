"""Regional optimal transport: marginals, cost matrix, exact solver, routing.

The solver is a dense transportation simplex (u-v / MODI method) on the
R x R bipartite instance, started from the north-west corner basis.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import TOL_FEASIBILITY, TOL_MARGINAL_MASS, TOL_OPTIMALITY, Weights


class DegenerateDemand(ValueError):
    """All request counts are zero; the macro step has nothing to route."""


@dataclass(frozen=True)
class Marginals:
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, float)
        nu = np.asarray(self.nu, float)
        if mu.shape != nu.shape or mu.ndim != 1:
            raise ValueError("mu and nu must be vectors of equal length")
        if np.any(mu < 0) or np.any(nu < 0):
            raise ValueError("marginals must be non-negative")
        if abs(mu.sum() - 1) > TOL_MARGINAL_MASS or abs(nu.sum() - 1) > TOL_MARGINAL_MASS:
            raise ValueError("marginals must have unit mass")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    objective: float
    cost: np.ndarray
    pivots: int = 0


def _unit_mass(x: np.ndarray) -> np.ndarray:
    p = x / x.sum()
    # push the rounding residue into the largest entry so the sum is exact-ish
    p[np.argmax(p)] += 1.0 - p.sum()
    return p


def normalize_distributions(request_counts, capacities) -> Marginals:
    counts = np.asarray(request_counts, dtype=float)
    caps = np.asarray(capacities, dtype=float)
    if counts.shape != caps.shape:
        raise ValueError("request_counts and capacities differ in length")
    if np.any(counts < 0):
        raise ValueError("request counts must be non-negative")
    if np.any(caps <= 0):
        raise ValueError("capacities must be positive")
    if counts.sum() <= 0:
        raise DegenerateDemand("no requests this slot")
    return Marginals(_unit_mass(counts), _unit_mass(caps))


def build_cost_matrix(latency, bandwidth_cost, op_cost, w: Weights) -> np.ndarray:
    """C[i, j] = w1*L[i, j] + w2*BW[i, j] + w3*(op[j] - op[i])."""
    lat = np.asarray(latency, float)
    bw = np.asarray(bandwidth_cost, float)
    op = np.asarray(op_cost, float)
    r = len(op)
    if lat.shape != (r, r) or bw.shape != (r, r):
        raise ValueError(f"shape mismatch: latency {lat.shape}, bandwidth {bw.shape}, op_cost {op.shape}")
    return w.w1 * lat + w.w2 * bw + w.w3 * (op[None, :] - op[:, None])


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    m, n = len(a), len(b)
    a = a.copy()
    b = b.copy()
    x = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(a[i], b[j])
        x[i, j] = q
        basis.append((i, j))
        a[i] -= q
        b[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    # the residue of the last cell absorbs floating drift
    return x, basis


def _tree_paths(basis, m, n):
    """Adjacency of the basis spanning tree; rows are nodes 0..m-1, cols m..m+n-1."""
    adj = [[] for _ in range(m + n)]
    for (i, j) in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    return adj


def _duals(c, basis, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    adj = _tree_paths(basis, m, n)
    u[0] = 0.0
    queue = deque([0])
    seen = {0}
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if nb in seen:
                continue
            seen.add(nb)
            if node < m:
                v[nb - m] = c[node, nb - m] - u[node]
            else:
                u[nb] = c[nb, node - m] - v[node - m]
            queue.append(nb)
    if len(seen) != m + n:
        raise RuntimeError("basis is not a spanning tree")
    return u, v


def _cycle(basis, m, n, enter):
    """Alternating cycle through the entering cell; returns cells with +/- signs."""
    i, j = enter
    adj = _tree_paths(basis, m, n)
    start, goal = m + j, i
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()  # col j ... row i
    cells = [(enter, +1)]
    sign = -1
    for a, b in zip(path[:-1], path[1:]):
        cell = (a, b - m) if a < m else (b, a - m)
        cells.append((cell, sign))
        sign = -sign
    return cells


def solve_ot(m: Marginals, c, max_pivots: int = 100_000) -> TransportPlan:
    """Exact optimum of min <C, P> s.t. P 1 = mu, P^T 1 = nu, P >= 0.

    Entering cells follow Dantzig's rule; after a degenerate pivot the next
    choice switches to Bland's rule (smallest index) for both entering and
    leaving cells, which rules out cycling.
    """
    c = np.asarray(c, dtype=float)
    a, b = m.mu, m.nu
    rows, cols = len(a), len(b)
    if c.shape != (rows, cols):
        raise ValueError("cost matrix does not match marginals")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    # balance the masses exactly before the NW sweep
    b = b * (a.sum() / b.sum())
    x, basis = _northwest_corner(a, b)
    in_basis = np.zeros((rows, cols), dtype=bool)
    for cell in basis:
        in_basis[cell] = True
    bland = False
    pivots = 0
    while pivots < max_pivots:
        u, v = _duals(c, basis, rows, cols)
        red = c - u[:, None] - v[None, :]
        red[in_basis] = 0.0
        scale = max(1.0, float(np.abs(c).max()))
        neg = red < -TOL_OPTIMALITY * scale
        if not neg.any():
            break
        if bland:
            flat = int(np.flatnonzero(neg.ravel())[0])
        else:
            flat = int(np.argmin(red))
        enter = divmod(flat, cols)
        cyc = _cycle(basis, rows, cols, enter)
        minus = [cell for cell, s in cyc if s < 0]
        theta = min(x[cell] for cell in minus)
        ties = [cell for cell in minus if x[cell] <= theta + TOL_FEASIBILITY * 1e-3]
        leave = min(ties, key=lambda cl: cl[0] * cols + cl[1])
        for cell, s in cyc:
            x[cell] += s * theta
        x[leave] = 0.0
        basis.remove(leave)
        basis.append(enter)
        in_basis[leave] = False
        in_basis[enter] = True
        bland = theta <= TOL_FEASIBILITY * 1e-3
        pivots += 1
    else:
        raise RuntimeError("transportation simplex did not converge")
    x = np.maximum(x, 0.0)
    return TransportPlan(plan=x, objective=float((c * x).sum()), cost=c, pivots=pivots)


def plan_to_routing(p: TransportPlan) -> np.ndarray:
    """Row-normalize the plan; zero-mass rows go one-hot to their cheapest column."""
    plan = p.plan
    r = plan.shape[0]
    out = np.zeros_like(plan)
    sums = plan.sum(axis=1)
    for i in range(r):
        if sums[i] > 0:
            row = plan[i] / sums[i]
            row[np.argmax(row)] += 1.0 - row.sum()
            out[i] = row
        else:
            out[i, int(np.argmin(p.cost[i]))] = 1.0
    return out


def column_loads(plan: np.ndarray, capacities) -> np.ndarray:
    """Per-region load ratio w_j / c_j where w_j is the plan's column mass."""
    return np.asarray(plan).sum(axis=-2) / np.asarray(capacities, float)


def random_feasible_plans(m: Marginals, trials: int, rng, sinkhorn_iters: int = 500) -> np.ndarray:
    """Random plans with the given marginals (trials x R x R).

    Half are Sinkhorn-scaled random positive matrices, half are north-west
    corner vertices under random row/column orders.
    """
    r = len(m.mu)
    n_scaled = trials - trials // 2
    k = np.exp(rng.normal(scale=2.0, size=(n_scaled, r, r)))
    mu, nu = m.mu, m.nu
    p = k
    for _ in range(sinkhorn_iters):
        rs = p.sum(axis=2)
        p = p * np.where(rs > 0, mu[None, :] / np.where(rs > 0, rs, 1), 0)[:, :, None]
        cs = p.sum(axis=1)
        p = p * np.where(cs > 0, nu[None, :] / np.where(cs > 0, cs, 1), 0)[:, None, :]
        if np.abs(p.sum(axis=2) - mu).max() < 1e-13:
            break
    verts = np.empty((trials // 2, r, r))
    for t in range(trials // 2):
        ri = rng.permutation(r)
        ci = rng.permutation(r)
        x, _ = _northwest_corner(mu[ri], nu[ci])
        v = np.empty((r, r))
        v[np.ix_(ri, ci)] = x
        verts[t] = v
    return np.concatenate([p, verts], axis=0)


def minmax_load_check(p: TransportPlan, capacities, trials: int, rng, tol: float = 1e-9,
                      marginals: Marginals | None = None) -> bool:
    """True iff no random feasible plan beats ``p`` on max_j w_j / c_j by more than tol.

    Random plans share the marginals of ``p`` (or ``marginals`` when given,
    which lets a deliberately broken plan be checked against proper ones).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    plan = np.asarray(p.plan, float)
    if plan.shape[0] == 1:
        return True
    if marginals is None:
        marginals = Marginals(plan.sum(axis=1) / plan.sum(), plan.sum(axis=0) / plan.sum())
    t_max = column_loads(plan, capacities).max()
    samples = random_feasible_plans(marginals, trials, rng)
    sample_max = column_loads(samples, capacities).max(axis=1)
    return bool(np.all(sample_max >= t_max - tol))
