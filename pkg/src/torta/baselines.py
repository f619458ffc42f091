"""Reactive comparison schedulers.

Each scheduler exposes ``macro_allocate(state, tasks, ctx)`` returning a
row-stochastic R x R matrix and, optionally, ``server_pick`` to bypass the
micro-layer scorer. None of them forecast, so the engine sizes their active
server pools from the current queue alone.
"""

from __future__ import annotations

import numpy as np


class Scheduler:
    name = "base"

    def reset(self, engine):
        pass

    def forecast(self, state, ctx):
        return None

    def macro_allocate(self, state, tasks, ctx) -> np.ndarray:
        raise NotImplementedError


def _projected_util(ctx) -> np.ndarray:
    cap = np.where(ctx.capacities > 0, ctx.capacities, np.inf)
    return (ctx.region_queue + ctx.request_counts) / cap


def rr_allocate(pointers: np.ndarray, full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance each source's rotation pointer past full regions; one-hot rows.

    ``pointers[i]`` is the destination used last slot (or -1 before the first
    slot); returns the allocation and the updated pointers.
    """
    r = len(pointers)
    alloc = np.zeros((r, r))
    new = pointers.copy()
    for i in range(r):
        start = i if pointers[i] < 0 else (pointers[i] + 1) % r
        dest = start
        if not full.all():
            for step in range(r):
                cand = (start + step) % r
                if not full[cand]:
                    dest = cand
                    break
        alloc[i, dest] = 1.0
        new[i] = dest
    return alloc, new


class RoundRobin(Scheduler):
    """Rotates every source region's traffic through the destinations, one per slot."""

    name = "rr"

    def reset(self, engine):
        self.pointers = -np.ones(engine.n_regions, dtype=int)
        self.server_ptr = np.zeros(engine.n_regions, dtype=int)

    def macro_allocate(self, state, tasks, ctx):
        full = (ctx.alive == 0) | (ctx.region_util >= 1.0 - 1e-9)
        alloc, self.pointers = rr_allocate(self.pointers, full)
        return alloc

    def server_pick(self, region, task, feasible, scores, active_idx):
        n = len(active_idx)
        start = self.server_ptr[region] % n
        order = [(start + k) % n for k in range(n)]
        fs = set(int(f) for f in feasible)
        choice = next(k for k in order if k in fs)
        self.server_ptr[region] = choice + 1
        return choice


def skylb_allocate(ctx, threshold: float = 0.9) -> np.ndarray:
    """Local-first routing; load above ``threshold`` spills to the least-loaded remote region."""
    r = len(ctx.request_counts)
    alloc = np.eye(r)
    util = _projected_util(ctx)
    cap = ctx.capacities
    load = ctx.region_queue + ctx.request_counts
    for i in range(r):
        n = ctx.request_counts[i]
        if ctx.alive[i] and util[i] < threshold:
            continue
        if r == 1:
            break
        remote = [j for j in range(r) if j != i and ctx.alive[j]]
        if not remote:
            continue
        j = min(remote, key=lambda k: (util[k], k))
        if not ctx.alive[i] or n <= 0:
            keep = 0.0
        else:
            headroom = max(0.0, threshold * cap[i] - ctx.region_queue[i])
            keep = min(1.0, headroom / n)
        alloc[i] = 0.0
        alloc[i, i] = keep
        alloc[i, j] += 1.0 - keep
        # the spilled load now counts against the receiving region
        moved = (1.0 - keep) * n
        load[j] += moved
        load[i] -= moved
        util = load / np.where(cap > 0, cap, np.inf)
    return alloc


def _stable_hash(user_id: int) -> int:
    return (int(user_id) * 2654435761) & 0xFFFFFFFF


class SkyLB(Scheduler):
    name = "skylb"

    def __init__(self, threshold: float = 0.9):
        self.threshold = threshold

    def reset(self, engine):
        self.regions = engine.regions

    def macro_allocate(self, state, tasks, ctx):
        return skylb_allocate(ctx, self.threshold)

    def preferred_server(self, region: int, user_id: int) -> int:
        return _stable_hash(user_id) % len(self.regions[region].servers)

    def server_pick(self, region, task, feasible, scores, active_idx):
        """Probe servers from the user's hashed replica onward; first feasible wins."""
        n = len(self.regions[region].servers)
        pos = {srv: k for k, srv in enumerate(active_idx)}
        fs = set(int(f) for f in feasible)
        home = self.preferred_server(region, task.user_id)
        for step in range(n):
            k = pos.get((home + step) % n)
            if k is not None and k in fs:
                return k
        return int(feasible[0])


def sdib_allocate(ctx, eta: float = 0.5, chunks_per_region: int | None = None) -> np.ndarray:
    """Water-filling that greedily lowers std(utilization) + eta * mean idle fraction.

    Each source's demand is cut into equal chunks; chunks are placed one at a
    time (sources interleaved) on the destination whose projected utilization
    gives the smallest objective.
    """
    r = len(ctx.request_counts)
    if r == 1:
        return np.eye(1)
    cap = np.where(ctx.alive > 0, ctx.capacities, 0.0)
    live = cap > 0
    load = ctx.region_queue.astype(float).copy()
    k = chunks_per_region or 4 * r
    alloc = np.zeros((r, r))
    sizes = ctx.request_counts / k

    idx = np.flatnonzero(live)
    c = cap[idx]
    n = len(idx)
    for _ in range(k):
        for i in range(r):
            if sizes[i] <= 0:
                continue
            # objective after adding the chunk to each candidate, from running sums
            u = load[idx] / c
            du = sizes[i] / c
            s1 = u.sum() + du
            s2 = (u * u).sum() + (u + du) ** 2 - u * u
            std = np.sqrt(np.maximum(0.0, s2 / n - (s1 / n) ** 2))
            idle0 = np.maximum(0.0, 1.0 - u)
            idle = idle0.sum() - idle0 + np.maximum(0.0, 1.0 - u - du)
            val = std + eta * idle / n
            best = idx[int(np.argmin(val))]
            load[best] += sizes[i]
            alloc[i, best] += 1.0 / k
    for i in range(r):
        if sizes[i] <= 0:
            alloc[i] = 0.0
            alloc[i, i if live[i] else int(np.argmax(cap))] = 1.0
    return alloc / alloc.sum(axis=1, keepdims=True)


class SDIB(Scheduler):
    name = "sdib"

    def __init__(self, eta: float = 0.5):
        self.eta = eta

    def macro_allocate(self, state, tasks, ctx):
        return sdib_allocate(ctx, self.eta)


def reactive_ot_allocate(ctx) -> np.ndarray:
    """Row-normalized optimal transport plan of the current slot only."""
    return ctx.ot_routing.copy()


class ReactiveOT(Scheduler):
    name = "reactive-ot"

    def macro_allocate(self, state, tasks, ctx):
        return reactive_ot_allocate(ctx)


BASELINES = {"rr": RoundRobin, "skylb": SkyLB, "sdib": SDIB, "reactive-ot": ReactiveOT}


def make_baseline(name: str, cfg=None):
    if name not in BASELINES:
        raise KeyError(f"unknown scheduler {name!r}")
    if name == "skylb" and cfg is not None:
        return SkyLB(cfg.skylb_threshold)
    if name == "sdib" and cfg is not None:
        return SDIB(cfg.sdib_eta)
    return BASELINES[name]()
