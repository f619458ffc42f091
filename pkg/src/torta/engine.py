"""Deterministic timeslot simulator: workload, queueing, cost accounting, failures.

One ``Engine.step`` runs a slot in the order: drop expired work, apply the
failure schedule, generate arrivals, normalize demand/supply, solve the
regional transport problem, ask the scheduler for a forecast and an
allocation matrix, route tasks, then per region (in index order) activate
servers, match tasks greedily and drain server queues.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import micro
from .core import (
    SLOT_SECONDS,
    Config,
    ConfigError,
    FailureEvent,
    GpuKind,
    HistoryFeatures,
    RegionState,
    ServerMode,
    ServerSpec,
    ServerState,
    SystemState,
    Task,
    TaskClass,
    Weights,
    WorkloadConfig,
    check_allocation,
    child_rng,
)
from .topology import Topology
from .transport import (
    DegenerateDemand,
    build_cost_matrix,
    normalize_distributions,
    plan_to_routing,
    solve_ot,
)

# compute units/slot, memory units, preferred class, warm-up slots, power draw factor
GPU_PROFILES = {
    GpuKind.A100: (100.0, 80.0, TaskClass.ComputeIntensive, 3, 0.40),
    GpuKind.H100: (150.0, 80.0, TaskClass.ComputeIntensive, 3, 0.70),
    GpuKind.RTX4090: (60.0, 24.0, TaskClass.Lightweight, 2, 0.45),
    GpuKind.V100: (50.0, 64.0, TaskClass.MemoryIntensive, 4, 0.30),
    GpuKind.T4: (30.0, 16.0, TaskClass.Lightweight, 2, 0.07),
}

CLASS_COMPUTE_FACTOR = {TaskClass.ComputeIntensive: 1.0, TaskClass.MemoryIntensive: 0.8,
                        TaskClass.Lightweight: 0.5}
CLASS_MEMORY_RANGE = {TaskClass.ComputeIntensive: (8.0, 40.0), TaskClass.MemoryIntensive: (30.0, 70.0),
                      TaskClass.Lightweight: (2.0, 12.0)}


@dataclass
class WorkloadSpec:
    rates: np.ndarray                # base arrivals/slot per origin region
    phases: np.ndarray
    amplitude: float = 0.4
    period_slots: int = 240
    surges: tuple = ()               # (start, duration) windows
    surge_factor: float = 2.0
    class_mix: tuple = (0.35, 0.25, 0.40)
    compute_range: tuple = (10.0, 50.0)
    deadline_range: tuple = (4, 12)
    users: int = 1000
    model_tags: int = 3
    horizon: int = 480
    slot_seconds: float = SLOT_SECONDS

    def __post_init__(self):
        self.rates = np.asarray(self.rates, float)
        self.phases = np.asarray(self.phases, float)
        if np.any(self.rates < 0):
            raise ValueError("arrival rates must be non-negative")
        if abs(sum(self.class_mix) - 1) > 1e-9:
            raise ValueError("class mix must sum to 1")
        ranks = np.arange(1, self.users + 1, dtype=float)
        p = ranks ** -1.1
        self._user_cdf = np.cumsum(p / p.sum())

    def rate(self, slot: int) -> np.ndarray:
        lam = self.rates * (1 + self.amplitude * np.sin(2 * math.pi * slot / self.period_slots + self.phases))
        for start, dur in self.surges:
            if start <= slot < start + dur:
                lam = lam * self.surge_factor
        return np.maximum(lam, 0.0)

    @property
    def mean_compute(self) -> float:
        lo, hi = self.compute_range
        mid = 0.5 * (lo + hi)
        return mid * sum(m * CLASS_COMPUTE_FACTOR[TaskClass(k)] for k, m in enumerate(self.class_mix))


def workload_from_config(wc: WorkloadConfig, n_regions: int, horizon: int = 480) -> WorkloadSpec:
    """Resolve per-region rates and phases; geography is seeded by the topology size only."""
    rng = child_rng(7, n_regions)
    if wc.rates:
        rates = np.asarray(wc.rates, float)
        if len(rates) != n_regions:
            raise ConfigError(f"workload.rates has {len(rates)} entries for {n_regions} regions")
    else:
        rates = wc.base_rate * rng.lognormal(0.0, wc.rate_skew, size=n_regions)
        rates *= wc.base_rate * n_regions / rates.sum()
    phases = rng.uniform(-wc.phase_spread / 2, wc.phase_spread / 2, size=n_regions)
    return WorkloadSpec(
        rates=rates,
        phases=phases,
        amplitude=0.0 if wc.stationary else wc.diurnal_amplitude,
        period_slots=wc.period_slots,
        surges=tuple(tuple(s) for s in wc.surges),
        surge_factor=wc.surge_factor,
        class_mix=tuple(wc.class_mix),
        compute_range=(wc.compute_min, wc.compute_max),
        deadline_range=(wc.deadline_min, wc.deadline_max),
        users=wc.users,
        model_tags=wc.model_tags,
        horizon=horizon,
    )


def generate_workload(spec: WorkloadSpec, slot: int, rng, start_id: int = 0) -> list:
    """Poisson arrivals per origin region for one slot, with sampled task fields."""
    lam = spec.rate(slot)
    counts = rng.poisson(lam)
    n = int(counts.sum())
    if n == 0:
        return []
    origins = np.repeat(np.arange(len(lam)), counts)
    classes = rng.choice(3, size=n, p=spec.class_mix)
    lo, hi = spec.compute_range
    base = rng.uniform(lo, hi, size=n)
    mem_u = rng.uniform(size=n)
    dl = rng.integers(spec.deadline_range[0], spec.deadline_range[1] + 1, size=n)
    users = np.searchsorted(spec._user_cdf, rng.uniform(size=n))
    tags = rng.integers(0, spec.model_tags, size=n)
    tasks = []
    for k in range(n):
        cls = TaskClass(int(classes[k]))
        mlo, mhi = CLASS_MEMORY_RANGE[cls]
        tasks.append(Task(
            id=start_id + k,
            origin_region=int(origins[k]),
            compute_req=float(base[k] * CLASS_COMPUTE_FACTOR[cls]),
            memory_req=float(mlo + (mhi - mlo) * mem_u[k]),
            deadline=slot + int(dl[k]),
            task_class=cls,
            arrival_slot=slot,
            user_id=int(users[k]),
            model_tag=int(tags[k]),
        ))
    return tasks


def compute_response_time(task: Task, spec: ServerSpec, now: int, backlog_before: float,
                          latency, slot_seconds: float = SLOT_SECONDS):
    """(wait_s, compute_s, network_s) for a task placed behind ``backlog_before`` units (FIFO)."""
    cap = spec.compute_capacity
    wait = ((now - task.arrival_slot) + backlog_before / cap) * slot_seconds
    compute = task.compute_req / cap * slot_seconds
    network = 2.0 * float(latency[task.origin_region, spec.region]) / 1000.0
    return wait, compute, network


def assignment_power_cost(task: Task, spec: ServerSpec, latency, w: Weights) -> float:
    return w.w_network * float(latency[task.origin_region, spec.region]) + w.w_compute * spec.power_price


def power_cost(assignments, w: Weights, latency) -> float:
    """Sum over (task, server_spec) pairs of w_network*L[origin, r] + w_compute*P[r, s]."""
    return float(sum(assignment_power_cost(t, s, latency, w) for t, s in assignments))


def switching_cost(a_t, a_prev) -> float:
    d = np.asarray(a_t, float) - np.asarray(a_prev, float)
    return float((d * d).sum())


@dataclass
class SlotReport:
    slot: int
    arrivals: int = 0
    region_arrivals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    completions: int = 0
    drops: int = 0
    carryover: int = 0
    wait_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    compute_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    network_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    power_cost: float = 0.0
    switching_cost: float = 0.0
    lb_coefficient: float | None = None
    region_util: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active_servers: int = 0
    assigned: int = 0
    ot_objective: float = 0.0
    ot_deviation: float = 0.0
    queue_total: int = 0

    @property
    def response_s(self) -> np.ndarray:
        return self.wait_s + self.compute_s + self.network_s

    @property
    def response_sum(self) -> float:
        return float(self.response_s.sum())


def objective_total(reports, w: Weights) -> float:
    """Sum over slots of completed response times + alpha*switch + beta*power."""
    return float(sum(r.response_sum + w.alpha * r.switching_cost + w.beta * r.power_cost for r in reports))


class FailureSchedule:
    """Per-slot unavailable servers; restoration is instantaneous at the window end."""

    def __init__(self, events=()):
        self.events = list(events)

    def unavailable(self, region: int, slot: int, n_servers: int) -> set:
        frac = 0.0
        for ev in self.events:
            if ev.region == region and ev.active(slot):
                frac = max(frac, ev.severity)
        return set(range(int(math.floor(frac * n_servers + 1e-12))))


def inject_failure(schedule: FailureSchedule, ev: FailureEvent) -> FailureSchedule:
    return FailureSchedule([*schedule.events, ev])


@dataclass
class MacroContext:
    """Everything the macro layer knows when choosing the allocation for a slot."""

    slot: int
    request_counts: np.ndarray
    capacities: np.ndarray
    cost: np.ndarray
    ot_plan: np.ndarray | None
    ot_routing: np.ndarray
    region_util: np.ndarray
    region_queue: np.ndarray
    alive: np.ndarray
    active_capacity: np.ndarray


def apportion(n: int, probs: np.ndarray) -> np.ndarray:
    """Largest-remainder split of n items by probabilities (ties to lower index)."""
    raw = n * probs
    base = np.floor(raw + 1e-12).astype(int)
    rem = n - base.sum()
    if rem > 0:
        order = np.lexsort((np.arange(len(probs)), -(raw - base)))
        base[order[:rem]] += 1
    return base


def build_servers(topo: Topology, mean_compute: float, weights: Weights | None = None):
    regions = []
    sid = 0
    for r in range(topo.n_regions):
        servers = []
        for kind in sorted(topo.inventory[r]):
            cap, mem, pref, warm, power = GPU_PROFILES[GpuKind(kind)]
            for _ in range(topo.inventory[r][kind]):
                spec = ServerSpec(region=r, gpu_kind=GpuKind(kind), compute_capacity=cap,
                                  memory_capacity=mem, avg_capacity_contrib=cap / mean_compute,
                                  power_price=float(topo.electricity_price[r]) * power,
                                  preferred_class=pref, warmup_slots=warm, server_id=sid)
                servers.append(ServerState(spec=spec))
                sid += 1
        regions.append(RegionState(servers=servers, operational_cost=float(topo.operational_cost[r]),
                                   electricity_price=float(topo.electricity_price[r])))
    return regions


class Engine:
    """Single-owner, single-threaded simulator instance."""

    def __init__(self, topo: Topology, scheduler, cfg: Config | None = None, seed: int = 0,
                 workload: WorkloadSpec | None = None, failures=()):
        self.cfg = cfg or Config()
        self.topo = topo
        self.w = self.cfg.weights
        self.seed = seed
        self.slot_seconds = self.cfg.slot_seconds
        self.workload = workload or workload_from_config(self.cfg.workload, topo.n_regions, self.cfg.horizon)
        self.scheduler = scheduler
        self.failures = FailureSchedule([*self.cfg.failures, *failures])
        r = topo.n_regions
        self.n_regions = r
        self.cost = build_cost_matrix(topo.latency, topo.bandwidth_cost, topo.operational_cost, self.w)
        self.regions = build_servers(topo, self.workload.mean_compute)
        self.buffers = [micro.TaskBuffer(self.cfg.buffer_bound, self.cfg.buffer_threshold) for _ in range(r)]
        for reg in self.regions:
            n_init = int(math.ceil(self.cfg.initial_active_fraction * len(reg.servers)))
            for s in reg.servers[:n_init]:
                s.mode = ServerMode.Active
            reg.refresh_capacity()
        self.slot = 0
        self.next_task_id = 0
        self.prev_action = np.eye(r)
        self.history = HistoryFeatures(r)
        self.utilization = np.zeros(r)
        self.queues = np.zeros(r)
        self.forecast = np.zeros(r)
        self.pending_info = {}   # task id -> (wait, compute, network, finish_slot_float)
        self.totals = {"arrivals": 0, "completions": 0, "drops": 0}
        if hasattr(scheduler, "reset"):
            scheduler.reset(self)

    # -- views -------------------------------------------------------------
    def state(self) -> SystemState:
        return SystemState(slot=self.slot, utilization=self.utilization.copy(), queues=self.queues.copy(),
                           latency=self.topo.latency, history=self.history.copy(),
                           forecast=self.forecast.copy(), prev_action=self.prev_action.copy())

    def in_flight(self) -> int:
        return sum(len(b) for b in self.buffers) + sum(len(s.queue) for reg in self.regions for s in reg.servers)

    def region_queue_counts(self) -> np.ndarray:
        return np.array([len(self.buffers[r]) + sum(len(s.queue) for s in reg.servers)
                         for r, reg in enumerate(self.regions)], float)

    # -- slot --------------------------------------------------------------
    def _apply_failures(self, t: int):
        for r, reg in enumerate(self.regions):
            down = self.failures.unavailable(r, t, len(reg.servers))
            for k, s in enumerate(reg.servers):
                fail = k in down
                if fail and not s.failed:
                    s.failed = True
                    for task in s.queue:
                        self.pending_info.pop(task.id, None)
                        if not self.buffers[r].push(task):
                            self._dropped.append(task)
                    s.queue.clear()
                    s.backlog = 0.0
                    s.utilization = 0.0
                elif not fail and s.failed:
                    s.failed = False

    def _route(self, tasks, alloc: np.ndarray, alive: np.ndarray):
        r = self.n_regions
        by_origin = [[] for _ in range(r)]
        for t in tasks:
            by_origin[t.origin_region].append(t)
        routed = [[] for _ in range(r)]
        for i in range(r):
            if not by_origin[i]:
                continue
            row = alloc[i] * alive
            row = row / row.sum() if row.sum() > 0 else alive / alive.sum()
            counts = apportion(len(by_origin[i]), row)
            k = 0
            for j in range(r):
                routed[j].extend(by_origin[i][k:k + counts[j]])
                k += counts[j]
        return routed

    def step(self, tasks=None) -> SlotReport:
        t = self.slot
        r = self.n_regions
        w = self.w
        rep = SlotReport(slot=t)
        self._dropped = []

        for b in self.buffers:
            self._dropped.extend(b.drop_expired(t))
        self._apply_failures(t)

        if tasks is None:
            tasks = generate_workload(self.workload, t, child_rng(self.seed, t), self.next_task_id)
        self.next_task_id = max([self.next_task_id, *[x.id + 1 for x in tasks]])
        rep.arrivals = len(tasks)
        counts = np.bincount([x.origin_region for x in tasks], minlength=r).astype(float)
        rep.region_arrivals = counts
        for reg, c in zip(self.regions, counts):
            reg.request_count = int(c)
            reg.refresh_capacity()
        installed = np.array([reg.installed_capacity for reg in self.regions])
        alive = (installed > 0).astype(float)
        if alive.sum() == 0:
            alive = np.ones(r)

        # macro layer
        ot_plan = None
        try:
            marg = normalize_distributions(counts, np.maximum(installed, 1e-12))
            sol = solve_ot(marg, self.cost)
            ot_plan = sol.plan
            ot_routing = plan_to_routing(sol)
            rep.ot_objective = sol.objective
        except DegenerateDemand:
            ot_routing = self.prev_action.copy()
        ctx = MacroContext(slot=t, request_counts=counts, capacities=installed, cost=self.cost,
                           ot_plan=ot_plan, ot_routing=ot_routing, region_util=self.utilization.copy(),
                           region_queue=self.queues.copy(), alive=alive,
                           active_capacity=np.array([reg.resource_capacity for reg in self.regions]))
        state = self.state()
        fc = self.scheduler.forecast(state, ctx) if hasattr(self.scheduler, "forecast") else None
        if fc is not None:
            self.forecast = np.maximum(np.asarray(fc, float), 0.0)
            state = self.state()
        try:
            alloc = check_allocation(self.scheduler.macro_allocate(state, tasks, ctx))
        except Exception as e:
            raise RuntimeError(f"scheduler {getattr(self.scheduler, 'name', '?')} failed at slot {t}: {e}") from e
        rep.switching_cost = switching_cost(alloc, self.prev_action)
        rep.ot_deviation = float(np.linalg.norm(alloc - ot_routing))
        routed = self._route(tasks, alloc, alive)
        dest_forecast = alloc.T @ self.forecast if fc is not None else np.zeros(r)

        # micro layer, region index order
        waits, comps, nets = [], [], []
        processed = np.zeros(r)
        active_cap = np.zeros(r)
        utils_active = []
        power = 0.0
        pick = getattr(self.scheduler, "server_pick", None)
        for j, reg in enumerate(self.regions):
            buf = self.buffers[j]
            pending = buf.tasks() + routed[j]
            if fc is not None:
                # the forecast stands in for this slot's arrivals; Q is the carried backlog
                q = float(len(buf))
            else:
                q = float(len(pending))
            s_avail = sum(1 for s in reg.servers if not s.failed)
            c_avg = float(np.mean([s.spec.avg_capacity_contrib for s in reg.servers]))
            target = micro.target_active_servers(q, float(dest_forecast[j]), c_avg, w.sigma, s_avail)
            if buf.occupancy >= buf.threshold:
                target = min(s_avail, target + 1)
            dec = micro.plan_activation(j, reg.servers, target, self.cfg.max_delta, pending)
            micro.apply_activation(reg.servers, dec)

            released, _ = micro.buffer_step(buf, reg.servers)
            work = released + routed[j]
            region_pick = None
            if pick is not None:
                region_pick = (lambda task, feas, sc, idx, _j=j: pick(_j, task, feas, sc, idx))
            backlog_before = {id(s): s.backlog for s in reg.servers}
            by_id = {s.spec.server_id: s for s in reg.servers}
            # track per-server backlog growth to recover each task's FIFO position
            assignments, buffered_ids = micro.greedy_assign(work, reg.servers, w, t, j, region_pick)
            task_by_id = {x.id: x for x in work}
            running = dict(backlog_before)
            for a in assignments:
                task = task_by_id[a.task_id]
                srv = by_id[a.server_id]
                before = running[id(srv)]
                running[id(srv)] = before + task.compute_req
                wt, cp, nw = compute_response_time(task, srv.spec, t, before, self.topo.latency, self.slot_seconds)
                finish = t + (before + task.compute_req) / srv.spec.compute_capacity
                self.pending_info[task.id] = (wt, cp, nw, finish)
                power += assignment_power_cost(task, srv.spec, self.topo.latency, w)
            rep.assigned += len(assignments)
            for tid in buffered_ids:
                if not buf.push(task_by_id[tid]):
                    self._dropped.append(task_by_id[tid])

            # drain FIFO queues for one slot
            for s in reg.servers:
                if s.failed or s.mode != ServerMode.Active:
                    if s.mode == ServerMode.WarmingUp and not s.failed:
                        s.warmup_remaining -= 1
                        if s.warmup_remaining <= 0:
                            s.warmup_remaining = 0
                            s.mode = ServerMode.Active
                    s.utilization = 0.0
                    continue
                cap = s.spec.compute_capacity
                done = min(cap, s.backlog)
                s.backlog -= done
                if s.backlog < 1e-9:
                    s.backlog = 0.0
                s.utilization = done / cap
                processed[j] += done
                active_cap[j] += cap
                utils_active.append(s.utilization)
                s.idle_streak = s.idle_streak + 1 if done <= 0 else 0
                while s.queue:
                    head = s.queue[0]
                    wt, cp, nw, fin = self.pending_info[head.id]
                    if fin > t + 1 + 1e-9:
                        break
                    s.queue.popleft()
                    del self.pending_info[head.id]
                    s.recent_tasks.append((head.task_class, head.model_tag, t))
                    waits.append(wt)
                    comps.append(cp)
                    nets.append(nw)
                s.check()
            reg.queue_len = len(buf) + sum(len(s.queue) for s in reg.servers)

        rep.drops = len(self._dropped)
        rep.completions = len(waits)
        rep.wait_s = np.array(waits)
        rep.compute_s = np.array(comps)
        rep.network_s = np.array(nets)
        rep.power_cost = power
        rep.region_util = np.where(active_cap > 0, processed / np.where(active_cap > 0, active_cap, 1), 0.0)
        rep.active_servers = len(utils_active)
        ua = np.array(utils_active)
        rep.lb_coefficient = _lb(ua)
        rep.carryover = self.in_flight()
        rep.queue_total = int(sum(reg.queue_len for reg in self.regions))

        self.totals["arrivals"] += rep.arrivals
        self.totals["completions"] += rep.completions
        self.totals["drops"] += rep.drops
        assert self.totals["arrivals"] == self.totals["completions"] + self.totals["drops"] + rep.carryover, \
            "task conservation violated"

        # system state update
        self.utilization = rep.region_util.copy()
        self.queues = np.array([reg.queue_len for reg in self.regions], float)
        self.history.push(self.utilization, self.queues, counts, t)
        self.prev_action = alloc
        self.slot = t + 1
        if hasattr(self.scheduler, "observe"):
            self.scheduler.observe(self, rep, ctx, alloc)
        return rep

    def run(self, n_slots: int | None = None):
        n = self.cfg.horizon if n_slots is None else n_slots
        return [self.step() for _ in range(n)]


def _lb(utils: np.ndarray):
    # local copy of the metric to avoid a circular import with metrics
    if utils.size == 0 or utils.mean() <= 0:
        return None
    return float(1.0 / (1.0 + utils.std() / utils.mean()))
