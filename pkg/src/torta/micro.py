"""Intra-region layer: server activation, task-server scoring and greedy matching."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ServerMode, ServerSpec, ServerState, Task, TaskClass, Weights


@dataclass
class ActivationDecision:
    region: int
    target: int
    to_activate: list = field(default_factory=list)
    to_deactivate: list = field(default_factory=list)

    def __post_init__(self):
        if set(self.to_activate) & set(self.to_deactivate):
            raise ValueError("activate and deactivate lists overlap")


@dataclass(frozen=True)
class Assignment:
    task_id: int
    region: int
    server_id: int
    decided_slot: int


def target_active_servers(q: float, f: float, c_avg: float, sigma: float, s_r: int) -> int:
    """min(S_r, ceil((Q + F + sigma*sqrt(F)) / C_avg)), floored at 1 under load."""
    if c_avg <= 0:
        raise ValueError("c_avg must be positive")
    if q < 0 or f < 0:
        raise ValueError("queue and forecast must be non-negative")
    need = math.ceil((q + f + sigma * math.sqrt(f)) / c_avg)
    lo = 1 if q + f > 0 else 0
    return int(min(s_r, max(lo, need)))


def committed(server: ServerState) -> bool:
    return not server.failed and server.mode in (ServerMode.Active, ServerMode.WarmingUp)


def plan_activation(region_index: int, servers, target: int, max_delta: int = 2,
                    pending=()) -> ActivationDecision:
    """Move the committed server count toward ``target`` by at most ``max_delta``.

    Activation prefers short warm-up, then servers whose preferred class is
    common among ``pending`` tasks. Deactivation prefers low utilization, then
    long idle streaks, and never touches servers that still hold work.
    """
    dec = ActivationDecision(region_index, target)
    current = sum(committed(s) for s in servers)
    if target > current:
        mix = np.zeros(len(TaskClass))
        for t in pending:
            mix[int(t.task_class)] += 1
        idle = [(k, s) for k, s in enumerate(servers) if s.mode == ServerMode.Idle and not s.failed]
        idle.sort(key=lambda ks: (ks[1].spec.warmup_slots, -mix[int(ks[1].spec.preferred_class)], ks[0]))
        dec.to_activate = [k for k, _ in idle[:min(target - current, max_delta)]]
    elif target < current:
        active = [(k, s) for k, s in enumerate(servers)
                  if s.mode == ServerMode.Active and not s.failed and s.backlog <= 0]
        active.sort(key=lambda ks: (ks[1].utilization, -ks[1].idle_streak, ks[0]))
        dec.to_deactivate = [k for k, _ in active[:min(current - target, max_delta)]]
    return dec


def apply_activation(servers, dec: ActivationDecision):
    for k in dec.to_activate:
        s = servers[k]
        if s.spec.warmup_slots > 0:
            s.mode = ServerMode.WarmingUp
            s.warmup_remaining = s.spec.warmup_slots
        else:
            s.mode = ServerMode.Active
            s.warmup_remaining = 0
    for k in dec.to_deactivate:
        s = servers[k]
        s.mode = ServerMode.Idle
        s.utilization = 0.0


def type_match(task: Task, spec: ServerSpec) -> float:
    return 1.0 if task.task_class == spec.preferred_class else 0.5


def comp_hw(task: Task, spec: ServerSpec) -> float:
    if spec.compute_capacity <= 0 or spec.memory_capacity <= 0:
        raise ValueError("server capacities must be positive")
    return (min(1.0, spec.compute_capacity / task.compute_req)
            * min(1.0, spec.memory_capacity / task.memory_req)
            * type_match(task, spec))


def comp_load(server: ServerState) -> float:
    return math.exp(-(server.utilization + server.queue_load))


def similarity(task: Task, task_class, model_tag) -> float:
    if task.task_class != task_class:
        return 0.0
    return 1.0 if task.model_tag == model_tag else 0.5


def comp_locality(task: Task, server: ServerState, now: int, lambda_decay: float) -> float:
    total = 0.0
    for cls, tag, ts in server.recent_tasks:
        sim = similarity(task, cls, tag)
        if sim:
            total += sim / math.exp(lambda_decay * (now - ts))
    return total


def score(task: Task, server: ServerState, w: Weights, now: int = 0) -> float:
    return (w.score_w1 * comp_hw(task, server.spec)
            + w.score_w2 * comp_load(server)
            + w.score_w3 * comp_locality(task, server, now, w.lambda_decay))


def urgency_order(tasks):
    return sorted(tasks, key=lambda t: (t.deadline, -t.compute_req, t.id))


class _ScoreTable:
    """Vectorized score evaluation over a fixed list of candidate servers."""

    def __init__(self, servers, w: Weights, now: int):
        self.servers = servers
        self.w = w
        self.cap = np.array([s.spec.compute_capacity for s in servers], float)
        self.mem = np.array([s.spec.memory_capacity for s in servers], float)
        self.pref = np.array([int(s.spec.preferred_class) for s in servers])
        self.util = np.array([s.utilization for s in servers], float)
        self.backlog = np.array([s.backlog for s in servers], float)
        n_cls = len(TaskClass)
        self.loc_cls = np.zeros((len(servers), n_cls))
        self.loc_tag = [dict() for _ in servers]
        if w.score_w3:
            for k, s in enumerate(servers):
                for cls, tag, ts in s.recent_tasks:
                    d = math.exp(-w.lambda_decay * (now - ts))
                    self.loc_cls[k, int(cls)] += d
                    self.loc_tag[k][(int(cls), tag)] = self.loc_tag[k].get((int(cls), tag), 0.0) + d

    def scores(self, task: Task) -> np.ndarray:
        w = self.w
        hw = (np.minimum(1.0, self.cap / task.compute_req)
              * np.minimum(1.0, self.mem / task.memory_req)
              * np.where(self.pref == int(task.task_class), 1.0, 0.5))
        load = np.exp(-(self.util + self.backlog / self.cap))
        out = w.score_w1 * hw + w.score_w2 * load
        if w.score_w3:
            cls = int(task.task_class)
            same_tag = np.array([d.get((cls, task.model_tag), 0.0) for d in self.loc_tag])
            out = out + w.score_w3 * (0.5 * self.loc_cls[:, cls] + 0.5 * same_tag)
        return out


def greedy_assign(tasks, servers, w: Weights, now: int, region_index: int = 0, pick=None):
    """Urgency-ordered greedy matching of ``tasks`` onto Active servers.

    Returns (assignments, buffered_task_ids). Server backlogs are updated in
    place after each assignment so the load term of later scores sees it.
    ``pick(task, feasible_indices, scores)`` may override the argmax choice.
    """
    active_idx = [k for k, s in enumerate(servers) if s.mode == ServerMode.Active and not s.failed]
    assignments, buffered = [], []
    if not active_idx:
        return assignments, [t.id for t in urgency_order(tasks)]
    active = [servers[k] for k in active_idx]
    table = _ScoreTable(active, w, now)
    for task in urgency_order(tasks):
        feasible = np.flatnonzero(table.cap - table.backlog >= task.compute_req - 1e-12)
        if feasible.size == 0:
            buffered.append(task.id)
            continue
        sc = table.scores(task)
        if pick is not None:
            k = pick(task, feasible, sc, active_idx)
        else:
            k = int(feasible[np.argmax(sc[feasible])])
        srv = active[k]
        assert srv.remaining_capacity >= task.compute_req - 1e-12, "assignment exceeds capacity"
        srv.queue.append(task)
        srv.backlog += task.compute_req
        table.backlog[k] = srv.backlog
        assignments.append(Assignment(task.id, region_index, srv.spec.server_id, now))
    return assignments, buffered


class TaskBuffer:
    """Earliest-deadline-first holding area for tasks no server could take."""

    def __init__(self, bound: int = 500, threshold: float = 0.8):
        self.bound = bound
        self.threshold = threshold
        self._heap = []

    def __len__(self):
        return len(self._heap)

    def push(self, task: Task) -> bool:
        """Returns False (task rejected) when the buffer is full."""
        if len(self._heap) >= self.bound:
            return False
        heapq.heappush(self._heap, (task.deadline, task.arrival_slot, task.id, task))
        return True

    def pop(self) -> Task:
        return heapq.heappop(self._heap)[3]

    def peek(self):
        return self._heap[0][3] if self._heap else None

    def tasks(self):
        return [e[3] for e in sorted(self._heap)]

    def drop_expired(self, now: int):
        keep, dropped = [], []
        for e in self._heap:
            (dropped if e[0] < now else keep).append(e)
        heapq.heapify(keep)
        self._heap = keep
        return [e[3] for e in dropped]

    @property
    def occupancy(self) -> float:
        return len(self._heap) / self.bound


def buffer_step(buf: TaskBuffer, servers):
    """Release head-of-line tasks that fit somewhere; report the activation trigger.

    Fit is checked against tentative reservations so two released tasks never
    count the same free capacity twice.
    """
    trigger = buf.occupancy >= buf.threshold
    free = sorted((s.remaining_capacity for s in servers
                   if s.mode == ServerMode.Active and not s.failed), reverse=True)
    released = []
    while buf.peek() is not None and free:
        head = buf.peek()
        if free[0] < head.compute_req - 1e-12:
            break
        released.append(buf.pop())
        free[0] -= head.compute_req
        free.sort(reverse=True)
    return released, trigger
