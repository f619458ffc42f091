"""Domain types, configuration and seeded randomness shared across the package.

Units used everywhere: time in seconds, money in dollars, compute in abstract
units, capacity in tasks/slot unless a docstring says otherwise.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

# Numerical tolerances used by every module.
TOL_FEASIBILITY = 1e-9
TOL_OPTIMALITY = 1e-8
TOL_ROW_STOCHASTIC = 1e-9
TOL_MARGINAL_MASS = 1e-12

SLOT_SECONDS = 45.0
DEFAULT_HORIZON = 480
HISTORY_K = 5
RECENT_WINDOW = 20
SLOTS_PER_DAY = int(24 * 3600 / SLOT_SECONDS)


class ConfigError(ValueError):
    """Invalid or unparsable configuration."""


class TaskClass(enum.IntEnum):
    ComputeIntensive = 0
    MemoryIntensive = 1
    Lightweight = 2


class GpuKind(enum.IntEnum):
    A100 = 0
    H100 = 1
    RTX4090 = 2
    V100 = 3
    T4 = 4


class ServerMode(enum.IntEnum):
    Active = 0
    WarmingUp = 1
    Idle = 2


@dataclass(frozen=True)
class Task:
    id: int
    origin_region: int
    compute_req: float
    memory_req: float
    deadline: int
    task_class: TaskClass
    arrival_slot: int
    user_id: int = 0
    model_tag: int = 0

    def __post_init__(self):
        if not self.compute_req > 0:
            raise ValueError("compute_req must be positive")
        if not self.memory_req > 0:
            raise ValueError("memory_req must be positive")
        if self.deadline < self.arrival_slot:
            raise ValueError("deadline precedes arrival")


@dataclass(frozen=True)
class ServerSpec:
    region: int
    gpu_kind: GpuKind
    compute_capacity: float
    memory_capacity: float
    avg_capacity_contrib: float
    power_price: float
    preferred_class: TaskClass
    warmup_slots: int = 2
    server_id: int = 0

    def __post_init__(self):
        if min(self.compute_capacity, self.memory_capacity, self.avg_capacity_contrib) <= 0:
            raise ValueError("server capacities must be positive")
        if self.power_price < 0:
            raise ValueError("power_price must be non-negative")


@dataclass
class ServerState:
    """Mutable per-server state owned by a single engine."""

    spec: ServerSpec
    mode: ServerMode = ServerMode.Idle
    utilization: float = 0.0
    queue: deque = field(default_factory=deque)
    recent_tasks: deque = field(default_factory=lambda: deque(maxlen=RECENT_WINDOW))
    warmup_remaining: int = 0
    backlog: float = 0.0  # unfinished compute units in the FIFO queue
    idle_streak: int = 0
    failed: bool = False

    @property
    def remaining_capacity(self) -> float:
        return self.spec.compute_capacity - self.backlog

    @property
    def queue_load(self) -> float:
        """Pending demand expressed in slots of this server's capacity."""
        return self.backlog / self.spec.compute_capacity

    def check(self):
        assert 0.0 <= self.utilization <= 1.0
        assert (self.warmup_remaining > 0) == (self.mode == ServerMode.WarmingUp)
        assert len(self.recent_tasks) <= RECENT_WINDOW


@dataclass
class RegionState:
    servers: list
    queue_len: int = 0
    request_count: int = 0
    resource_capacity: float = 0.0
    operational_cost: float = 0.0
    electricity_price: float = 0.0

    def active_servers(self):
        return [s for s in self.servers if s.mode == ServerMode.Active and not s.failed]

    def refresh_capacity(self):
        self.resource_capacity = float(sum(s.spec.avg_capacity_contrib for s in self.active_servers()))
        return self.resource_capacity

    @property
    def installed_capacity(self) -> float:
        """Capacity of every server not currently failed, whatever its mode."""
        return float(sum(s.spec.avg_capacity_contrib for s in self.servers if not s.failed))


def is_row_stochastic(a, tol: float = TOL_ROW_STOCHASTIC) -> bool:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if np.any(a < -tol) or np.any(a > 1 + tol):
        return False
    return bool(np.all(np.abs(a.sum(axis=1) - 1.0) <= tol))


def check_allocation(a) -> np.ndarray:
    """Validate and return an R x R row-stochastic allocation as a float array."""
    a = np.asarray(a, dtype=float)
    if not is_row_stochastic(a):
        raise ValueError("allocation matrix is not row-stochastic")
    return a


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize a non-negative matrix; all-zero rows become uniform."""
    x = np.asarray(x, dtype=float)
    s = x.sum(axis=1, keepdims=True)
    out = np.where(s > 0, x / np.where(s > 0, s, 1.0), 1.0 / x.shape[1])
    # fold the rounding residue into each row's largest entry
    resid = 1.0 - out.sum(axis=1)
    idx = out.argmax(axis=1)
    out[np.arange(out.shape[0]), idx] += resid
    return out


@dataclass
class HistoryFeatures:
    """Sliding window of the last K slots of (utilization, queues, arrivals)."""

    n_regions: int
    k: int = HISTORY_K
    window: deque = None
    slot: int = 0

    def __post_init__(self):
        if self.window is None:
            self.window = deque(maxlen=self.k)

    def push(self, utilization, queues, arrivals, slot: int):
        self.window.append((np.asarray(utilization, float).copy(),
                            np.asarray(queues, float).copy(),
                            np.asarray(arrivals, float).copy()))
        self.slot = slot

    @property
    def warmed(self) -> bool:
        return len(self.window) == self.k

    @property
    def time_encoding(self) -> np.ndarray:
        phase = 2 * math.pi * (self.slot % SLOTS_PER_DAY) / SLOTS_PER_DAY
        return np.array([math.sin(phase), math.cos(phase)])

    def copy(self) -> "HistoryFeatures":
        h = HistoryFeatures(self.n_regions, self.k, deque(self.window, maxlen=self.k), self.slot)
        return h


@dataclass(frozen=True)
class SystemState:
    slot: int
    utilization: np.ndarray
    queues: np.ndarray
    latency: np.ndarray
    history: HistoryFeatures
    forecast: np.ndarray
    prev_action: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.utilization)

    def validate(self):
        lat = self.latency
        if not np.allclose(lat, lat.T) or np.any(np.diag(lat) != 0):
            raise ValueError("latency must be symmetric with zero diagonal")
        if np.any(self.forecast < 0):
            raise ValueError("forecast entries must be non-negative")
        check_allocation(self.prev_action)

    def to_dict(self) -> dict:
        # float.hex keeps the round trip bit-exact
        def enc(a):
            a = np.asarray(a, dtype=float)
            return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}

        return {
            "slot": self.slot,
            "utilization": enc(self.utilization),
            "queues": enc(self.queues),
            "latency": enc(self.latency),
            "forecast": enc(self.forecast),
            "prev_action": enc(self.prev_action),
            "history": {
                "k": self.history.k,
                "slot": self.history.slot,
                "window": [[enc(u), enc(q), enc(a)] for u, q, a in self.history.window],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemState":
        def dec(e):
            return np.array([float.fromhex(v) for v in e["data"]], dtype=float).reshape(e["shape"])

        util = dec(d["utilization"])
        hist = HistoryFeatures(len(util), d["history"]["k"])
        for u, q, a in d["history"]["window"]:
            hist.window.append((dec(u), dec(q), dec(a)))
        hist.slot = d["history"]["slot"]
        return cls(d["slot"], util, dec(d["queues"]), dec(d["latency"]), hist,
                   dec(d["forecast"]), dec(d["prev_action"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "SystemState":
        return cls.from_dict(json.loads(s))


@dataclass
class Weights:
    alpha: float = 1.0
    beta: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w_network: float = 0.01
    w_compute: float = 1.0
    score_w1: float = 1.0
    score_w2: float = 50.0
    score_w3: float = 0.5
    lambda_smooth: float = 1.0
    lambda_cost: float = 0.1
    sigma: float = 1.25
    lambda_decay: float = 0.5
    q_max: float = 100.0
    eps_small: float = 1e-6

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.q_max <= 0:
            raise ConfigError("q_max must be positive")


@dataclass
class FailureEvent:
    region: int
    start_slot: int
    duration_slots: int
    severity: float = 1.0

    def __post_init__(self):
        if self.start_slot < 0:
            raise ValueError("start_slot must be >= 0")
        if self.duration_slots < 1:
            raise ValueError("duration_slots must be >= 1")
        if not 0 < self.severity <= 1:
            raise ValueError("severity must lie in (0, 1]")

    def active(self, slot: int) -> bool:
        return self.start_slot <= slot < self.start_slot + self.duration_slots


@dataclass
class WorkloadConfig:
    """Arrival process parameters; see engine.WorkloadSpec for the resolved form."""

    base_rate: float = 18.0          # mean arrivals/slot/region before skew
    rate_skew: float = 0.6           # lognormal spread of per-region base rates
    diurnal_amplitude: float = 0.4
    period_slots: int = 240
    phase_spread: float = 1.0        # radians spread of per-region phases
    surge_factor: float = 2.0
    surges: tuple = ()               # (start, duration) windows
    compute_min: float = 10.0
    compute_max: float = 50.0
    deadline_min: int = 4
    deadline_max: int = 12
    class_mix: tuple = (0.35, 0.25, 0.40)
    users: int = 1000
    model_tags: int = 3
    stationary: bool = False
    rates: tuple = ()                # explicit per-region rates override base_rate/skew


@dataclass
class Config:
    weights: Weights = field(default_factory=Weights)
    topology: str = "abilene"
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    training: dict = field(default_factory=lambda: dict(_TRAINING_DEFAULTS))
    horizon: int = DEFAULT_HORIZON
    slot_seconds: float = SLOT_SECONDS
    seed: int = 0
    max_delta: int = 2
    initial_active_fraction: float = 0.5
    buffer_bound: int = 10_000
    buffer_threshold: float = 0.8
    skylb_threshold: float = 0.9
    sdib_eta: float = 0.5
    failures: list = field(default_factory=list)


_TRAINING_DEFAULTS = {
    "epochs": 200,
    "slots_per_epoch": 48,
    "lr": 3e-4,
    "ppo_iters": 4,
    "clip_eps": 0.2,
    "gae_lambda": 0.95,
    "discount": 0.99,
    "value_coef": 0.5,
    "entropy_coef": 1e-3,
    "gamma0": 1.0,
    "delta0": 1.0,
    "alpha_gamma": 2.0,
    "alpha_delta": 1.0,
    "eps_target": 0.15,
    "s_target": 2.5,
    "eps0": 0.1,
    "s0": 1.0,
    "hidden": 256,
    "predictor_epochs": 60,
    "predictor_lr": 1e-3,
    "history_slots": 960,
    "k0_slots": 300,
    "lipschitz_probes": 8,
    "probe_scale": 0.05,
    "weight_cap": 100.0,
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        value = value.strip()
        if not value:
            return ()
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if parts and ":" in parts[0]:
            return tuple(tuple(int(x) for x in p.split(":")) for p in parts)
        return tuple(float(p) for p in parts)
    return value.strip()


def config_from_mapping(sections: dict) -> Config:
    """Build a Config from a {section: {key: str}} mapping, filling defaults."""
    cfg = Config()
    known = {"weights", "workload", "topology", "training", "failure", "run"}
    for name in sections:
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")

    wkw = {}
    wfields = {f.name: f for f in dataclasses.fields(Weights)}
    for k, v in sections.get("weights", {}).items():
        if k not in wfields:
            raise ConfigError(f"unknown weight {k!r}")
        try:
            wkw[k] = float(v)
        except ValueError as e:
            raise ConfigError(f"weights.{k}: {e}") from None
    cfg.weights = Weights(**wkw)

    wl = WorkloadConfig()
    for k, v in sections.get("workload", {}).items():
        if not hasattr(wl, k):
            raise ConfigError(f"unknown workload key {k!r}")
        try:
            setattr(wl, k, _coerce(v, getattr(wl, k)))
        except ValueError as e:
            raise ConfigError(f"workload.{k}: {e}") from None
    if abs(sum(wl.class_mix) - 1.0) > 1e-9 or len(wl.class_mix) != 3:
        raise ConfigError("workload.class_mix must be three fractions summing to 1")
    cfg.workload = wl

    topo = sections.get("topology", {})
    cfg.topology = topo.get("name", topo.get("path", cfg.topology)).strip()

    train = dict(_TRAINING_DEFAULTS)
    for k, v in sections.get("training", {}).items():
        if k not in train:
            raise ConfigError(f"unknown training key {k!r}")
        try:
            train[k] = _coerce(v, train[k])
        except ValueError as e:
            raise ConfigError(f"training.{k}: {e}") from None
    cfg.training = train

    run_defaults = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(Config)
                    if f.name not in ("weights", "topology", "workload", "training", "failures")}
    for k, v in sections.get("run", {}).items():
        if k not in run_defaults:
            raise ConfigError(f"unknown run key {k!r}")
        try:
            setattr(cfg, k, _coerce(v, run_defaults[k]))
        except ValueError as e:
            raise ConfigError(f"run.{k}: {e}") from None
    if cfg.horizon < 1:
        raise ConfigError("horizon must be >= 1")
    if cfg.slot_seconds <= 0:
        raise ConfigError("slot_seconds must be positive")

    fail = sections.get("failure", {})
    if fail:
        try:
            cfg.failures = [FailureEvent(int(fail["region"]), int(fail["start_slot"]),
                                         int(fail.get("duration_slots", 20)),
                                         float(fail.get("severity", 1.0)))]
        except (KeyError, ValueError) as e:
            raise ConfigError(f"failure: {e}") from None
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> Config:
    """Read an INI-style key=value config file.

    ``overrides`` maps "section.key" to string values and wins over the file.
    Parse errors carry the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else "?"
        raise ConfigError(f"{path}: parse error at line {lineno}") from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno}: missing section header") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override must look like section.key: {dotted!r}")
        sections.setdefault(sec, {})[key] = str(value)
    return config_from_mapping(sections)


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across runs and platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream keyed by (seed, keys...), e.g. (seed, slot)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.PCG64(ss))
