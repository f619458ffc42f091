"""Macro RL layer: Beta-parameterized policy over allocation matrices, PPO with
OT-deviation and switching constraints, and the training loop.

State encoding layout (length 2R^2 + 18R + 2)::

    U (R) | Q/q_max (R) | L/max(L) (R*R, row-major)
    | history: U x5, Q/q_max x5, arrivals/q_max x5 (15R, oldest first, zero-padded while cold)
    | (sin, cos) time of day (2) | F/q_max (R) | A_prev (R*R, row-major)

Network output: softplus(.)+1 of the first R^2 units gives Beta ``a`` per
cell, the next R^2 give ``b``, the last unit is the value estimate.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import betaln, digamma, polygamma

from .baselines import ReactiveOT, Scheduler
from .core import Config, SystemState, Weights, normalize_rows, seeded_rng
from .engine import Engine
from .predictor import (
    Adam,
    PredictorModel,
    build_features,
    collect_samples,
    fallback_forecast,
    predict,
    train_predictor,
)

POLICY_VERSION = 1
X_CLIP = 1e-6
LOG_COLUMNS = ("epoch", "mean_reward", "l_eps", "l_s", "s_current", "eps_current", "condition_ok")


class TrainingDiverged(RuntimeError):
    pass


def state_dim(n_regions: int) -> int:
    return 2 * n_regions * n_regions + 18 * n_regions + 2


def encode_state(s: SystemState, q_max: float = 100.0) -> np.ndarray:
    r = s.n_regions
    lat = np.asarray(s.latency, float)
    lmax = lat.max()
    hist = np.zeros((3, s.history.k, r))
    window = list(s.history.window)
    off = s.history.k - len(window)
    for k, (u, q, a) in enumerate(window):
        hist[0, off + k] = u
        hist[1, off + k] = q / q_max
        hist[2, off + k] = a / q_max
    return np.concatenate([
        s.utilization,
        s.queues / q_max,
        (lat / lmax if lmax > 0 else lat).ravel(),
        hist.ravel(),
        s.history.time_encoding if window else np.zeros(2),
        s.forecast / q_max,
        np.asarray(s.prev_action, float).ravel(),
    ])


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class PolicyNet:
    n_regions: int
    weights: list
    biases: list

    @classmethod
    def init(cls, n_regions: int, hidden=(256, 256), seed: int = 0, head_scale: float = 0.01) -> "PolicyNet":
        rng = seeded_rng(seed)
        sizes = (state_dim(n_regions), *hidden, 2 * n_regions * n_regions + 1)
        ws, bs = [], []
        for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fi)
            if k == len(sizes) - 2:
                bound *= head_scale
            ws.append(rng.uniform(-bound, bound, size=(fi, fo)))
            bs.append(np.zeros(fo))
        return cls(n_regions, ws, bs)

    @property
    def n_cells(self) -> int:
        return self.n_regions * self.n_regions

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def forward(self, x):
        """Returns (a, b, value, cache) for a batch of encodings."""
        x = np.atleast_2d(np.asarray(x, float))
        acts = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        n = self.n_cells
        out = acts[-1]
        a = _softplus(out[:, :n]) + 1.0
        b = _softplus(out[:, n:2 * n]) + 1.0
        return a, b, out[:, -1], acts

    def backward(self, acts, g_a, g_b, g_v) -> list:
        n = self.n_cells
        out = acts[-1]
        g = np.concatenate([g_a * _sigmoid(out[:, :n]), g_b * _sigmoid(out[:, n:2 * n]), g_v[:, None]], axis=1)
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = acts[k].T @ g
            gb[k] = g.sum(axis=0)
            if k:
                g = (g @ self.weights[k].T) * (acts[k] > 0)
        return [*gw, *gb]

    def mean_action(self, enc) -> np.ndarray:
        a, b, _, _ = self.forward(enc)
        return mean_from_params(a, b, self.n_regions)[0][0]

    def check(self):
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged("non-finite policy weights")

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.n_regions, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def save(self, path, tp: "TheoryParams | None" = None, epoch: int = 0):
        arrays = {"version": np.array(POLICY_VERSION), "n_regions": np.array(self.n_regions),
                  "epoch": np.array(epoch), "theory": np.array(json.dumps(asdict(tp) if tp else {}))}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        """Returns (net, TheoryParams or None, epoch)."""
        with np.load(Path(path)) as z:
            if int(z["version"]) != POLICY_VERSION:
                raise ValueError(f"unsupported policy checkpoint version {int(z['version'])}")
            n = sum(1 for k in z.files if k.startswith("W"))
            net = cls(int(z["n_regions"]), [z[f"W{k}"] for k in range(n)], [z[f"b{k}"] for k in range(n)])
            theory = json.loads(str(z["theory"]))
            return net, (TheoryParams(**theory) if theory else None), int(z["epoch"])


def mean_from_params(a, b, n_regions: int):
    """Row-normalized Beta means; returns (M, m, row_sums) with M of shape (T, R, R)."""
    m = (a / (a + b)).reshape(-1, n_regions, n_regions)
    s = m.sum(axis=2, keepdims=True)
    return m / s, m, s


def _mean_backward(g_m_rows, m_rows, s_rows, a, b):
    """Chain d/dM through row normalization and a/(a+b) into (d/da, d/db)."""
    big_m = m_rows / s_rows
    g_m = (g_m_rows - (g_m_rows * big_m).sum(axis=2, keepdims=True)) / s_rows
    g_m = g_m.reshape(a.shape)
    ab2 = (a + b) ** 2
    return g_m * b / ab2, -g_m * a / ab2


def beta_log_prob(x, a, b) -> np.ndarray:
    """Sum over cells of the Beta log-density; one value per row."""
    x = np.clip(x, X_CLIP, 1 - X_CLIP)
    return ((a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - betaln(a, b)).sum(axis=-1)


def beta_entropy(a, b) -> np.ndarray:
    return betaln(a, b) - (a - 1) * digamma(a) - (b - 1) * digamma(b) + (a + b - 2) * digamma(a + b)


def sample_action(net: PolicyNet, enc, rng):
    """Draw each cell from its Beta, renormalize rows; log-prob is of the raw draws.

    Returns (allocation, log_prob, raw_draws).
    """
    a, b, _, _ = net.forward(enc)
    x = np.clip(rng.beta(a[0], b[0]), X_CLIP, 1 - X_CLIP)
    alloc = normalize_rows(x.reshape(net.n_regions, net.n_regions))
    return alloc, float(beta_log_prob(x, a[0], b[0])), x


def deterministic_action(net: PolicyNet, enc) -> np.ndarray:
    return net.mean_action(enc)


def compute_reward(a, p_star, a_prev, q, w: Weights) -> float:
    """-||A - P*||_F^2 - lambda_smooth*||A - A_prev||_F^2 - lambda_cost*||Q||_1/q_max."""
    a = np.asarray(a, float)
    r_ot = -float(((a - p_star) ** 2).sum())
    r_smooth = -float(((a - a_prev) ** 2).sum())
    r_cost = -float(np.abs(np.asarray(q, float)).sum()) / w.q_max
    return r_ot + w.lambda_smooth * r_smooth + w.lambda_cost * r_cost


@dataclass
class Trajectory:
    enc: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    p_star: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    last_value: float = 0.0

    def __len__(self):
        return len(self.rewards)

    def arrays(self):
        return (np.array(self.enc), np.array(self.raw), np.array(self.log_probs), np.array(self.rewards),
                np.array(self.values), np.array(self.p_star))


def gae(rewards, values, last_value: float, discount: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates and value targets."""
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    adv = np.zeros_like(rewards)
    nxt_v, run = last_value, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + discount * nxt_v - values[t]
        run = delta + discount * lam * run
        adv[t] = run
        nxt_v = values[t]
    return adv, adv + values


def ppo_loss_and_grads(net: PolicyNet, enc, raw, old_log_probs, advantages, returns, clip_eps: float = 0.2,
                       value_coef: float = 0.5, entropy_coef: float = 1e-3):
    """Clipped surrogate + value error - entropy bonus; returns (loss, grads, info)."""
    enc = np.atleast_2d(enc)
    t = enc.shape[0]
    a, b, v, acts = net.forward(enc)
    lp = beta_log_prob(raw, a, b)
    ratio = np.exp(lp - old_log_probs)
    s1 = ratio * advantages
    s2 = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantages
    obj = np.minimum(s1, s2)
    ent = beta_entropy(a, b).sum(axis=1)
    loss = -obj.mean() + value_coef * ((v - returns) ** 2).mean() - entropy_coef * ent.mean()
    g_lp = np.where(s1 <= s2, -advantages * ratio, 0.0) / t
    x = np.clip(raw, X_CLIP, 1 - X_CLIP)
    psi_ab = digamma(a + b)
    g_a = g_lp[:, None] * (np.log(x) - digamma(a) + psi_ab)
    g_b = g_lp[:, None] * (np.log1p(-x) - digamma(b) + psi_ab)
    tri_ab = polygamma(1, a + b)
    g_a += (entropy_coef / t) * ((a - 1) * polygamma(1, a) - (a + b - 2) * tri_ab)
    g_b += (entropy_coef / t) * ((b - 1) * polygamma(1, b) - (a + b - 2) * tri_ab)
    g_v = 2 * value_coef * (v - returns) / t
    info = {"clip_frac": float(np.mean(np.abs(ratio - 1) > clip_eps)), "entropy": float(ent.mean())}
    return float(loss), (a, b, acts, g_a, g_b, g_v), info


def ppo_loss(traj: Trajectory, net: PolicyNet, old_log_probs, clip_eps: float = 0.2, gae_lambda: float = 0.95,
             discount: float = 0.99, value_coef: float = 0.5, entropy_coef: float = 1e-3) -> float:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    enc, raw, _, rew, val, _ = traj.arrays()
    adv, ret = gae(rew, val, traj.last_value, discount, gae_lambda)
    return ppo_loss_and_grads(net, enc, raw, np.asarray(old_log_probs, float), adv, ret, clip_eps,
                              value_coef, entropy_coef)[0]


@dataclass
class TheoryParams:
    k0: float = 0.0
    l_r: float = 0.0
    l_p: float = 0.0
    s_current: float = 1.0
    eps_current: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    eps_target: float = 0.15
    s_target: float = 2.5
    eps0: float = 0.1
    s0: float = 1.0
    gamma0: float = 1.0
    delta0: float = 1.0
    alpha_gamma: float = 2.0
    alpha_delta: float = 1.0
    escalation: float = 1.0
    weight_cap: float = 100.0

    @classmethod
    def from_training(cls, tr: dict, **kw) -> "TheoryParams":
        return cls(eps_target=tr["eps_target"], s_target=tr["s_target"], eps0=tr["eps0"], s0=tr["s0"],
                   gamma0=tr["gamma0"], delta0=tr["delta0"], gamma=tr["gamma0"], delta=tr["delta0"],
                   alpha_gamma=tr["alpha_gamma"], alpha_delta=tr["alpha_delta"], weight_cap=tr["weight_cap"], **kw)


def constraint_losses(mean_dev: float, tp: TheoryParams) -> tuple[float, float]:
    l_eps = max(0.0, (mean_dev - tp.eps_target) / tp.eps0)
    l_s = max(0.0, (tp.s_target - tp.s_current) / tp.s0)
    return l_eps, l_s


def total_loss(ppo: float, l_eps: float, l_s: float, tp: TheoryParams) -> float:
    return ppo + tp.gamma * l_eps + tp.delta * l_s


def adapt_constraint_weights(tp: TheoryParams, mean_dev: float, s_current: float,
                             condition_ok: bool | None = None) -> TheoryParams:
    """gamma = gamma0*exp(alpha_gamma*max(0, dev - eps_target)), delta likewise on s.

    A violated advantage condition multiplies both by 1.5 (cumulative, capped
    at ``weight_cap``).
    """
    esc = tp.escalation
    if condition_ok is False:
        esc = min(esc * 1.5, tp.weight_cap)
    g = tp.gamma0 * math.exp(tp.alpha_gamma * max(0.0, mean_dev - tp.eps_target)) * esc
    d = tp.delta0 * math.exp(tp.alpha_delta * max(0.0, tp.s_target - s_current)) * esc
    return replace(tp, gamma=min(g, tp.weight_cap), delta=min(d, tp.weight_cap), escalation=esc,
                   eps_current=mean_dev, s_current=s_current)


def estimate_k0(baseline_switch_costs, window: int = 100) -> float:
    x = np.asarray(baseline_switch_costs, float)
    if x.size < 10:
        raise ValueError(f"need at least 10 switching-cost samples, got {x.size}")
    return float(x[-window:].mean())


def windowed_means(series, window: int = 100) -> np.ndarray:
    x = np.asarray(series, float)
    n = x.size // window
    return x[:n * window].reshape(n, window).mean(axis=1)


def running_means(series, window: int = 100) -> np.ndarray:
    """Cumulative mean of ``series`` sampled at every multiple of ``window``."""
    x = np.asarray(series, float)
    n = x.size // window
    return np.cumsum(x[:n * window])[window - 1::window] / (window * np.arange(1, n + 1))


def switching_stabilized(series, window: int = 100, tol: float = 0.05) -> tuple[bool, float]:
    """Does the running mean, read every ``window`` slots, move by at most ``tol`` (relative)
    over its last window? Returns (ok, final running mean)."""
    means = running_means(series, window)
    if means.size < 2:
        raise ValueError(f"need at least two windows of {window} slots, got {np.asarray(series).size} slots")
    last, prev = float(means[-1]), float(means[-2])
    if last == prev:
        return True, last
    return abs(last - prev) <= tol * max(abs(last), abs(prev)), last


def _row_zero_probe(r: int, rng) -> np.ndarray:
    d = rng.normal(size=(r, r))
    return d - d.mean(axis=1, keepdims=True)


def estimate_lipschitz(sim_handle, base_action, n_probes: int = 8, probe_scale: float = 0.05, rng=None):
    """Finite-difference Lipschitz estimates (L_R, L_P) around ``base_action``.

    ``sim_handle(A)`` returns (response_time, power_cost). Probes are random
    row-preserving perturbations of Frobenius size ``probe_scale``, clipped to
    keep A valid; a final probe follows the least-squares gradient fitted to
    the random ones, so linear costs are bounded exactly.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    rng = rng if rng is not None else seeded_rng(0)
    base = np.asarray(base_action, float)
    r = base.shape[0]
    f0 = np.asarray(sim_handle(base), float)
    deltas, diffs = [], []

    def probe(d):
        d = d / np.linalg.norm(d) * probe_scale
        a = normalize_rows(np.clip(base + d, 0.0, None))
        da = a - base
        nrm = np.linalg.norm(da)
        if nrm < 1e-12:
            return
        deltas.append(da.ravel())
        diffs.append(np.asarray(sim_handle(a), float) - f0)

    for _ in range(n_probes):
        probe(_row_zero_probe(r, rng))
    if not deltas:
        return 0.0, 0.0
    dm = np.array(deltas)
    fm = np.array(diffs)
    for col in range(fm.shape[1]):
        g = np.linalg.lstsq(dm, fm[:, col], rcond=None)[0].reshape(r, r)
        g = g - g.mean(axis=1, keepdims=True)
        if np.linalg.norm(g) > 1e-12:
            probe(g)
    dm = np.array(deltas)
    fm = np.array(diffs)
    ratios = np.abs(fm) / np.linalg.norm(dm, axis=1, keepdims=True)
    return float(ratios[:, 0].max()), float(ratios[:, 1].max())


class FixedAllocation(Scheduler):
    name = "fixed"

    def __init__(self, alloc):
        self.alloc = np.asarray(alloc, float)

    def macro_allocate(self, state, tasks, ctx):
        return self.alloc


def engine_probe(engine: Engine):
    """sim_handle evaluating one slot of ``engine`` (deep-copied) under a fixed allocation."""
    sched = engine.scheduler
    engine.scheduler = None
    try:
        frozen = copy.deepcopy(engine)
    finally:
        engine.scheduler = sched

    def run(alloc):
        e = copy.deepcopy(frozen)
        e.scheduler = FixedAllocation(alloc)
        rep = e.step()
        return rep.response_sum, rep.power_cost

    return run


def advantage_condition_sides(tp: TheoryParams, w: Weights) -> tuple[float, float]:
    if tp.s_current <= 0 or tp.eps_current <= 0:
        raise ValueError("s_current and eps_current must be positive")
    lhs = (1 - 1 / tp.s_current) / tp.eps_current
    denom = w.alpha * tp.k0
    rhs = (tp.l_r + w.beta * tp.l_p) / denom if denom > 0 else math.inf
    return lhs, rhs


def check_advantage_condition(tp: TheoryParams, w: Weights) -> bool:
    """(1 - 1/s)/eps > (L_R + beta*L_P)/(alpha*K0)."""
    lhs, rhs = advantage_condition_sides(tp, w)
    return lhs > rhs


def check_advantage_condition_no_alpha(tp: TheoryParams, w: Weights) -> bool:
    """Variant with K0 alone in the denominator; logged next to the main form."""
    lhs, _ = advantage_condition_sides(tp, w)
    rhs = (tp.l_r + w.beta * tp.l_p) / tp.k0 if tp.k0 > 0 else math.inf
    return lhs > rhs


def constraint_terms(net: PolicyNet, enc, p_star, tp: TheoryParams, with_grads: bool = True):
    """Hinge losses evaluated on the deterministic mean actions of a batch.

    Returns (l_eps, l_s, mean_dev, mean_switch, grads or None), where grads are
    for gamma*L_eps + delta*L_s.
    """
    r = net.n_regions
    a, b, _, acts = net.forward(enc)
    mm, m, s = mean_from_params(a, b, r)
    p = np.asarray(p_star, float).reshape(-1, r, r)
    diff = mm - p
    dev = np.sqrt((diff ** 2).sum(axis=(1, 2)))
    mean_dev = float(dev.mean())
    t = len(dev)
    step = mm[1:] - mm[:-1]
    sw = (step ** 2).sum(axis=(1, 2))
    mean_sw = float(sw.mean()) if t > 1 else 0.0
    s_batch = tp.k0 / mean_sw if mean_sw > 0 else math.inf
    l_eps = max(0.0, (mean_dev - tp.eps_target) / tp.eps0)
    l_s = max(0.0, (tp.s_target - s_batch) / tp.s0)
    if not with_grads:
        return l_eps, l_s, mean_dev, mean_sw, None
    g_mm = np.zeros_like(mm)
    if l_eps > 0:
        g_mm += tp.gamma / (tp.eps0 * t) * diff / np.maximum(dev, 1e-12)[:, None, None]
    if l_s > 0 and t > 1:
        coef = tp.delta / tp.s0 * tp.k0 / mean_sw ** 2 * 2.0 / (t - 1)
        g_mm[1:] += coef * step
        g_mm[:-1] -= coef * step
    g_a, g_b = _mean_backward(g_mm, m, s, a, b)
    grads = net.backward(acts, g_a, g_b, np.zeros(a.shape[0]))
    return l_eps, l_s, mean_dev, mean_sw, grads


class TortaScheduler(Scheduler):
    """Predictor forecast + policy allocation; deterministic mean action unless ``explore``."""

    name = "torta"

    def __init__(self, net: PolicyNet, predictor: PredictorModel | None = None, w: Weights | None = None,
                 explore: bool = False, seed: int = 0):
        self.net = net
        self.predictor = predictor
        self.w = w or Weights()
        self.explore = explore
        self.rng = seeded_rng(seed)
        self.traj = None
        self.forecasts = []

    def reset(self, engine):
        self.q_max = engine.w.q_max
        self.w = engine.w
        self.model = self.predictor.copy() if self.predictor is not None else None
        self.forecasts = []

    def forecast(self, state, ctx):
        if self.model is None or not state.history.warmed or self.model.scale_ema <= 0:
            f = fallback_forecast(state.history)
        else:
            f = predict(self.model, build_features(state.history))
        self.forecasts.append(f)
        return f

    def macro_allocate(self, state, tasks, ctx):
        enc = encode_state(state, self.q_max)
        if not self.explore:
            return self.net.mean_action(enc)
        alloc, lp, raw = sample_action(self.net, enc, self.rng)
        if self.traj is not None:
            _, _, v, _ = self.net.forward(enc)
            self.traj.enc.append(enc)
            self.traj.raw.append(raw)
            self.traj.actions.append(alloc)
            self.traj.log_probs.append(lp)
            self.traj.values.append(float(v[0]))
            self.traj.p_star.append(ctx.ot_routing.copy())
            self.traj.dev.append(float(np.linalg.norm(alloc - ctx.ot_routing)))
        return alloc

    def observe(self, engine, rep, ctx, alloc):
        if self.model is not None:
            self.model.update_scale(rep.arrivals)
        if self.traj is not None and self.explore:
            a_prev = self.traj.actions[-2] if len(self.traj.actions) > 1 else self._prev
            self.traj.rewards.append(compute_reward(alloc, ctx.ot_routing, a_prev, engine.queues, engine.w))

    def begin(self, engine):
        self.traj = Trajectory()
        self._prev = engine.prev_action.copy()

    def finish(self, engine) -> Trajectory:
        traj = self.traj
        enc = encode_state(engine.state(), self.q_max)
        traj.last_value = float(self.net.forward(enc)[2][0])
        self.traj = None
        return traj


@dataclass
class TrainEnv:
    """Engine factory for training: topology, config, and base seed."""

    topo: object
    cfg: Config
    seed: int = 0

    def make(self, scheduler, seed_offset: int = 0) -> Engine:
        return Engine(self.topo, scheduler, self.cfg, seed=self.seed + seed_offset)


def pretrain_predictor(env: TrainEnv, cfg: Config) -> PredictorModel:
    tr = cfg.training
    eng = env.make(ReactiveOT(), seed_offset=10_000)
    samples = collect_samples(eng, int(tr["history_slots"]))
    return train_predictor(samples, epochs=int(tr["predictor_epochs"]), lr=float(tr["predictor_lr"]), seed=env.seed)


def estimate_baseline_params(env: TrainEnv, cfg: Config, tp: TheoryParams):
    """K0 from a reactive-OT run; L_R, L_P from one-slot probes at the end of that run."""
    tr = cfg.training
    eng = env.make(ReactiveOT(), seed_offset=20_000)
    costs = [eng.step().switching_cost for _ in range(int(tr["k0_slots"]))]
    k0 = estimate_k0(costs[1:])
    l_r, l_p = estimate_lipschitz(engine_probe(eng), eng.prev_action, int(tr["lipschitz_probes"]),
                                  float(tr["probe_scale"]), seeded_rng(env.seed + 3))
    return replace(tp, k0=k0, l_r=l_r, l_p=l_p)


def _clip_grads(grads, max_norm: float):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def train_policy(env: TrainEnv, epochs: int, slots_per_epoch: int, cfg: Config, predictor=None, net=None,
                 tp: TheoryParams | None = None, start_epoch: int = 0, log_path=None, s_update_every: int = 10,
                 max_grad_norm: float = 1.0, progress=None):
    """PPO with adaptive OT-deviation / switching constraints.

    Returns (net, predictor, theory_params, log_rows). ``start_epoch`` only
    offsets the epoch numbers written to the log (resume).
    """
    tr = cfg.training
    w = cfg.weights
    r = env.topo.n_regions
    if predictor is None:
        predictor = pretrain_predictor(env, cfg)
    if tp is None:
        tp = estimate_baseline_params(env, cfg, TheoryParams.from_training(tr))
    if net is None:
        net = PolicyNet.init(r, (int(tr["hidden"]), int(tr["hidden"])), seed=env.seed)
    opt = Adam(net.params(), float(tr["lr"]))
    sched = TortaScheduler(net, predictor, w, explore=True, seed=env.seed + 5)
    eng = env.make(sched, seed_offset=start_epoch)
    log_rows = []
    pending_sw = []
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or start_epoch == 0
        fh = open(log_path, "w" if new else "a", newline="")
        wr = csv.writer(fh, lineterminator="\n")
        if new:
            wr.writerow(LOG_COLUMNS)
    try:
        for ep in range(epochs):
            if eng.slot + slots_per_epoch > cfg.horizon:
                eng = env.make(sched, seed_offset=start_epoch + ep + 1)
            sched.begin(eng)
            for _ in range(slots_per_epoch):
                eng.step()
            traj = sched.finish(eng)
            enc, raw, old_lp, rew, val, p_star = traj.arrays()
            mean_reward = float(rew.mean())
            if not math.isfinite(mean_reward):
                raise TrainingDiverged(f"mean reward is {mean_reward} at epoch {start_epoch + ep}")
            adv, ret = gae(rew, val, traj.last_value, float(tr["discount"]), float(tr["gae_lambda"]))
            adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
            for _ in range(int(tr["ppo_iters"])):
                _, (a, b, acts, g_a, g_b, g_v), _ = ppo_loss_and_grads(
                    net, enc, raw, old_lp, adv_n, ret, float(tr["clip_eps"]), float(tr["value_coef"]),
                    float(tr["entropy_coef"]))
                grads = net.backward(acts, g_a, g_b, g_v)
                *_, c_grads = constraint_terms(net, enc, p_star, tp)
                grads = [g + c for g, c in zip(grads, c_grads)]
                opt.step(_clip_grads(grads, max_grad_norm))
            net.check()

            # telemetry on the deterministic mean actions of this epoch's states
            _, _, mean_dev, mean_sw, _ = constraint_terms(net, enc, p_star, tp, with_grads=False)
            pending_sw.append(mean_sw)
            s_cur = tp.s_current
            if ep == 0 or (ep + 1) % s_update_every == 0 or ep == epochs - 1:
                msw = float(np.mean(pending_sw))
                s_cur = tp.k0 / msw if msw > 0 else tp.weight_cap
                pending_sw = []
            probe_tp = replace(tp, eps_current=max(mean_dev, 1e-12), s_current=max(s_cur, 1e-12))
            ok = check_advantage_condition(probe_tp, w)
            tp = adapt_constraint_weights(tp, mean_dev, s_cur, ok)
            l_eps, l_s = constraint_losses(mean_dev, tp)
            row = (start_epoch + ep, mean_reward, l_eps, l_s, tp.s_current, tp.eps_current, int(ok))
            log_rows.append(row)
            if fh is not None:
                wr.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]), repr(row[5]), row[6]])
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    return net, predictor, tp, log_rows
