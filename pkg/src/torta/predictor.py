"""Next-slot demand forecaster: a 15R -> 512 -> 256 -> R ReLU network with a
softmax head scaled by an EMA of total arrivals.

The network only predicts how demand splits across regions; the volume comes
from ``scale_ema``. Gradients are written out by hand so the training loss
can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import HISTORY_K, HistoryFeatures, seeded_rng

MODEL_VERSION = 1
EMA_HALF_LIFE = 20
EMA_DECAY = 0.5 ** (1.0 / EMA_HALF_LIFE)
HIDDEN = (512, 256)


class ColdStart(RuntimeError):
    """History window not yet filled; callers fall back to the last arrivals."""


class ModelCorrupt(RuntimeError):
    pass


@dataclass
class TrainSample:
    features: np.ndarray
    target: np.ndarray
    scale: float = 0.0     # scale_ema in force when the prediction would be made

    def __post_init__(self):
        self.features = np.asarray(self.features, float)
        self.target = np.asarray(self.target, float)
        if self.features.shape != (15 * len(self.target),):
            raise ValueError(f"feature length {self.features.size} != 15R for R={len(self.target)}")
        if np.any(self.target < 0):
            raise ValueError("targets must be non-negative")


@dataclass
class PredictorModel:
    n_regions: int
    weights: list
    biases: list
    scale_ema: float = 0.0
    feat_mean: np.ndarray = None
    feat_std: np.ndarray = None
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        d = 15 * self.n_regions
        if self.feat_mean is None:
            self.feat_mean = np.zeros(d)
        if self.feat_std is None:
            self.feat_std = np.ones(d)

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def check(self):
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise ModelCorrupt("non-finite predictor weights")

    def update_scale(self, total_arrivals: float):
        self.scale_ema = EMA_DECAY * self.scale_ema + (1 - EMA_DECAY) * float(total_arrivals)

    def copy(self) -> "PredictorModel":
        return PredictorModel(self.n_regions, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.scale_ema, self.feat_mean.copy(), self.feat_std.copy(), list(self.loss_history))

    def save(self, path):
        arrays = {"version": np.array(MODEL_VERSION), "n_regions": np.array(self.n_regions),
                  "scale_ema": np.array(self.scale_ema), "feat_mean": self.feat_mean, "feat_std": self.feat_std}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "PredictorModel":
        with np.load(Path(path)) as z:
            if int(z["version"]) != MODEL_VERSION:
                raise ModelCorrupt(f"unsupported predictor checkpoint version {int(z['version'])}")
            n = sum(1 for k in z.files if k.startswith("W"))
            return cls(int(z["n_regions"]), [z[f"W{k}"] for k in range(n)], [z[f"b{k}"] for k in range(n)],
                       float(z["scale_ema"]), z["feat_mean"], z["feat_std"])


def init_predictor(n_regions: int, seed: int = 0, hidden=HIDDEN, zero: bool = False) -> PredictorModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, or all zeros."""
    rng = seeded_rng(seed)
    sizes = (15 * n_regions, *hidden, n_regions)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        if zero:
            ws.append(np.zeros((fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        else:
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
    return PredictorModel(n_regions, ws, bs)


def build_features(history: HistoryFeatures) -> np.ndarray:
    """[U_{t-5..t-1} | Q_{t-5..t-1} | arrivals_{t-5..t-1}], oldest slot first, region-major."""
    if not history.warmed:
        raise ColdStart(f"history has {len(history.window)} of {history.k} slots")
    u = [w[0] for w in history.window]
    q = [w[1] for w in history.window]
    a = [w[2] for w in history.window]
    return np.concatenate([*u, *q, *a]).astype(float)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: PredictorModel, x: np.ndarray):
    h = (x - model.feat_mean) / model.feat_std
    acts = [h]
    n = len(model.weights)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def predict_distribution(model: PredictorModel, features) -> np.ndarray:
    model.check()
    x = np.asarray(features, float)
    if x.shape[-1] != 15 * model.n_regions:
        raise ValueError(f"expected {15 * model.n_regions} features, got {x.shape[-1]}")
    return softmax(_forward(model, x)[-1])


def predict(model: PredictorModel, features) -> np.ndarray:
    """F_t = softmax(net(features)) * scale_ema."""
    return predict_distribution(model, features) * model.scale_ema


def loss_and_grads(model: PredictorModel, x, y, scale, l2: float = 1e-4):
    """(1/N) sum ||scale*softmax(net(x)) - y||^2 + l2*||theta||^2 and its gradients."""
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    s = np.asarray(scale, float).reshape(-1, 1)
    n = x.shape[0]
    acts = _forward(model, x)
    p = softmax(acts[-1])
    err = s * p - y
    loss = float((err * err).sum() / n) + l2 * sum(float((q * q).sum()) for q in model.params())
    g_p = 2.0 * s * err / n
    g = p * (g_p - (p * g_p).sum(axis=1, keepdims=True))
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ g + 2 * l2 * model.weights[k]
        gb[k] = g.sum(axis=0) + 2 * l2 * model.biases[k]
        if k:
            g = (g @ model.weights[k].T) * (acts[k] > 0)
    return loss, gw, gb


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stack(samples):
    x = np.stack([s.features for s in samples])
    y = np.stack([s.target for s in samples])
    sc = np.array([s.scale if s.scale > 0 else s.target.sum() for s in samples])
    return x, y, sc


def train_predictor(samples, epochs: int = 60, lr: float = 1e-3, seed: int = 0, batch: int = 64,
                    l2: float = 1e-4, hidden=HIDDEN, model: PredictorModel | None = None) -> PredictorModel:
    """Mini-batch Adam; ``model.loss_history`` holds the full-set loss before training and after each epoch.

    Plain gradient descent is badly conditioned here because the loss is in
    squared task counts, so its scale moves with the traffic volume.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    r = len(samples[0].target)
    x, y, sc = _stack(samples)
    if model is None:
        model = init_predictor(r, seed, hidden)
        model.feat_mean = x.mean(axis=0)
        model.feat_std = np.maximum(x.std(axis=0), 1e-3)
    rng = seeded_rng(seed + 1)
    opt = Adam(model.params(), lr)
    n = len(samples)
    hist = [loss_and_grads(model, x, y, sc, l2)[0]]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, gw, gb = loss_and_grads(model, x[idx], y[idx], sc[idx], l2)
            opt.step([*gw, *gb])
        loss = loss_and_grads(model, x, y, sc, l2)[0]
        if not math.isfinite(loss):
            raise ModelCorrupt("predictor training diverged")
        hist.append(loss)
    model.loss_history = hist
    model.scale_ema = float(samples[-1].scale if samples[-1].scale > 0 else y.sum(axis=1).mean())
    return model


def collect_samples(engine, n_slots: int) -> list:
    """Run ``engine`` for n_slots and record (features, next arrivals, scale_ema) pairs."""
    samples = []
    scale = 0.0
    for _ in range(n_slots):
        feats = build_features(engine.history) if engine.history.warmed else None
        rep = engine.step()
        counts = engine.history.window[-1][2]
        if feats is not None and scale > 0:
            samples.append(TrainSample(feats, counts, scale))
        scale = rep.arrivals if scale == 0 else EMA_DECAY * scale + (1 - EMA_DECAY) * rep.arrivals
    return samples


def fallback_forecast(history: HistoryFeatures) -> np.ndarray:
    """Last observed arrivals, used while the window is cold."""
    if not history.window:
        return np.zeros(history.n_regions)
    return history.window[-1][2].copy()


__all__ = ["ColdStart", "ModelCorrupt", "TrainSample", "PredictorModel", "init_predictor", "build_features",
           "predict", "predict_distribution", "softmax", "loss_and_grads", "train_predictor", "collect_samples",
           "fallback_forecast", "HISTORY_K", "EMA_HALF_LIFE"]
