"""Run metrics, aggregation and CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import Weights
from .engine import objective_total


def load_balance_coefficient(utils):
    """1 / (1 + CV) with the population standard deviation; None when mean is 0."""
    u = np.asarray(utils, dtype=float)
    if u.size == 0:
        raise ValueError("need at least one utilization value")
    m = u.mean()
    if m <= 0:
        return None
    return float(1.0 / (1.0 + u.std() / m))


def prediction_accuracy(pred, actual, eps_small: float = 1e-6) -> float:
    """exp(-mean relative absolute error).

    Accepts 1-D series (one value per slot) or T x R arrays; for the latter the
    ratio is averaged over regions inside each slot, then over slots.
    """
    p = np.asarray(pred, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("need at least one slot")
    ratio = np.abs(p - a) / (a + eps_small)
    if ratio.ndim == 2:
        ratio = ratio.mean(axis=1)
    return float(math.exp(-ratio.mean()))


def response_breakdown(reports) -> tuple[float, float, float]:
    """Mean (wait, compute, network) seconds over completed tasks."""
    w = np.concatenate([r.wait_s for r in reports]) if reports else np.zeros(0)
    c = np.concatenate([r.compute_s for r in reports]) if reports else np.zeros(0)
    n = np.concatenate([r.network_s for r in reports]) if reports else np.zeros(0)
    if w.size == 0:
        return 0.0, 0.0, 0.0
    return float(w.mean()), float(c.mean()), float(n.mean())


@dataclass
class RunSummary:
    slots: int = 0
    arrivals: int = 0
    completions: int = 0
    drops: int = 0
    mean_rt: float = 0.0
    mean_wait: float = 0.0
    mean_compute: float = 0.0
    mean_network: float = 0.0
    response_total: float = 0.0
    lb_mean: float | None = None
    power_total: float = 0.0
    switch_total: float = 0.0
    objective: float = 0.0
    drop_rate: float = 0.0
    pa: float | None = None


def aggregate_run(reports, w: Weights, pa: float | None = None) -> RunSummary:
    if not reports:
        return RunSummary(pa=pa)
    wait, comp, net = response_breakdown(reports)
    lbs = [r.lb_coefficient for r in reports if r.lb_coefficient is not None]
    arrivals = sum(r.arrivals for r in reports)
    drops = sum(r.drops for r in reports)
    completions = sum(r.completions for r in reports)
    resp = float(sum(r.response_sum for r in reports))
    return RunSummary(
        slots=len(reports),
        arrivals=arrivals,
        completions=completions,
        drops=drops,
        mean_rt=resp / completions if completions else 0.0,
        mean_wait=wait,
        mean_compute=comp,
        mean_network=net,
        response_total=resp,
        lb_mean=float(np.mean(lbs)) if lbs else None,
        power_total=float(sum(r.power_cost for r in reports)),
        switch_total=float(sum(r.switching_cost for r in reports)),
        objective=objective_total(reports, w),
        drop_rate=drops / arrivals if arrivals else 0.0,
        pa=pa,
    )


SLOT_COLUMNS = ("slot", "arrivals", "completions", "drops", "carryover", "mean_wait_s", "mean_compute_s",
                "mean_network_s", "response_sum_s", "power_cost", "switching_cost", "lb_coefficient",
                "active_servers", "queue_total", "ot_objective", "ot_deviation")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def slot_rows(reports):
    for r in reports:
        n = r.completions
        yield (r.slot, r.arrivals, r.completions, r.drops, r.carryover,
               float(r.wait_s.mean()) if n else 0.0, float(r.compute_s.mean()) if n else 0.0,
               float(r.network_s.mean()) if n else 0.0, r.response_sum, r.power_cost, r.switching_cost,
               r.lb_coefficient, r.active_servers, r.queue_total, r.ot_objective, r.ot_deviation)


def emit_csv(rows, path, columns=SLOT_COLUMNS) -> Path:
    """Write rows with a header line, LF newlines and '.' decimals (repr floats)."""
    path = Path(path)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for row in rows:
        wr.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    path.write_bytes(buf.getvalue().encode("ascii"))
    return path


def emit_slot_csv(reports, path) -> Path:
    return emit_csv(slot_rows(reports), path)


def emit_summary_json(summary: RunSummary | dict, path) -> Path:
    path = Path(path)
    data = asdict(summary) if isinstance(summary, RunSummary) else summary
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def emit_task_trace(reports, path) -> Path:
    """Per-completed-task (slot, wait, compute, network) dump; large for long runs."""
    rows = ((r.slot, w, c, n) for r in reports for w, c, n in zip(r.wait_s, r.compute_s, r.network_s))
    return emit_csv(rows, path, columns=("slot", "wait_s", "compute_s", "network_s"))


COMPARE_METRICS = ("mean_rt", "lb_mean", "power_total", "switch_total", "objective", "drop_rate")


def compare_table(results: dict) -> list[dict]:
    """``results`` maps scheduler -> list of RunSummary; one row per scheduler (sorted)."""
    table = []
    for name in sorted(results):
        row = {"scheduler": name, "runs": len(results[name])}
        for m in COMPARE_METRICS:
            vals = np.array([getattr(s, m) if getattr(s, m) is not None else np.nan for s in results[name]])
            row[f"{m}_mean"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else None
            row[f"{m}_std"] = float(np.nanstd(vals)) if np.isfinite(vals).any() else None
        table.append(row)
    return table
