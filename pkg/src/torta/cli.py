"""Command-line experiment runner.

Subcommands: simulate, train, train-predictor, compare, check-theory.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand writes its artifacts under ``--out`` (or ``--out-model``)
together with ``manifest.json`` listing each file and its sha256.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINES, ReactiveOT, RoundRobin, make_baseline
from .core import Config, ConfigError, config_from_mapping, load_config, seeded_rng
from .engine import Engine
from .metrics import aggregate_run, compare_table, emit_csv, emit_slot_csv, emit_summary_json, prediction_accuracy
from .policy import (
    PolicyNet,
    TheoryParams,
    TortaScheduler,
    TrainEnv,
    advantage_condition_sides,
    check_advantage_condition,
    check_advantage_condition_no_alpha,
    estimate_baseline_params,
    pretrain_predictor,
    switching_stabilized,
    train_policy,
)
from .predictor import PredictorModel
from .topology import TopologyError, load_topology
from .transport import Marginals, minmax_load_check, solve_ot

CONFIG_ENV = "TORTA_CONFIG"
SCHEDULERS = ("torta", *BASELINES)
POLICY_FILE = "policy.npz"
PREDICTOR_FILE = "predictor.npz"


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


# ---------------------------------------------------------------- helpers

def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value
    return out


def resolve_config(args) -> Config:
    overrides = _parse_sets(getattr(args, "set", None))
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        return load_config(path, overrides)
    sections: dict = {}
    for dotted, value in overrides.items():
        sec, _, key = dotted.partition(".")
        sections.setdefault(sec, {})[key] = value
    return config_from_mapping(sections)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: Config, extra: dict | None = None) -> Path:
    """manifest.json: command, package version, resolved config and file hashes (no timestamps)."""
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    data = {
        "command": command,
        "version": __version__,
        "config": dataclasses.asdict(cfg),
        "files": {p.name: _sha256(p) for p in files},
    }
    if extra:
        data.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_models(model_dir) -> tuple[PolicyNet, TheoryParams | None, int, PredictorModel | None]:
    model_dir = Path(model_dir)
    pol = model_dir / POLICY_FILE
    if not pol.exists():
        raise UsageError(f"no {POLICY_FILE} in {model_dir}")
    net, tp, epoch = PolicyNet.load(pol)
    pred_path = model_dir / PREDICTOR_FILE
    pred = PredictorModel.load(pred_path) if pred_path.exists() else None
    return net, tp, epoch, pred


def make_scheduler(name: str, cfg: Config, model_dir=None):
    if name == "torta":
        if model_dir is None:
            raise UsageError("--scheduler torta needs --model-dir with a trained policy (see `torta train`)")
        net, _, _, pred = load_models(model_dir)
        return TortaScheduler(net, pred, cfg.weights)
    return make_baseline(name, cfg)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_once(cfg: Config, topo, name: str, seed: int, slots: int, model_dir=None):
    sched = make_scheduler(name, cfg, model_dir)
    eng = Engine(topo, sched, cfg, seed=seed)
    reports = eng.run(slots)
    pa = None
    if isinstance(sched, TortaScheduler) and len(sched.forecasts) == len(reports):
        # forecasts[t] is made for slot t, before its arrivals are seen
        pa = prediction_accuracy(np.array(sched.forecasts), np.array([r.region_arrivals for r in reports]))
    return reports, aggregate_run(reports, cfg.weights, pa)


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    topo = load_topology(cfg.topology)
    slots = args.slots if args.slots is not None else cfg.horizon
    seed = args.seed if args.seed is not None else cfg.seed
    out = _out_dir(args.out)
    reports, summary = run_once(cfg, topo, args.scheduler, seed, slots, args.model_dir)
    emit_slot_csv(reports, out / "slots.csv")
    emit_summary_json(summary, out / "summary.json")
    write_manifest(out, "simulate", cfg, {"scheduler": args.scheduler, "seed": seed, "slots": slots})
    print(f"{args.scheduler} seed={seed} slots={slots} objective={summary.objective:.6g} "
          f"mean_rt={summary.mean_rt:.4g}s drops={summary.drops}")
    return 0


def cmd_train_predictor(args) -> int:
    cfg = resolve_config(args)
    topo = load_topology(cfg.topology)
    seed = args.seed if args.seed is not None else cfg.seed
    if args.epochs is not None:
        cfg.training["predictor_epochs"] = args.epochs
    out = _out_dir(args.out_model)
    model = pretrain_predictor(TrainEnv(topo, cfg, seed), cfg)
    model.save(out / PREDICTOR_FILE)
    emit_csv(enumerate(model.loss_history), out / "predictor_loss.csv", columns=("epoch", "loss"))
    write_manifest(out, "train-predictor", cfg, {"seed": seed})
    print(f"predictor: loss {model.loss_history[0]:.6g} -> {model.loss_history[-1]:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    topo = load_topology(cfg.topology)
    seed = args.seed if args.seed is not None else cfg.seed
    epochs = args.epochs if args.epochs is not None else int(cfg.training["epochs"])
    spe = args.slots_per_epoch if args.slots_per_epoch is not None else int(cfg.training["slots_per_epoch"])
    if epochs < 1 or spe < 2:
        raise UsageError("need epochs >= 1 and slots-per-epoch >= 2")
    out = _out_dir(args.out_model)
    env = TrainEnv(topo, cfg, seed)
    net = pred = tp = None
    start = 0
    if args.resume:
        net, tp, last, pred = load_models(args.resume)
        if net.n_regions != topo.n_regions:
            raise UsageError(f"checkpoint has {net.n_regions} regions, topology has {topo.n_regions}")
        start = last + 1
    log = out / "train_log.csv"
    if args.resume and Path(args.resume).resolve() != out.resolve():
        old = Path(args.resume) / "train_log.csv"
        if old.exists():
            log.write_bytes(old.read_bytes())

    def progress(row):
        if not args.quiet:
            print(f"epoch {row[0]}: reward {row[1]:.4f} l_eps {row[2]:.4f} l_s {row[3]:.4f} "
                  f"s {row[4]:.4g} eps {row[5]:.4f}", flush=True)

    net, pred, tp, rows = train_policy(env, epochs, spe, cfg, predictor=pred, net=net, tp=tp, start_epoch=start,
                                       log_path=log, progress=progress)
    net.save(out / POLICY_FILE, tp, start + epochs - 1)
    pred.save(out / PREDICTOR_FILE)
    write_manifest(out, "train", cfg, {"seed": seed, "first_epoch": start, "last_epoch": start + epochs - 1})
    return 0


def _compare_cell(job):
    cfg, topo, name, seed, slots, model_dir = job
    return name, seed, run_once(cfg, topo, name, seed, slots, model_dir)[1]


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    topo = load_topology(cfg.topology)
    names = [s.strip() for s in args.schedulers.split(",") if s.strip()]
    bad = [n for n in names if n not in SCHEDULERS]
    if bad or not names:
        raise UsageError(f"unknown scheduler(s) {bad}; choose from {', '.join(SCHEDULERS)}")
    try:
        seeds = sorted({int(s) for s in args.seeds.split(",") if s.strip()})
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    if "torta" in names and args.model_dir is None:
        raise UsageError("torta in --schedulers needs --model-dir")
    slots = args.slots if args.slots is not None else cfg.horizon
    jobs = [(cfg, topo, n, s, slots, args.model_dir) for n in sorted(set(names)) for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            cells = list(pool.map(_compare_cell, jobs))
    else:
        cells = [_compare_cell(j) for j in jobs]
    results: dict = {}
    runs = []
    for name, seed, summ in cells:
        results.setdefault(name, []).append(summ)
        runs.append((name, seed, summ.objective, summ.mean_rt, summ.lb_mean, summ.power_total,
                     summ.switch_total, summ.drop_rate))
    table = compare_table(results)
    out = _out_dir(args.out)
    emit_csv(runs, out / "runs.csv", columns=("scheduler", "seed", "objective", "mean_rt", "lb_mean",
                                              "power_total", "switch_total", "drop_rate"))
    cols = tuple(table[0].keys())
    emit_csv(([row[c] for c in cols] for row in table), out / "compare.csv", columns=cols)
    (out / "compare.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "compare", cfg, {"schedulers": sorted(set(names)), "seeds": seeds, "slots": slots})
    for row in table:
        lb = row["lb_mean_mean"]
        print(f"{row['scheduler']:12s} objective {row['objective_mean']:.6g} +- {row['objective_std']:.3g}  "
              f"mean_rt {row['mean_rt_mean']:.4g}s  lb {'n/a' if lb is None else f'{lb:.3f}'}  "
              f"switch {row['switch_total_mean']:.4g}")
    return 0


def _balanced_instances(n: int, rng, r: int = 3):
    """Random 3-region instances whose cost depends only on the destination."""
    for _ in range(n):
        mu = rng.dirichlet(np.ones(r))
        caps = rng.uniform(50.0, 150.0, size=r)
        nu = caps / caps.sum()
        nu[np.argmax(nu)] += 1.0 - nu.sum()
        c = np.tile(rng.uniform(0.0, 1.0, size=r), (r, 1))
        yield Marginals(mu, nu), c, caps


def theory_report(cfg: Config, topo, seed: int, model_dir=None, instances: int = 50, trials: int = 10_000,
                  slots: int = 1000, window: int = 100) -> dict:
    """Run the desk checks; each entry has status in {pass, fail, skip, not evaluated}."""
    rng = seeded_rng(seed)
    rep: dict = {}

    ok = [minmax_load_check(solve_ot(m, c), caps, trials, rng) for m, c, caps in _balanced_instances(instances, rng)]
    rep["minmax_load"] = {"status": "pass" if all(ok) else "fail", "instances": instances,
                          "trials": trials, "passed": int(sum(ok))}

    r = topo.n_regions
    if r == 1:
        reason = "single region: every allocation is [[1]], switching cost is identically zero"
        rep["switching_stabilizes"] = {"status": "skip", "reason": reason}
        rep["method_independence"] = {"status": "skip", "reason": reason}
        rep["estimates"] = {"status": "skip", "reason": reason}
        rep["advantage_condition"] = {"status": "skip", "reason": reason}
        return rep

    stat = dataclasses.replace(cfg, workload=dataclasses.replace(cfg.workload, stationary=True))
    consts = {}
    for name, sched in (("reactive-ot", ReactiveOT()), ("rr", RoundRobin())):
        # slot 0 switches away from the identity start; keep the `slots` transitions after it
        costs = [rp.switching_cost for rp in Engine(topo, sched, stat, seed=seed).run(slots + 1)][1:]
        consts[name] = switching_stabilized(costs, window)
    ot_ok, k0_ot = consts["reactive-ot"]
    rep["switching_stabilizes"] = {"status": "pass" if ot_ok else "fail", "slots": slots, "window": window,
                                   "k0": k0_ot}
    _, k0_rr = consts["rr"]
    rel = abs(k0_ot - k0_rr) / max(abs(k0_ot), abs(k0_rr), 1e-12)
    rep["method_independence"] = {"status": "pass" if rel <= 0.10 else "fail", "k0_reactive_ot": k0_ot,
                                  "k0_rr": k0_rr, "relative_gap": rel}

    tp = estimate_baseline_params(TrainEnv(topo, cfg, seed), cfg, TheoryParams.from_training(cfg.training))
    rep["estimates"] = {"status": "pass", "k0": tp.k0, "l_r": tp.l_r, "l_p": tp.l_p}

    trained = None
    if model_dir is not None and (Path(model_dir) / POLICY_FILE).exists():
        trained = load_models(model_dir)[1]
    if trained is None:
        rep["advantage_condition"] = {"status": "not evaluated", "reason": "no trained policy checkpoint"}
    else:
        lhs, rhs = advantage_condition_sides(trained, cfg.weights)
        holds = check_advantage_condition(trained, cfg.weights)
        rep["advantage_condition"] = {
            "status": "pass" if holds else "fail", "lhs": lhs, "rhs": rhs,
            "holds_without_alpha": check_advantage_condition_no_alpha(trained, cfg.weights),
            "s_current": trained.s_current, "eps_current": trained.eps_current,
            "k0": trained.k0, "l_r": trained.l_r, "l_p": trained.l_p}
    return rep


def cmd_check_theory(args) -> int:
    cfg = resolve_config(args)
    topo = load_topology(cfg.topology)
    seed = args.seed if args.seed is not None else cfg.seed
    rep = theory_report(cfg, topo, seed, args.model_dir, args.instances, args.trials, args.slots, args.window)
    out = _out_dir(args.out)
    (out / "theory.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "check-theory", cfg, {"seed": seed})
    for name, entry in rep.items():
        detail = entry.get("reason") or ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                                  for k, v in entry.items() if k != "status")
        print(f"{entry['status'].upper():14s} {name}: {detail}")
    if args.strict and any(e["status"] == "fail" for e in rep.values()):
        return 1
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torta", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"torta {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run one scheduler and write slot CSV + summary")
    s.add_argument("--scheduler", choices=SCHEDULERS, default="torta")
    s.add_argument("--model-dir", help="trained checkpoint directory (torta only)")
    s.add_argument("--slots", type=int, help="number of slots (default: run.horizon)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="pretrain predictor, estimate constants, train policy")
    t.add_argument("--out-model", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--slots-per-epoch", type=int)
    t.add_argument("--resume", metavar="DIR", help="continue from a checkpoint directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    tp = sub.add_parser("train-predictor", parents=[common], help="train only the demand forecaster")
    tp.add_argument("--out-model", required=True)
    tp.add_argument("--epochs", type=int)
    tp.set_defaults(func=cmd_train_predictor)

    c = sub.add_parser("compare", parents=[common], help="run every (scheduler, seed) cell and tabulate")
    c.add_argument("--schedulers", default="rr,skylb,sdib,reactive-ot")
    c.add_argument("--seeds", default="1,2,3,4,5")
    c.add_argument("--model-dir")
    c.add_argument("--slots", type=int)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("check-theory", parents=[common], help="desk checks of the scheduling guarantees")
    k.add_argument("--model-dir")
    k.add_argument("--instances", type=int, default=50)
    k.add_argument("--trials", type=int, default=10_000)
    k.add_argument("--slots", type=int, default=1000)
    k.add_argument("--window", type=int, default=100)
    k.add_argument("--strict", action="store_true", help="exit 1 when any check fails")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_check_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, TopologyError, FileNotFoundError) as e:
        print(f"torta {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"torta {args.command}: failed: {e}", file=sys.stderr)
        return 1


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
