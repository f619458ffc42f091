"""Train a small TORTA policy on toy4, then compare it with reactive OT.

Takes a couple of minutes on a laptop CPU.

    python3 demos/train_and_evaluate.py [epochs]
"""
import sys

from torta.baselines import make_baseline
from torta.core import Config, WorkloadConfig
from torta.engine import Engine
from torta.metrics import aggregate_run
from torta.policy import TortaScheduler, TrainEnv, train_policy
from torta.topology import load_topology

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
topo = load_topology("toy4")
cfg = Config(topology="toy4")
cfg.workload = WorkloadConfig(stationary=True, rates=(140.0, 100.0, 50.0, 20.0))
cfg.training.update(hidden=64)


def progress(row):
    if row[0] % 10 == 0:
        print(f"epoch {row[0]:3d}  reward {row[1]:8.3f}  ||A-P*|| {row[5]:.3f}  s {row[4]:.2f}")


net, pred, tp, _ = train_policy(TrainEnv(topo, cfg, seed=0), epochs, 48, cfg, progress=progress)
print(f"K0 {tp.k0:.4f}  L_R {tp.l_r:.1f}  L_P {tp.l_p:.2f}")

for name, sched in (("torta", TortaScheduler(net, pred)), ("reactive-ot", make_baseline("reactive-ot", cfg))):
    s = aggregate_run(Engine(topo, sched, cfg, seed=7).run(200), cfg.weights)
    print(f"{name:12s} objective {s.objective:12.1f}  switching {s.switch_total:8.3f}  LB {s.lb_mean:.3f}")
