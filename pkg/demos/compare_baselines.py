"""Run the four reactive baselines on toy4 for a few seeds and tabulate.

    python3 demos/compare_baselines.py [slots]
"""
import sys

from torta.baselines import make_baseline
from torta.core import Config
from torta.engine import Engine
from torta.metrics import aggregate_run, compare_table
from torta.topology import load_topology

slots = int(sys.argv[1]) if len(sys.argv) > 1 else 120
cfg = Config(topology="toy4")
topo = load_topology("toy4")
runs = {}
for name in ("rr", "skylb", "sdib", "reactive-ot"):
    runs[name] = [aggregate_run(Engine(topo, make_baseline(name, cfg), cfg, seed=s).run(slots), cfg.weights)
                  for s in (1, 2, 3)]

print(f"{'scheduler':12s} {'mean_rt':>9s} {'switching':>10s} {'LB':>7s} {'drops':>7s}")
for row in compare_table(runs):
    print(f"{row['scheduler']:12s} {row['mean_rt_mean']:9.3f} {row['switch_total_mean']:10.2f} "
          f"{row['lb_mean_mean']:7.3f} {row['drop_rate_mean']:7.3%}")
