"""Fail the largest toy4 region for 20 slots and watch drops per slot.

    python3 demos/failure_recovery.py
"""
import numpy as np

from torta.baselines import make_baseline
from torta.core import Config, FailureEvent
from torta.engine import Engine
from torta.topology import load_topology

topo = load_topology("toy4")
cfg = Config(topology="toy4")
ev = FailureEvent(region=0, start_slot=40, duration_slots=20, severity=1.0)
for name in ("reactive-ot", "skylb"):
    reps = Engine(topo, make_baseline(name, cfg), cfg, seed=3, failures=[ev]).run(100)
    drops = np.array([r.drops for r in reps])
    print(f"{name:12s} drops before {drops[:40].sum():4d}  during {drops[40:60].sum():4d}  "
          f"after {drops[60:].sum():4d}")
