"""Solve one macro routing problem on the Abilene preset and print the plan.

    python3 demos/ot_routing.py
"""
import numpy as np

from torta.baselines import make_baseline
from torta.core import Config
from torta.engine import Engine
from torta.topology import load_topology
from torta.transport import normalize_distributions, plan_to_routing, solve_ot

topo = load_topology("abilene")
eng = Engine(topo, make_baseline("rr"), Config(), seed=0)
caps = np.array([sum(s.spec.compute_capacity for s in reg.servers) for reg in eng.regions])
demand = np.random.default_rng(0).poisson(20, size=topo.n_regions).astype(float)

m = normalize_distributions(demand, caps)
sol = solve_ot(m, eng.cost)

np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(f"regions: {', '.join(topo.labels)}")
print(f"demand share   {m.mu}")
print(f"capacity share {m.nu}")
print(f"transport cost {sol.objective:.4f}")
print("routing (row i = where region i's requests go):")
print(plan_to_routing(sol))
