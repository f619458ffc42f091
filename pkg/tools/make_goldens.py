"""Regenerate the byte-level golden files under tests/golden/.

Only run this after an intentional change to the simulator's numerics; the
determinism tests compare against these files byte for byte.
"""

import json
import sys
from pathlib import Path

from torta.baselines import make_baseline
from torta.core import Config, seeded_rng
from torta.engine import Engine
from torta.metrics import emit_slot_csv
from torta.topology import load_topology

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"

# (file stem, topology, scheduler, seed, slots)
RUNS = [
    ("rr_toy4_s3_20", "toy4", "rr", 3, 20),
    ("reactive-ot_abilene_s1_20", "abilene", "reactive-ot", 1, 20),
]


def golden_run(topo_name, sched, seed, slots, path):
    cfg = Config(topology=topo_name)
    eng = Engine(load_topology(topo_name), make_baseline(sched, cfg), cfg, seed=seed)
    return emit_slot_csv(eng.run(slots), path)


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for stem, topo, sched, seed, slots in RUNS:
        p = golden_run(topo, sched, seed, slots, GOLDEN / f"{stem}.csv")
        print("wrote", p)
    draws = [float(x).hex() for x in seeded_rng(42).random(3)]
    (GOLDEN / "rng_seed42.json").write_text(json.dumps({"seed": 42, "first3_hex": draws}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
