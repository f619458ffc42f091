"""Regenerate the bundled topology presets under src/torta/data/.

Abilene and Polska use their real node sites and link lists with great-circle
latencies; Gabriel and Cost2 are seeded random geometric graphs with the same
node counts. Every preset is rescaled so the largest shortest-path latency
equals the topology's latency scale.
"""

import math
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from torta.core import GpuKind
from torta.topology import Topology, format_topology, parse_topology

OUT = Path(__file__).resolve().parents[1] / "src" / "torta" / "data"

ABILENE = {
    "sites": [("ATLAM5", 33.75, -84.39), ("ATLAng", 33.76, -84.42), ("CHINng", 41.88, -87.63),
              ("DNVRng", 39.74, -104.99), ("HSTNng", 29.76, -95.37), ("IPLSng", 39.77, -86.16),
              ("KSCYng", 39.10, -94.58), ("LOSAng", 34.05, -118.24), ("NYCMng", 40.71, -74.01),
              ("SNVAng", 37.37, -122.04), ("STTLng", 47.61, -122.33), ("WASHng", 38.91, -77.04)],
    "links": [("ATLAM5", "ATLAng"), ("ATLAng", "HSTNng"), ("ATLAng", "IPLSng"), ("ATLAng", "WASHng"),
              ("CHINng", "IPLSng"), ("CHINng", "NYCMng"), ("DNVRng", "KSCYng"), ("DNVRng", "SNVAng"),
              ("DNVRng", "STTLng"), ("HSTNng", "KSCYng"), ("HSTNng", "LOSAng"), ("IPLSng", "KSCYng"),
              ("LOSAng", "SNVAng"), ("NYCMng", "WASHng"), ("SNVAng", "STTLng")],
    "scale": 25.0,
}

POLSKA = {
    "sites": [("Gdansk", 54.35, 18.65), ("Bydgoszcz", 53.12, 18.01), ("Kolobrzeg", 54.18, 15.58),
              ("Katowice", 50.26, 19.02), ("Krakow", 50.06, 19.94), ("Bialystok", 53.13, 23.16),
              ("Lodz", 51.76, 19.46), ("Poznan", 52.41, 16.93), ("Rzeszow", 50.04, 22.00),
              ("Szczecin", 53.43, 14.55), ("Warsaw", 52.23, 21.01), ("Wroclaw", 51.11, 17.03)],
    "links": [("Gdansk", "Warsaw"), ("Gdansk", "Kolobrzeg"), ("Gdansk", "Bialystok"),
              ("Bydgoszcz", "Kolobrzeg"), ("Bydgoszcz", "Poznan"), ("Bydgoszcz", "Warsaw"),
              ("Kolobrzeg", "Szczecin"), ("Katowice", "Krakow"), ("Katowice", "Lodz"),
              ("Katowice", "Wroclaw"), ("Krakow", "Rzeszow"), ("Krakow", "Warsaw"),
              ("Bialystok", "Rzeszow"), ("Bialystok", "Warsaw"), ("Lodz", "Warsaw"),
              ("Lodz", "Wroclaw"), ("Poznan", "Szczecin"), ("Poznan", "Wroclaw")],
    "scale": 45.0,
}

# Table 1(b) GPU counts per cluster, scaled 1/20 (one simulated server = 20-GPU pod)
POD_RANGES = {GpuKind.A100: (2, 3), GpuKind.H100: (1, 2), GpuKind.RTX4090: (2, 3),
              GpuKind.V100: (3, 4), GpuKind.T4: (2, 3)}


def haversine_km(a, b):
    la1, lo1, la2, lo2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((la2 - la1) / 2) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2
    return 2 * 6371 * math.asin(math.sqrt(h))


def scaled_links(coords, edges, scale):
    r = len(coords)
    raw = [(a, b, max(haversine_km(coords[a], coords[b]), 5.0)) for a, b in edges]
    g = np.zeros((r, r))
    for a, b, d in raw:
        g[a, b] = g[b, a] = d
    diam = shortest_path(g, directed=False).max()
    return [(a, b, d * scale / diam, 1.0) for a, b, d in raw]


def geometric(n, seed, degree=3.5):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n, 2)) * [40.0, 25.0] + [35.0, -10.0]
    d = np.array([[haversine_km(p, q) for q in pts] for p in pts])
    edges = set()
    # nearest-neighbour edges, then a spanning chain guarantees connectivity
    k = int(round(degree / 2))
    for i in range(n):
        for j in np.argsort(d[i])[1:k + 1]:
            edges.add((min(i, j), max(i, j)))
    order = np.argsort(pts[:, 0])
    for a, b in zip(order[:-1], order[1:]):
        edges.add((min(a, b), max(a, b)))
    return [tuple(p) for p in pts], sorted(edges)


def inventory(n, seed):
    rng = np.random.default_rng(seed)
    factor = np.clip(rng.lognormal(0.0, 0.35, size=n), 0.5, 1.8)
    inv = []
    for k in range(n):
        region = {}
        for kind, (lo, hi) in POD_RANGES.items():
            c = int(round(rng.integers(lo, hi + 1) * factor[k]))
            if c > 0:
                region[kind] = c
        if not region:
            region[GpuKind.T4] = 1
        inv.append(region)
    return inv


def build(name, labels, coords, edges, scale, seed):
    n = len(coords)
    rng = np.random.default_rng(seed + 1000)
    price = np.round(rng.uniform(0.06, 0.30, size=n), 4)
    links = scaled_links(coords, edges, scale)
    stub = Topology(name, np.zeros((n, n)), np.zeros((n, n)), inventory(n, seed), price, price, tuple(labels))
    text = format_topology(stub, links=links)
    parse_topology(text, name)
    (OUT / f"{name}.topo").write_text(f"# generated by tools/make_presets.py\n# latency scale {scale:g} ms\n" + text)


def main():
    for name, spec, seed in (("abilene", ABILENE, 11), ("polska", POLSKA, 12)):
        labels = [s[0] for s in spec["sites"]]
        idx = {l: k for k, l in enumerate(labels)}
        coords = [(s[1], s[2]) for s in spec["sites"]]
        edges = [(idx[a], idx[b]) for a, b in spec["links"]]
        build(name, labels, coords, edges, spec["scale"], seed)
    for name, n, scale, seed in (("gabriel", 25, 80.0, 13), ("cost2", 32, 150.0, 14)):
        coords, edges = geometric(n, seed)
        build(name, [f"{name[:3]}{k}" for k in range(n)], coords, edges, scale, seed)
    # four-region full mesh used by training tests; distances are chosen so the
    # transport optimum is unique (a line graph makes many plans tie)
    toy_links = [(0, 1, 3.0, 1.0), (1, 2, 4.0, 1.0), (2, 3, 3.0, 1.0),
                 (0, 2, 6.0, 1.0), (1, 3, 5.0, 1.0), (0, 3, 8.0, 1.0)]
    inv = [{GpuKind.A100: 20, GpuKind.T4: 8} for _ in range(4)]
    price = np.array([0.10, 0.12, 0.14, 0.16])
    stub = Topology("toy4", np.zeros((4, 4)), np.zeros((4, 4)), inv, price, price, ("w", "x", "y", "z"))
    (OUT / "toy4.topo").write_text("# generated by tools/make_presets.py\n" + format_topology(stub, links=toy_links))


if __name__ == "__main__":
    main()
