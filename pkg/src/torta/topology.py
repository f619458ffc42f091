"""Plain-text topology files and the bundled presets.

File layout (``#`` starts a comment, blank lines ignored)::

    name abilene
    [nodes]
    <id> <label> <electricity_price> [operational_cost]
    [links]
    <a> <b> <latency_ms> [bandwidth_cost]
    [latency]            # optional; full R x R matrix instead of [links]
    <row of R numbers>
    [inventory]
    <region> <gpu_kind> <count>

When only links are given, latency and bandwidth cost between every pair of
regions are completed with all-pairs shortest paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .core import GpuKind

PRESETS = ("abilene", "polska", "gabriel", "cost2", "toy4")


class TopologyError(ValueError):
    pass


@dataclass
class Topology:
    name: str
    latency: np.ndarray          # ms, symmetric, zero diagonal
    bandwidth_cost: np.ndarray
    inventory: list              # per region: {GpuKind: count}
    electricity_price: np.ndarray
    operational_cost: np.ndarray
    labels: tuple = ()

    @property
    def n_regions(self) -> int:
        return len(self.electricity_price)

    def validate(self):
        lat = self.latency
        r = self.n_regions
        if lat.shape != (r, r) or self.bandwidth_cost.shape != (r, r):
            raise TopologyError("matrix shapes do not match the node count")
        if not np.allclose(lat, lat.T):
            raise TopologyError("latency matrix is not symmetric")
        if np.any(np.diag(lat) != 0):
            raise TopologyError("latency diagonal must be zero")
        off = lat[~np.eye(r, dtype=bool)]
        if np.any(off <= 0) or not np.all(np.isfinite(off)):
            raise TopologyError("off-diagonal latency must be positive and finite (is the graph connected?)")
        if len(self.inventory) != r:
            raise TopologyError("missing inventory for some regions")
        for k, inv in enumerate(self.inventory):
            if sum(inv.values()) <= 0:
                raise TopologyError(f"region {k} has no servers")


def parse_topology(text: str, source: str = "<string>") -> Topology:
    name = "unnamed"
    section = None
    nodes, links, rows, inv = {}, [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]").strip().lower()
            if section not in ("nodes", "links", "latency", "inventory"):
                raise TopologyError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        parts = line.split()
        try:
            if section is None:
                if parts[0] == "name":
                    name = parts[1]
                continue
            if section == "nodes":
                idx = int(parts[0])
                price = float(parts[2])
                op = float(parts[3]) if len(parts) > 3 else price
                nodes[idx] = (parts[1], price, op)
            elif section == "links":
                bw = float(parts[3]) if len(parts) > 3 else 1.0
                links.append((int(parts[0]), int(parts[1]), float(parts[2]), bw))
            elif section == "latency":
                rows.append([float(p) for p in parts])
            elif section == "inventory":
                inv.append((int(parts[0]), GpuKind[parts[1]], int(parts[2])))
        except (IndexError, ValueError, KeyError) as e:
            raise TopologyError(f"{source}:{lineno}: cannot parse {raw.strip()!r} ({e})") from None
    r = len(nodes)
    if r == 0 or sorted(nodes) != list(range(r)):
        raise TopologyError(f"{source}: nodes must be numbered 0..R-1")
    if rows:
        lat = np.array(rows, float)
        if lat.shape != (r, r):
            raise TopologyError(f"{source}: latency matrix must be {r}x{r}")
        hop = np.where(lat > 0, 1.0, 0.0)
        bw = hop
    elif links:
        lg = np.zeros((r, r))
        bg = np.zeros((r, r))
        for a, b, l, w in links:
            if not (0 <= a < r and 0 <= b < r) or a == b:
                raise TopologyError(f"{source}: bad link {a}-{b}")
            lg[a, b] = lg[b, a] = l
            bg[a, b] = bg[b, a] = w
        lat = shortest_path(lg, directed=False)
        bw = shortest_path(bg, directed=False)
    else:
        if r > 1:
            raise TopologyError(f"{source}: need [links] or [latency]")
        lat = np.zeros((1, 1))
        bw = np.zeros((1, 1))
    inventory = [dict() for _ in range(r)]
    for reg, kind, count in inv:
        if not 0 <= reg < r:
            raise TopologyError(f"{source}: inventory region {reg} out of range")
        inventory[reg][kind] = inventory[reg].get(kind, 0) + count
    topo = Topology(
        name=name,
        latency=lat,
        bandwidth_cost=bw,
        inventory=inventory,
        electricity_price=np.array([nodes[k][1] for k in range(r)]),
        operational_cost=np.array([nodes[k][2] for k in range(r)]),
        labels=tuple(nodes[k][0] for k in range(r)),
    )
    topo.validate()
    return topo


def load_topology(path_or_name) -> Topology:
    """Load a topology file, or a bundled preset by name."""
    s = str(path_or_name)
    if s in PRESETS:
        text = resources.files("torta.data").joinpath(f"{s}.topo").read_text()
        return parse_topology(text, s)
    p = Path(s)
    if not p.exists():
        raise TopologyError(f"topology not found: {s}")
    return parse_topology(p.read_text(), str(p))


def format_topology(topo: Topology, links=None) -> str:
    """Serialize a topology; writes a full latency matrix unless links are given."""
    out = [f"name {topo.name}", "[nodes]"]
    for k in range(topo.n_regions):
        label = topo.labels[k] if topo.labels else f"n{k}"
        out.append(f"{k} {label} {topo.electricity_price[k]:.4f} {topo.operational_cost[k]:.4f}")
    if links:
        out.append("[links]")
        out += [f"{a} {b} {l:.4f} {w:g}" for a, b, l, w in links]
    else:
        out.append("[latency]")
        out += [" ".join(f"{v:.4f}" for v in row) for row in topo.latency]
    out.append("[inventory]")
    for k, inv in enumerate(topo.inventory):
        for kind, count in sorted(inv.items()):
            out.append(f"{k} {GpuKind(kind).name} {count}")
    return "\n".join(out) + "\n"
