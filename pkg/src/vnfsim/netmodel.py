"""Substrate network: topology loading, CPU/bandwidth accounting and routing."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import (
    InsufficientResources,
    MalformedSpec,
    NoPath,
    OverRelease,
    UnknownNode,
    UnknownTopology,
)

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


# Edge lists carry the published node/link counts; the actual wiring of the
# real networks is not reproduced here (see README).
_NETRAIL_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 0),
    (0, 3), (1, 5), (2, 6),
]

_BTEUROPE_EDGES = [(i, (i + 1) % 24) for i in range(24)] + [
    (0, 7), (2, 12), (3, 17), (4, 10), (5, 20), (6, 14), (8, 16),
    (9, 21), (11, 19), (13, 22), (15, 1), (18, 23), (20, 12),
]

BUILTIN_TOPOLOGIES = {
    "netrail": (7, _NETRAIL_EDGES),
    "bteurope": (24, _BTEUROPE_EDGES),
}

CAPACITY_PROFILES = {
    "default": {"cpu": 100, "bw": 1000.0, "latency_ms": 2.0},
    "scarce": {"cpu": 40, "bw": 1000.0, "latency_ms": 2.0},
}


@dataclass(slots=True)
class SubstrateNode:
    id: int
    cpu_capacity: int
    cpu_available: int


@dataclass(slots=True)
class SubstrateLink:
    a: int
    b: int
    bw_capacity: float
    bw_available: float
    latency: float

    @property
    def endpoints(self) -> frozenset:
        return frozenset((self.a, self.b))

    def other(self, node: int) -> int:
        return self.b if node == self.a else self.a


@dataclass
class SubstrateNetwork:
    name: str
    nodes: list[SubstrateNode]
    links: list[SubstrateLink]
    adjacency: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    _index: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {n.id: i for i, n in enumerate(self.nodes)}
        self.adjacency = {n.id: [] for n in self.nodes}
        for li, link in enumerate(self.links):
            self.adjacency[link.a].append((link.b, li))
            self.adjacency[link.b].append((link.a, li))
        for nbrs in self.adjacency.values():
            nbrs.sort()

    # -- lookups ---------------------------------------------------------
    def node(self, node_id: int) -> SubstrateNode:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r}") from None

    def node_index(self, node_id: int) -> int:
        return self._index[node_id]

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def total_cpu_capacity(self) -> int:
        return sum(n.cpu_capacity for n in self.nodes)

    @property
    def total_cpu_available(self) -> int:
        return sum(n.cpu_available for n in self.nodes)

    def cpu_fractions(self) -> list[float]:
        return [n.cpu_available / n.cpu_capacity for n in self.nodes]

    # -- state snapshots (used for atomic rollback) ----------------------
    def snapshot(self) -> tuple[tuple[int, ...], tuple[float, ...]]:
        return (
            tuple(n.cpu_available for n in self.nodes),
            tuple(link.bw_available for link in self.links),
        )

    def restore(self, snap) -> None:
        cpu, bw = snap
        for n, c in zip(self.nodes, cpu):
            n.cpu_available = c
        for link, b in zip(self.links, bw):
            link.bw_available = b

    def reset(self) -> None:
        for n in self.nodes:
            n.cpu_available = n.cpu_capacity
        for link in self.links:
            link.bw_available = link.bw_capacity

    def copy(self) -> "SubstrateNetwork":
        return SubstrateNetwork(
            self.name,
            [SubstrateNode(n.id, n.cpu_capacity, n.cpu_available) for n in self.nodes],
            [
                SubstrateLink(l.a, l.b, l.bw_capacity, l.bw_available, l.latency)
                for l in self.links
            ],
        )


# -- loading ---------------------------------------------------------------

def _validate(name: str, nodes: list[SubstrateNode], links: list[SubstrateLink]) -> SubstrateNetwork:
    ids = [n.id for n in nodes]
    if not nodes:
        raise MalformedSpec("topology has no nodes")
    if len(set(ids)) != len(ids):
        raise MalformedSpec("duplicate node ids")
    known = set(ids)
    for n in nodes:
        if n.cpu_capacity < 1:
            raise MalformedSpec(f"node {n.id}: cpu capacity must be >= 1")
    seen = set()
    for link in links:
        if link.a not in known or link.b not in known:
            raise MalformedSpec(f"link {link.a}-{link.b} references an unknown node")
        if link.a == link.b:
            raise MalformedSpec(f"self-loop on node {link.a}")
        if link.bw_capacity <= 0:
            raise MalformedSpec(f"link {link.a}-{link.b}: bandwidth must be positive")
        if link.latency < 0:
            raise MalformedSpec(f"link {link.a}-{link.b}: negative latency")
        if link.endpoints in seen:
            raise MalformedSpec(f"duplicate link {link.a}-{link.b}")
        seen.add(link.endpoints)
    net = SubstrateNetwork(name, nodes, links)
    # connectivity
    start = ids[0]
    stack, reached = [start], {start}
    while stack:
        u = stack.pop()
        for v, _ in net.adjacency[u]:
            if v not in reached:
                reached.add(v)
                stack.append(v)
    if reached != known:
        raise MalformedSpec("topology is not connected")
    return net


def load_topology(spec: str | Mapping[str, Any] | Path, profile: str | Mapping | None = None) -> SubstrateNetwork:
    """Build a validated network.

    ``spec`` is a built-in name ("netrail", "bteurope"), a path to a TOML
    topology file, or a mapping with ``node`` and ``link`` tables. ``profile``
    sets capacities for built-ins (a profile name or a dict with cpu/bw/latency_ms).
    """
    if isinstance(spec, Path) or (isinstance(spec, str) and spec.endswith(".toml")):
        with open(spec, "rb") as fh:
            spec = tomllib.load(fh)
    if isinstance(spec, str):
        key = spec.lower()
        if key not in BUILTIN_TOPOLOGIES:
            raise UnknownTopology(f"unknown topology {spec!r}")
        if profile is None or isinstance(profile, str):
            pname = profile or "default"
            if pname not in CAPACITY_PROFILES:
                raise MalformedSpec(f"unknown capacity profile {pname!r}")
            prof = CAPACITY_PROFILES[pname]
        else:
            prof = {**CAPACITY_PROFILES["default"], **profile}
        n_nodes, edges = BUILTIN_TOPOLOGIES[key]
        nodes = [SubstrateNode(i, int(prof["cpu"]), int(prof["cpu"])) for i in range(n_nodes)]
        links = [
            SubstrateLink(a, b, float(prof["bw"]), float(prof["bw"]), float(prof["latency_ms"]))
            for a, b in edges
        ]
        return _validate(key, nodes, links)
    if not isinstance(spec, Mapping):
        raise MalformedSpec(f"cannot interpret topology spec of type {type(spec).__name__}")
    builtin = spec.get("builtin")
    if builtin is not None:
        return load_topology(str(builtin), spec.get("profile", profile))
    try:
        nodes = []
        for row in spec["node"]:
            cpu = row["cpu"]
            if int(cpu) != cpu:
                raise MalformedSpec(f"node {row.get('id')}: cpu must be an integer")
            nodes.append(SubstrateNode(int(row["id"]), int(cpu), int(cpu)))
        links = [
            SubstrateLink(
                int(row["a"]), int(row["b"]), float(row["bw"]), float(row["bw"]),
                float(row.get("latency_ms", 0.0)),
            )
            for row in spec.get("link", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedSpec(f"bad topology table: {exc}") from None
    return _validate(str(spec.get("name", "custom")), nodes, links)


# -- CPU accounting ------------------------------------------------------------

def allocate_cpu(net: SubstrateNetwork, node_id: int, cores: int) -> SubstrateNetwork:
    if cores < 1:
        raise ValueError("cores must be >= 1")
    node = net.node(node_id)
    if node.cpu_available < cores:
        raise InsufficientResources(
            f"node {node_id}: {cores} cores requested, {node.cpu_available} free"
        )
    node.cpu_available -= cores
    return net


def release_cpu(net: SubstrateNetwork, node_id: int, cores: int) -> SubstrateNetwork:
    node = net.node(node_id)
    if cores == 0:
        return net
    if cores < 0 or node.cpu_available + cores > node.cpu_capacity:
        raise OverRelease(f"node {node_id}: releasing {cores} would exceed capacity")
    node.cpu_available += cores
    return net


def network_availability_index(net: SubstrateNetwork) -> float:
    return net.total_cpu_available / net.total_cpu_capacity


# -- routing --------------------------------------------------------------------

def feasible_path(
    net: SubstrateNetwork, src: int, dst: int, bw_demand: float, latency_budget: float = float("inf")
) -> list[int]:
    """Minimum-latency path over links with enough spare bandwidth.

    Returns link indices in travel order. Equal-latency candidates are
    ordered by their node sequence, lowest first.
    """
    net.node(src)
    net.node(dst)
    if src == dst:
        return []
    heap: list[tuple[float, tuple[int, ...], tuple[int, ...]]] = [(0.0, (src,), ())]
    done: set[int] = set()
    while heap:
        lat, nodes, links = heapq.heappop(heap)
        u = nodes[-1]
        if u in done:
            continue
        done.add(u)
        if u == dst:
            if lat > latency_budget:
                break
            return list(links)
        for v, li in net.adjacency[u]:
            if v in done:
                continue
            link = net.links[li]
            if link.bw_available < bw_demand:
                continue
            heapq.heappush(heap, (lat + link.latency, nodes + (v,), links + (li,)))
    raise NoPath(f"no path {src}->{dst} for bw {bw_demand} within {latency_budget} ms")


def path_latency(net: SubstrateNetwork, path: Sequence[int]) -> float:
    return sum(net.links[li].latency for li in path)


def path_nodes(net: SubstrateNetwork, src: int, path: Sequence[int]) -> list[int]:
    out = [src]
    for li in path:
        out.append(net.links[li].other(out[-1]))
    return out


def reserve_path(net: SubstrateNetwork, path: Sequence[int], bw_demand: float) -> SubstrateNetwork:
    if bw_demand == 0 or not path:
        return net
    for li in path:
        if net.links[li].bw_available < bw_demand:
            # nothing has been touched yet, so there is nothing to roll back
            raise InsufficientResources(f"link {li}: bandwidth {bw_demand} unavailable")
    for li in path:
        net.links[li].bw_available -= bw_demand
    return net


def release_path(net: SubstrateNetwork, path: Sequence[int], bw_demand: float) -> SubstrateNetwork:
    if bw_demand == 0 or not path:
        return net
    for li in path:
        link = net.links[li]
        if link.bw_available + bw_demand > link.bw_capacity + 1e-9:
            raise OverRelease(f"link {li}: releasing {bw_demand} would exceed capacity")
    for li in path:
        link = net.links[li]
        link.bw_available = min(link.bw_capacity, link.bw_available + bw_demand)
    return net
