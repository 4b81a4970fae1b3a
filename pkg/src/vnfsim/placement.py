"""DDQL node selection with dynamic micro-VNF decomposition and shared-function reuse.

A VNF is placed whole whenever some node can host it. Only when no node
can does it get split into ``granularity_index`` segments, whose shared
head functions (packet reader / header parser) may be served by instances
already catalogued in the :class:`MicroVnfRepository`.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import netmodel
from .errors import BadInput, DimensionMismatch, InsufficientResources, NoPath
from .netmodel import SubstrateNetwork
from .numkernel import Adam, Mlp, ReplayBuffer, soft_update
from .workload import SHARED_TEMPLATE, SfcRequest, VnfSpec


@dataclass
class PlacementConfig:
    gamma: float = 0.95
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 100_000
    lr: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.997
    train_every: int = 8
    beta: float = 0.1  # inter-segment bandwidth as a fraction of the SFC bandwidth
    overhead_cpu: int = 1  # cores added per segment beyond the first
    share_factor: float = 2.0  # a shared instance serves up to this multiple of its cores
    global_reward: float = 5.0
    cpu_scale: float = 20.0
    bw_scale: float = 200.0


# -- decomposition -------------------------------------------------------------

def identify_decomposition_candidate(demand: int, net: SubstrateNetwork, chosen_node: int) -> bool:
    if net.node(chosen_node).cpu_available >= demand:
        return False
    return all(n.cpu_available < demand for n in net.nodes)


def granularity_index(cpu_demand: int, nai: float) -> int:
    if cpu_demand < 1:
        raise BadInput("cpu_demand must be >= 1")
    if not 0.0 <= nai <= 1.0:
        raise BadInput("nai must lie in [0, 1]")
    size = max(1, math.floor(nai * cpu_demand))
    return math.ceil(cpu_demand / size)


@dataclass
class MicroVnf:
    parent_vnf: int
    segment: int
    cpu_demand: int
    shared_kind: str | None = None
    overhead_cpu: int = 0
    reuse_node: int | None = None

    @property
    def cores(self) -> int:
        """Cores a fresh deployment of this segment takes."""
        return self.cpu_demand + self.overhead_cpu


@dataclass
class DecompositionPlan:
    segments: list[MicroVnf]
    inter_segment_bw: float
    reused: list[tuple[str, int]] = field(default_factory=list)


def decompose(vnf: VnfSpec, m: int, cfg: PlacementConfig, sfc_bandwidth: float,
              parent: int = 0, demand: int | None = None) -> DecompositionPlan:
    """Split ``demand`` (default: the VNF's own) into ``m`` near-equal segments."""
    if m < 1:
        raise BadInput("segment count must be >= 1")
    demand = vnf.cpu_demand if demand is None else demand
    m = min(m, demand)
    base, extra = divmod(demand, m)
    sizes = [base + 1] * extra + [base] * (m - extra)
    template = SHARED_TEMPLATE.get(vnf.kind, ()) if m > 1 else ()
    segs = []
    for i, size in enumerate(sizes):
        kind = template[i] if i < len(template) and i < m - 1 else None
        segs.append(MicroVnf(parent, i, size, kind, cfg.overhead_cpu if i > 0 else 0))
    return DecompositionPlan(segs, cfg.beta * sfc_bandwidth if m > 1 else 0.0)


@dataclass
class RepoRow:
    cores: int
    used: int
    refcount: int


class MicroVnfRepository:
    """Catalogue of deployed shared micro-VNFs, keyed by (kind, node)."""

    def __init__(self, share_factor: float = 2.0):
        self.share_factor = share_factor
        self.rows: dict[tuple[str, int], RepoRow] = {}

    def headroom(self, key: tuple[str, int]) -> float:
        row = self.rows[key]
        return self.share_factor * row.cores - row.used

    def find(self, kind: str, demand: int) -> int | None:
        """Node of the row for ``kind`` with the most headroom >= demand (lowest node on ties)."""
        best = None
        for (k, node), _ in sorted(self.rows.items()):
            if k != kind:
                continue
            h = self.headroom((k, node))
            if h >= demand and (best is None or h > best[0]):
                best = (h, node)
        return None if best is None else best[1]

    def acquire(self, kind: str, node: int, demand: int) -> None:
        row = self.rows[(kind, node)]
        row.used += demand
        row.refcount += 1

    def register(self, kind: str, node: int, cores: int, demand: int) -> None:
        row = self.rows.get((kind, node))
        if row is None:
            self.rows[(kind, node)] = RepoRow(cores, demand, 1)
        else:
            row.cores += cores
            row.used += demand
            row.refcount += 1

    def release(self, kind: str, node: int, demand: int) -> int:
        """Drop one reference; returns cores freed (non-zero only when the row empties)."""
        row = self.rows[(kind, node)]
        row.used -= demand
        row.refcount -= 1
        if row.refcount == 0:
            del self.rows[(kind, node)]
            return row.cores
        return 0

    def total_cores(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (_, node), row in self.rows.items():
            out[node] = out.get(node, 0) + row.cores
        return out

    def snapshot(self):
        return copy.deepcopy(self.rows)

    def restore(self, snap) -> None:
        self.rows = copy.deepcopy(snap)

    def reset(self) -> None:
        self.rows = {}


def rearchitect(plan: DecompositionPlan, repo: MicroVnfRepository) -> DecompositionPlan:
    """Point shared segments at existing instances that have headroom for them."""
    for seg in plan.segments:
        if seg.shared_kind is None or seg.reuse_node is not None:
            continue
        node = repo.find(seg.shared_kind, seg.cpu_demand)
        if node is not None:
            repo.acquire(seg.shared_kind, node, seg.cpu_demand)
            seg.reuse_node = node
            plan.reused.append((seg.shared_kind, node))
    return plan


# -- DDQL -------------------------------------------------------------------------

def ddql_target(reward: float, done: bool, q_online_next, q_target_next, gamma: float) -> float:
    qo = np.asarray(q_online_next, dtype=np.float64)
    qt = np.asarray(q_target_next, dtype=np.float64)
    if qo.shape != qt.shape:
        raise DimensionMismatch("online and target Q vectors differ in length")
    if done:
        return float(reward)
    return float(reward + gamma * qt[int(np.argmax(qo))])


def local_reward(placed: bool, node_quality: float, macro: float, micro: float,
                 reliability: float, hd_flag: int, load_now: float, load_weight: float = 0.2) -> float:
    if not placed:
        return -1.0
    load_term = load_now if hd_flag else 1.0 - load_now
    return (
        0.4 * node_quality
        + 0.2 * (macro + micro) / 2.0
        + 0.2 * reliability
        + load_weight * load_term
    )


def global_reward(sfc_fully_placed: bool, value: float = 5.0) -> float:
    return value if sfc_fully_placed else 0.0


class DdqlAgent:
    def __init__(self, state_dim: int, n_nodes: int, cfg: PlacementConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.state_dim = state_dim
        self.n_nodes = n_nodes
        self.q_online = Mlp([state_dim, *cfg.hidden, n_nodes], "relu", "identity", rng)
        self.q_target = self.q_online.copy()
        self.opt = Adam(self.q_online.params(), lr=cfg.lr)
        self.replay = ReplayBuffer(cfg.buffer_capacity)
        self.epsilon = cfg.epsilon_start
        self.decisions = 0
        self.updates = 0

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return self.q_online.forward(state)

    def end_episode(self) -> None:
        self.epsilon = max(self.cfg.epsilon_min, self.epsilon * self.cfg.epsilon_decay)

    def update(self, rng: np.random.Generator) -> float | None:
        if len(self.replay) < self.cfg.batch_size:
            return None
        s, a, r, s2, done = self.replay.sample(rng, self.cfg.batch_size)
        a = a.astype(int)
        n = len(r)
        qo_next = self.q_online.forward(s2)
        qt_next = self.q_target.forward(s2)
        best = qo_next.argmax(axis=1)
        y = r + self.cfg.gamma * (1.0 - done) * qt_next[np.arange(n), best]
        q, cache = self.q_online.forward_cached(s)
        err = q[np.arange(n), a] - y
        up = np.zeros_like(q)
        up[np.arange(n), a] = (2.0 / n) * err
        grads, _ = self.q_online.backward(s, up, cache)
        self.opt.step(grads)
        soft_update(self.q_target, self.q_online, self.cfg.tau)
        self.updates += 1
        return float(np.mean(err * err))


def select_node(agent: DdqlAgent, state: np.ndarray, epsilon: float, rng: np.random.Generator,
                allowed: Sequence[bool] | None = None) -> int:
    """Epsilon-greedy node choice; greedy ties go to the lowest index."""
    if len(state) != agent.state_dim:
        raise DimensionMismatch(f"state has {len(state)} entries, agent expects {agent.state_dim}")
    idx = np.arange(agent.n_nodes) if allowed is None else np.flatnonzero(allowed)
    if rng.random() < epsilon:
        return int(idx[int(rng.integers(0, len(idx)))])
    q = agent.q_values(state)
    return int(idx[int(np.argmax(q[idx]))])


# -- SFC placement --------------------------------------------------------------

@dataclass
class UnitPlacement:
    vnf: int
    segment: int
    node: int
    cores: int  # cores owned privately by this SFC (0 for shared instances)
    demand: int
    shared_kind: str | None = None
    reused: bool = False


@dataclass
class VirtualLink:
    src: int
    dst: int
    links: list[int]
    bw: float
    latency: float


@dataclass
class SfcMapping:
    sfc_id: int
    delay_budget: float
    units: list[UnitPlacement] = field(default_factory=list)
    vlinks: list[VirtualLink] = field(default_factory=list)
    repo_refs: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def latency(self) -> float:
        return sum(v.latency for v in self.vlinks)

    def private_cores(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for u in self.units:
            if u.cores:
                out[u.node] = out.get(u.node, 0) + u.cores
        return out

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PlacementResult:
    placed: bool
    reason: str | None = None  # "resources" (transient) or "infeasible" (terminal)
    mapping: SfcMapping | None = None
    decisions: int = 0
    decomposed: int = 0


@dataclass
class PlacementRequest:
    sfc: SfcRequest
    demands: list[int]  # cores reserved per VNF
    macro: float
    micro: float
    hd_flag: int
    load_now: float
    load_weight: float = 0.2


def placement_state(net: SubstrateNetwork, cores: int, bw: float, req: PlacementRequest,
                    cfg: PlacementConfig) -> np.ndarray:
    head = [min(1.0, cores / cfg.cpu_scale), min(1.0, bw / cfg.bw_scale)]
    tail = [req.macro, req.micro, float(req.hd_flag), req.load_now]
    return np.array(head + net.cpu_fractions() + tail)


def release_mapping(net: SubstrateNetwork, repo: MicroVnfRepository, mapping: SfcMapping) -> None:
    for node, cores in mapping.private_cores().items():
        netmodel.release_cpu(net, node, cores)
    for kind, node, demand in mapping.repo_refs:
        freed = repo.release(kind, node, demand)
        if freed:
            netmodel.release_cpu(net, node, freed)
    for v in mapping.vlinks:
        netmodel.release_path(net, v.links, v.bw)


def structurally_infeasible(req: PlacementRequest, net: SubstrateNetwork) -> bool:
    """True when no state of this network could ever host the request."""
    total = sum(req.demands)
    if total > net.total_cpu_capacity:
        return True
    max_node = max(n.cpu_capacity for n in net.nodes)
    min_lat = min(l.latency for l in net.links)
    return total > max_node and len(req.demands) > 1 and req.sfc.qos.delay_ms < min_lat


class _Run:
    """Mutable bookkeeping for one place_sfc call."""

    def __init__(self, agent, req, net, repo, rng, cfg, train):
        self.agent, self.req, self.net, self.repo, self.rng = agent, req, net, repo, rng
        self.cfg, self.train = cfg, train
        self.mapping = SfcMapping(req.sfc.id, req.sfc.qos.delay_ms)
        self.prev_node: int | None = None
        self.budget = req.sfc.qos.delay_ms
        self.pending: list | None = None  # [state, action, reward]
        self.decisions = 0

    # RL bookkeeping ------------------------------------------------------
    def _record(self, state, action, reward):
        if not self.train:
            return
        if self.pending is not None:
            s, a, r = self.pending
            self.agent.replay.push(s, a, r, state, 0.0)
        self.pending = [state, action, reward]

    def finish(self, placed: bool):
        if not self.train or self.pending is None:
            return
        s, a, r = self.pending
        r += global_reward(placed, self.cfg.global_reward)
        self.agent.replay.push(s, a, r, s, 1.0)
        self.pending = None

    def _tick_training(self):
        self.agent.decisions += 1
        if self.train and self.agent.decisions % self.cfg.train_every == 0:
            self.agent.update(self.rng)

    # placement primitives --------------------------------------------------
    def _link_to(self, node: int, bw: float, links_left: int):
        if self.prev_node is None or self.prev_node == node:
            return []
        allowance = self.budget / max(1, links_left)
        return netmodel.feasible_path(self.net, self.prev_node, node, bw, allowance)

    def _commit_link(self, node: int, path, bw: float):
        if self.prev_node is not None and self.prev_node != node:
            netmodel.reserve_path(self.net, path, bw)
            lat = netmodel.path_latency(self.net, path)
            self.budget -= lat
            self.mapping.vlinks.append(VirtualLink(self.prev_node, node, list(path), bw, lat))
        self.prev_node = node

    def place_unit(self, cores: int, bw_in: float, links_left: int, allow_decompose: bool):
        """Returns a node id, the string "decompose", or None on failure."""
        n = self.agent.n_nodes
        allowed = np.ones(n, dtype=bool)
        eps = self.agent.epsilon if self.train else 0.0
        while allowed.any():
            state = placement_state(self.net, cores, bw_in, self.req, self.cfg)
            action = select_node(self.agent, state, eps, self.rng, allowed)
            self.decisions += 1
            node_id = self.net.nodes[action].id
            if allow_decompose and identify_decomposition_candidate(cores, self.net, node_id):
                return "decompose"
            path = None
            if self.net.nodes[action].cpu_available >= cores:
                try:
                    path = self._link_to(node_id, bw_in, links_left)
                except NoPath:
                    path = None
            if path is None:
                self._record(state, action, -1.0)
                self._tick_training()
                allowed[action] = False
                continue
            netmodel.allocate_cpu(self.net, node_id, cores)
            self._commit_link(node_id, path, bw_in)
            node = self.net.nodes[action]
            quality = node.cpu_available / node.cpu_capacity
            r = local_reward(True, quality, self.req.macro, self.req.micro, self.req.sfc.reliability,
                             self.req.hd_flag, self.req.load_now, self.req.load_weight)
            self._record(state, action, r)
            self._tick_training()
            return node_id
        return None


def place_sfc(agent: DdqlAgent, req: PlacementRequest, net: SubstrateNetwork,
              repo: MicroVnfRepository, rng: np.random.Generator, mode: str = "train",
              cfg: PlacementConfig | None = None) -> PlacementResult:
    """Place a whole chain or nothing.

    On rejection the network and repository are restored to their exact
    pre-call state.
    """
    cfg = cfg or agent.cfg
    if structurally_infeasible(req, net):
        return PlacementResult(False, "infeasible")
    if sum(req.demands) > net.total_cpu_available:
        return PlacementResult(False, "resources")
    net_snap, repo_snap = net.snapshot(), repo.snapshot()
    run = _Run(agent, req, net, repo, rng, cfg, mode == "train")
    sfc = req.sfc
    n_vnf = len(sfc.vnfs)
    bw = sfc.qos.bandwidth
    decomposed = 0
    ok = True
    for i, (vnf, demand) in enumerate(zip(sfc.vnfs, req.demands)):
        hops_after = n_vnf - 1 - i
        links_left = hops_after + (1 if i > 0 else 0)
        node = run.place_unit(demand, bw, links_left, allow_decompose=True)
        if node is None:
            ok = False
            break
        if node != "decompose":
            run.mapping.units.append(UnitPlacement(i, 0, node, demand, demand))
            continue
        m = granularity_index(demand, netmodel.network_availability_index(net))
        if m < 2:
            ok = False
            break
        decomposed += 1
        plan = rearchitect(decompose(vnf, m, cfg, bw, parent=i, demand=demand), repo)
        for k, seg in enumerate(plan.segments):
            seg_bw = bw if k == 0 else plan.inter_segment_bw
            segs_after = len(plan.segments) - 1 - k
            left = segs_after + hops_after + (1 if (k > 0 or i > 0) else 0)
            if seg.reuse_node is not None:
                try:
                    path = run._link_to(seg.reuse_node, seg_bw, left)
                    run._commit_link(seg.reuse_node, path, seg_bw)
                    run.mapping.units.append(
                        UnitPlacement(i, k, seg.reuse_node, 0, seg.cpu_demand, seg.shared_kind, True))
                    run.mapping.repo_refs.append((seg.shared_kind, seg.reuse_node, seg.cpu_demand))
                    continue
                except (NoPath, InsufficientResources):
                    repo.release(seg.shared_kind, seg.reuse_node, seg.cpu_demand)
                    seg.reuse_node = None
            node = run.place_unit(seg.cores, seg_bw, left, allow_decompose=False)
            if node is None:
                ok = False
                break
            if seg.shared_kind is not None:
                repo.register(seg.shared_kind, node, seg.cores, seg.cpu_demand)
                run.mapping.repo_refs.append((seg.shared_kind, node, seg.cpu_demand))
                run.mapping.units.append(
                    UnitPlacement(i, k, node, 0, seg.cpu_demand, seg.shared_kind, False))
            else:
                run.mapping.units.append(UnitPlacement(i, k, node, seg.cores, seg.cpu_demand))
        if not ok:
            break
    run.finish(ok)
    if not ok:
        net.restore(net_snap)
        repo.restore(repo_snap)
        return PlacementResult(False, "resources", decisions=run.decisions, decomposed=decomposed)
    return PlacementResult(True, None, run.mapping, run.decisions, decomposed)


# -- independent validation ------------------------------------------------------

def validate_mappings(net: SubstrateNetwork, repo: MicroVnfRepository,
                      mappings: Sequence[SfcMapping]) -> list[str]:
    """Re-walk live mappings against raw capacities; returns violation messages."""
    problems: list[str] = []
    used_cpu = {n.id: 0 for n in net.nodes}
    for mp in mappings:
        for u in mp.units:
            used_cpu[u.node] += u.cores
    for (kind, node), row in repo.rows.items():
        used_cpu[node] += row.cores
        if row.refcount < 1:
            problems.append(f"repo row {kind}@{node} has refcount {row.refcount}")
    for n in net.nodes:
        if used_cpu[n.id] > n.cpu_capacity:
            problems.append(f"node {n.id}: {used_cpu[n.id]} cores used > capacity {n.cpu_capacity}")
        if n.cpu_capacity - n.cpu_available != used_cpu[n.id]:
            problems.append(
                f"node {n.id}: ledger {used_cpu[n.id]} != allocated {n.cpu_capacity - n.cpu_available}")
    used_bw = [0.0] * len(net.links)
    for mp in mappings:
        for v in mp.vlinks:
            here = v.src
            lat = 0.0
            for li in v.links:
                link = net.links[li]
                if here not in (link.a, link.b):
                    problems.append(f"sfc {mp.sfc_id}: path {v.links} is not contiguous")
                    break
                here = link.other(here)
                lat += link.latency
                used_bw[li] += v.bw
            if here != v.dst:
                problems.append(f"sfc {mp.sfc_id}: path ends at {here}, expected {v.dst}")
            if abs(lat - v.latency) > 1e-9:
                problems.append(f"sfc {mp.sfc_id}: recorded latency {v.latency} != {lat}")
        total_lat = sum(v.latency for v in mp.vlinks)
        if total_lat > mp.delay_budget + 1e-9:
            problems.append(f"sfc {mp.sfc_id}: latency {total_lat} exceeds budget {mp.delay_budget}")
        # consecutive units must be joined by a virtual link whenever they change node
        hops = sum(1 for a, b in zip(mp.units, mp.units[1:]) if a.node != b.node)
        if hops != len(mp.vlinks):
            problems.append(f"sfc {mp.sfc_id}: {hops} node changes but {len(mp.vlinks)} virtual links")
    for li, link in enumerate(net.links):
        if used_bw[li] > link.bw_capacity + 1e-6:
            problems.append(f"link {li}: bandwidth {used_bw[li]} > capacity {link.bw_capacity}")
    return problems
