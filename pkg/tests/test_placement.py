import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnfsim import netmodel, placement, workload
from vnfsim.errors import BadInput, DimensionMismatch
from vnfsim.placement import (
    DdqlAgent,
    MicroVnfRepository,
    PlacementConfig,
    PlacementRequest,
)
from vnfsim.workload import QosSpec, SfcRequest, TrafficProfile, VnfSpec


def full_mesh(cpus, bw=1000.0, latency=1.0):
    n = len(cpus)
    return netmodel.load_topology({
        "node": [{"id": i, "cpu": c} for i, c in enumerate(cpus)],
        "link": [{"a": a, "b": b, "bw": bw, "latency_ms": latency} for a in range(n) for b in range(a + 1, n)],
    })


def make_sfc(demands, kinds=None, delay=100.0, bw=50.0, sid=0):
    kinds = kinds or ["load-balancer"] * len(demands)
    return SfcRequest(sid, tuple(VnfSpec(d, k) for d, k in zip(demands, kinds)), QosSpec(delay, 3, 0.01, bw),
                      0.0, 50.0, 10.0, 0.95, 1.0, TrafficProfile(0.2, 0.1, 30.0))


def request(sfc):
    return PlacementRequest(sfc, [v.cpu_demand for v in sfc.vnfs], 0.5, 0.5, 0, 0.3)


def agent_for(net, seed=0, **kw):
    cfg = PlacementConfig(**kw)
    return DdqlAgent(2 + len(net.nodes) + 4, len(net.nodes), cfg, np.random.default_rng(seed))


def test_decomposition_candidate_examples():
    net = full_mesh([10, 15, 15])
    assert not placement.identify_decomposition_candidate(4, net, 0)
    assert placement.identify_decomposition_candidate(20, net, 0)
    net2 = full_mesh([5, 25])
    assert not placement.identify_decomposition_candidate(20, net2, 0)


def test_granularity_examples_and_errors():
    assert placement.granularity_index(15, 1.0) == 1
    assert placement.granularity_index(15, 0.3) == 4
    assert all(placement.granularity_index(1, nai) == 1 for nai in (0.0, 0.2, 1.0))
    assert placement.granularity_index(40, 0.0) == 40
    with pytest.raises(BadInput):
        placement.granularity_index(0, 0.5)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 200), st.floats(0, 1), st.floats(0, 1))
def test_granularity_monotone(demand, a, b):
    lo, hi = sorted((a, b))
    assert placement.granularity_index(demand, lo) >= placement.granularity_index(demand, hi)


def test_decompose_examples():
    cfg = PlacementConfig()
    one = placement.decompose(VnfSpec(15, "monitor"), 1, cfg, 50.0)
    assert [s.cpu_demand for s in one.segments] == [15] and one.inter_segment_bw == 0.0
    assert one.segments[0].overhead_cpu == 0 and one.segments[0].shared_kind is None
    four = placement.decompose(VnfSpec(15, "load-balancer"), 4, cfg, 50.0)
    assert [s.cpu_demand for s in four.segments] == [4, 4, 4, 3]
    three = placement.decompose(VnfSpec(9, "load-balancer"), 3, cfg, 50.0)
    assert three.inter_segment_bw == pytest.approx(5.0)
    assert [s.overhead_cpu for s in three.segments] == [0, 1, 1]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 80), st.integers(1, 80), st.sampled_from(workload.VNF_KINDS))
def test_decompose_conserves_cpu(demand, m, kind):
    plan = placement.decompose(VnfSpec(demand, kind), m, PlacementConfig(), 40.0)
    sizes = [s.cpu_demand for s in plan.segments]
    assert sum(sizes) == demand and max(sizes) - min(sizes) <= 1
    assert len(sizes) == min(m, demand)
    tags = [s.shared_kind for s in plan.segments if s.shared_kind]
    assert len(tags) <= max(0, len(sizes) - 1)


def test_rearchitect_examples():
    cfg = PlacementConfig()
    repo = MicroVnfRepository(share_factor=2.0)
    plan = placement.decompose(VnfSpec(12, "edge-firewall"), 3, cfg, 50.0)
    placement.rearchitect(plan, repo)
    assert plan.reused == [] and all(s.reuse_node is None for s in plan.segments)
    repo.register("shared-parser", 3, 5, 4)
    plan = placement.decompose(VnfSpec(12, "edge-firewall"), 3, cfg, 50.0)
    placement.rearchitect(plan, repo)
    assert plan.reused == [("shared-parser", 3)]
    assert repo.rows[("shared-parser", 3)].refcount == 2
    # headroom is now 2*5 - 8 = 2, too small for another 4-core parser
    plan = placement.decompose(VnfSpec(12, "edge-firewall"), 3, cfg, 50.0)
    placement.rearchitect(plan, repo)
    assert all(k != "shared-parser" for k, _ in plan.reused)


def test_repository_release_frees_cores():
    repo = MicroVnfRepository()
    repo.register("shared-reader", 1, 4, 3)
    repo.acquire("shared-reader", 1, 3)
    assert repo.release("shared-reader", 1, 3) == 0
    assert repo.release("shared-reader", 1, 3) == 4
    assert repo.rows == {}


def test_select_node_rules():
    net = full_mesh([10, 10, 10])
    ag = agent_for(net)
    ag.q_online.flat[...] = 0.0
    ag.q_online.biases[-1][...] = [0.1, 0.9, 0.3]
    state = np.zeros(ag.state_dim)
    rng = np.random.default_rng(0)
    assert placement.select_node(ag, state, 0.0, rng) == 1
    ag.q_online.biases[-1][...] = [0.5, 0.5, 0.5]
    assert placement.select_node(ag, state, 0.0, rng) == 0
    with pytest.raises(DimensionMismatch):
        placement.select_node(ag, np.zeros(3), 0.0, rng)


def test_select_node_uniform_exploration():
    net = full_mesh([10] * 5)
    ag = agent_for(net)
    rng = np.random.default_rng(1)
    counts = np.bincount([placement.select_node(ag, np.zeros(ag.state_dim), 1.0, rng) for _ in range(10_000)],
                         minlength=5)
    chi2 = float(((counts - 2000) ** 2 / 2000).sum())
    assert chi2 < 4 + 3 * math.sqrt(8)


def test_ddql_target_table():
    assert placement.ddql_target(1.0, False, [0.2, 0.5], [0.7, 0.1], 0.9) == pytest.approx(1.09)
    assert placement.ddql_target(1.0, True, [0.2, 0.5], [0.7, 0.1], 0.9) == 1.0
    assert placement.ddql_target(-0.5, False, [0.9, 0.1], [3.0, 8.0], 0.0) == -0.5
    with pytest.raises(DimensionMismatch):
        placement.ddql_target(0.0, False, [1.0], [1.0, 2.0], 0.9)


def test_reward_examples():
    assert placement.local_reward(False, 1, 1, 1, 1, 1, 1) == -1.0
    assert placement.local_reward(True, 1, 1, 1, 1, 1, 1) == pytest.approx(1.0)
    assert placement.local_reward(True, 0.5, 0, 0, 0, 0, 1) == pytest.approx(0.2)
    assert placement.global_reward(True) == 5.0 and placement.global_reward(False) == 0.0


def test_over_capacity_rejected_unchanged():
    net = full_mesh([10, 10])
    repo = MicroVnfRepository()
    snap = net.snapshot()
    res = placement.place_sfc(agent_for(net), request(make_sfc([15, 15])), net, repo, np.random.default_rng(0))
    assert not res.placed and res.reason == "infeasible"
    assert net.snapshot() == snap and repo.rows == {}


def test_single_vnf_lands_on_free_node():
    net = full_mesh([2, 3, 8, 1])
    ag = agent_for(net)
    res = placement.place_sfc(ag, request(make_sfc([4])), net, MicroVnfRepository(), np.random.default_rng(0), "greedy")
    assert res.placed and res.mapping.units[0].node == 2
    assert net.node(2).cpu_available == 4


def test_single_vnf_terminal_transition_carries_global_reward():
    net = full_mesh([10, 10])
    ag = agent_for(net, batch_size=10_000)
    res = placement.place_sfc(ag, request(make_sfc([4])), net, MicroVnfRepository(), np.random.default_rng(0))
    assert res.placed
    (s, a, r, s2, done), = ag.replay.items()
    assert done == 1.0 and r > 5.0


def test_split_when_nothing_fits_whole():
    net = full_mesh([10, 10, 10, 10])
    repo = MicroVnfRepository()
    sfc = make_sfc([3, 15, 3])
    ag = agent_for(net)
    res = placement.place_sfc(ag, request(sfc), net, repo, np.random.default_rng(2))
    assert res.placed and res.decomposed == 1
    segs = [u for u in res.mapping.units if u.vnf == 1]
    assert len(segs) >= 2
    assert sum(u.demand for u in segs) == 15
    overhead = sum(u.cores - u.demand for u in segs if not u.reused and u.shared_kind is None)
    used = net.total_cpu_capacity - net.total_cpu_available
    assert used == 3 + 3 + 15 + overhead
    assert placement.validate_mappings(net, repo, [res.mapping]) == []


def test_split_uses_granularity_at_current_availability():
    net = full_mesh([10, 10, 10, 10])
    for n in net.nodes:
        netmodel.allocate_cpu(net, n.id, 2)  # nai = 0.8, nobody fits 15
    nai = netmodel.network_availability_index(net)
    m = placement.granularity_index(15, nai)
    assert m == 2
    res = placement.place_sfc(agent_for(net), request(make_sfc([15])), net, MicroVnfRepository(),
                              np.random.default_rng(3))
    assert res.placed and len(res.mapping.units) == m


def _shuffled_ops(rng, n):
    ops = []
    for _ in range(n):
        ops.append("depart" if rng.random() < 0.35 else "place")
    return ops


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_place_depart_sequences_keep_ledger(seed):
    rng = np.random.default_rng(seed)
    net = netmodel.load_topology("netrail", "scarce")
    repo = MicroVnfRepository()
    ag = agent_for(net, seed)
    live = []
    wcfg = workload.WorkloadConfig()
    for i, op in enumerate(_shuffled_ops(rng, 60)):
        if op == "depart" and live:
            placement.release_mapping(net, repo, live.pop(int(rng.integers(0, len(live)))))
        else:
            sfc = workload._draw_request(rng, wcfg, i, 0.0)
            snap, rsnap = net.snapshot(), repo.snapshot()
            res = placement.place_sfc(ag, request(sfc), net, repo, rng)
            if res.placed:
                live.append(res.mapping)
            else:
                assert net.snapshot() == snap and repo.rows == rsnap
        assert placement.validate_mappings(net, repo, live) == []
        assert 0.0 <= netmodel.network_availability_index(net) <= 1.0
        assert all(r.refcount >= 1 for r in repo.rows.values())
    for mp in live:
        placement.release_mapping(net, repo, mp)
    assert net.total_cpu_available == net.total_cpu_capacity and repo.rows == {}
    assert all(abs(l.bw_available - l.bw_capacity) < 1e-6 for l in net.links)


def test_validator_catches_tampering():
    net = full_mesh([10, 10])
    repo = MicroVnfRepository()
    res = placement.place_sfc(agent_for(net), request(make_sfc([4, 4])), net, repo, np.random.default_rng(4))
    assert placement.validate_mappings(net, repo, [res.mapping]) == []
    res.mapping.units[0].cores += 1
    assert placement.validate_mappings(net, repo, [res.mapping])


def test_mapping_record_is_json():
    net = full_mesh([10, 10])
    res = placement.place_sfc(agent_for(net), request(make_sfc([4])), net, MicroVnfRepository(),
                              np.random.default_rng(5))

    rec = json.loads(res.mapping.to_record())
    assert rec["sfc_id"] == 0 and rec["units"][0]["cores"] == 4


def test_ddql_update_reduces_error_on_fixed_batch():
    net = full_mesh([10, 10, 10])
    ag = agent_for(net, batch_size=16, lr=1e-3, tau=0.0)
    rng = np.random.default_rng(6)
    for _ in range(16):
        ag.replay.push(rng.random(ag.state_dim), int(rng.integers(0, 3)), 1.0, rng.random(ag.state_dim), 1.0)
    losses = [ag.update(np.random.default_rng(7)) for _ in range(50)]
    assert losses[-1] < losses[0]
