import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnfsim import placement, simengine, workload
from vnfsim.dypr import PriorityLabel
from vnfsim.errors import BadWindow, ConfigInvalid
from vnfsim.simengine import PipelineConfig
from vnfsim.workload import QosSpec, SfcRequest, TrafficProfile, VnfSpec


def small_cfg(**kw):
    cfg = PipelineConfig(episodes=3, **kw)
    cfg.workload.max_services = 30
    return cfg


def test_moving_average_examples():
    assert simengine.moving_average([3.0, 1.0, 4.0], 1) == [3.0, 1.0, 4.0]
    assert simengine.moving_average([2.0] * 7, 3) == [2.0] * 7
    assert simengine.moving_average([0.0, 1.0], 2) == [0.0, 0.5]
    with pytest.raises(BadWindow):
        simengine.moving_average([1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), max_size=60), st.integers(1, 20))
def test_moving_average_matches_naive(series, window):
    got = simengine.moving_average(series, window)
    want = [np.mean(series[max(0, i - window + 1): i + 1]) for i in range(len(series))]
    assert np.allclose(got, want, atol=1e-9)


def _sfc(sid, arrival):
    return SfcRequest(sid, (VnfSpec(2),), QosSpec(20, 3, 0.01, 50), arrival, 50.0, 10.0, 0.95, 1.0,
                      TrafficProfile(0.2, 0.1, 30.0))


def test_baseline_orders():
    waiting = [(_sfc(0, 3.0), PriorityLabel(0.25, 0.9), 0), (_sfc(1, 1.0), PriorityLabel(1.0, 0.1), 0),
               (_sfc(2, 2.0), PriorityLabel(1.0, 0.7), 0), (_sfc(3, 0.5), PriorityLabel(0.25, 0.9), 0)]
    assert [e.sfc.id for e in simengine.fifo_schedule(waiting)] == [3, 1, 2, 0]
    assert [e.sfc.id for e in simengine.strict_priority_schedule(waiting)] == [2, 1, 3, 0]
    assert simengine.fifo_schedule([]) == [] and simengine.strict_priority_schedule([]) == []


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        PipelineConfig(scheduler="lottery").validate()
    with pytest.raises(ConfigInvalid):
        PipelineConfig(classifier="birch").validate()
    with pytest.raises(ConfigInvalid):
        PipelineConfig(episodes=0).validate()
    cfg = PipelineConfig()
    cfg.workload.rate = 0.0
    with pytest.raises(ConfigInvalid):
        cfg.validate()
    assert PipelineConfig(traffic_aware=False).effective_classifier == "off"


def test_no_arrivals_gives_zero_metrics():
    cfg = small_cfg()
    cfg.workload.horizon = 0.0
    m = simengine.run_episode(cfg, simengine.build_models(cfg), 0)
    assert (m.arrivals, m.accepted, m.rejected, m.expired, m.sar) == (0, 0, 0, 0, 0.0)


def test_single_tiny_sfc_is_accepted():
    cfg = small_cfg()
    cfg.workload.max_services = 1
    cfg.workload.chain_min = cfg.workload.chain_max = 1
    cfg.workload.cpu_mean, cfg.workload.cpu_sigma = 1.0, 0.0
    m = simengine.run_episode(cfg, simengine.build_models(cfg), 0)
    assert m.arrivals == 1 and m.accepted == 1 and m.sar == 1.0


def _closure(m):
    assert m.accepted + m.rejected + m.expired == m.arrivals
    for table in (m.by_class, m.by_demand):
        assert sum(r[0] for r in table.values()) == m.arrivals
        for arr, acc, rej, exp in table.values():
            assert acc + rej + exp == arr


def test_overload_keeps_ledger_consistent():
    cfg = small_cfg(capacity_profile="scarce")
    cfg.workload.max_services = 100
    cfg.workload.rate = 5.0
    cfg.workload.lifetime_mean = 10_000.0  # total demand ~3x the scarce network
    models = simengine.build_models(cfg)
    violations = []

    def check(models, live):
        violations.extend(placement.validate_mappings(models.net, models.repo, list(live.values())))
    m = simengine.run_episode(cfg, models, 0, check=check)
    assert violations == []
    assert m.sar < 1.0
    _closure(m)


@pytest.mark.parametrize("scheduler", simengine.SCHEDULERS)
def test_accounting_closure_and_monotone_time(scheduler):
    cfg = small_cfg(scheduler=scheduler)
    models = simengine.build_models(cfg)
    for e in range(3):
        lines = []
        m = simengine.run_episode(cfg, models, e, log=lines.append)
        _closure(m)
        times = [float(line.split()[0]) for line in lines]
        assert times == sorted(times)


def test_drain_mode_restores_network():
    cfg = small_cfg()
    models = simengine.build_models(cfg)
    simengine.run_episode(cfg, models, 0, drain=True)
    net = models.net
    assert net.total_cpu_available == net.total_cpu_capacity
    assert all(abs(l.bw_available - l.bw_capacity) < 1e-6 for l in net.links)
    assert models.repo.rows == {}


def _run(cfg):
    lines = []
    res = simengine.run_experiment(cfg, log=lines.append)
    rows = [simengine.metrics_row(m, res.grid) for m in res.metrics]
    return rows, lines, res


def test_determinism():
    a_rows, a_log, _ = _run(small_cfg())
    b_rows, b_log, _ = _run(small_cfg())
    assert repr(a_rows) == repr(b_rows)
    assert a_log == b_log


def test_streams_identical_across_schedulers():
    _, _, a = _run(small_cfg(scheduler="fifo"))
    _, _, b = _run(small_cfg(scheduler="adsch"))
    _, _, c = _run(small_cfg(traffic_aware=False))
    assert [m.stream_hash for m in a.metrics] == [m.stream_hash for m in b.metrics] == [
        m.stream_hash for m in c.metrics]
    assert len(set(m.stream_hash for m in a.metrics)) == 3


def test_one_episode_series():
    cfg = small_cfg()
    cfg.episodes = 1
    res = simengine.run_experiment(cfg)
    assert len(res.series("sar")) == 1


def test_starvation_report_recount():
    cfg = small_cfg(scheduler="strict_priority", capacity_profile="scarce")
    cfg.workload.rate = 3.0
    cfg.workload.max_services = 60
    _, lines, res = _run(cfg)
    arrivals, expired = {}, {}
    pat = re.compile(r"^\S+ (\S+) sfc=\d+ macro=(\S+) hd=\d$")
    for line in lines:
        mt = pat.match(line)
        if not mt:
            continue
        kind, macro = mt.group(1), float(mt.group(2))
        arrivals[macro] = arrivals.get(macro, 0) + 1
        if kind == "expire":
            expired[macro] = expired.get(macro, 0) + 1
    rep = simengine.starvation_report(res.metrics, cfg.dypr.class_grid)
    assert sum(expired.values()) > 0
    for cls in cfg.dypr.class_grid:
        n = arrivals.get(cls, 0)
        want = expired.get(cls, 0) / n if n else 0.0
        assert rep["per_class"][cls]["expiry_rate"] == pytest.approx(want)
    assert rep["low_class_starvation"] == rep["per_class"][0.25]["expiry_rate"]


def _metrics(rows):
    m = simengine.EpisodeMetrics(arrivals=sum(r[0] for r in rows.values()))
    m.by_class = rows
    return m


def test_starvation_report_examples():
    rep = simengine.starvation_report([_metrics({0.25: [4, 4, 0, 0], 1.0: [2, 1, 1, 0]})])
    assert all(v["expiry_rate"] == 0.0 for v in rep["per_class"].values())
    rep = simengine.starvation_report([_metrics({0.25: [5, 0, 0, 5]})])
    assert rep["low_class_starvation"] == 1.0 and rep["low_class_sar"] == 0.0


def test_final_window_and_pooled():
    a = simengine.EpisodeMetrics(arrivals=4, accepted=2, by_class={0.25: [2, 1, 0, 1]})
    b = simengine.EpisodeMetrics(arrivals=2, accepted=2, by_class={0.25: [2, 2, 0, 0]})
    res = simengine.ExperimentResult([a, b], (0.25, 0.5, 0.75, 1.0))
    assert res.final_window("sar", 2) == pytest.approx(0.75)
    assert res.pooled_sar(0.25, 2) == pytest.approx(0.75)
    assert np.isnan(res.pooled_sar(1.0, 2))


def test_traffic_unaware_uses_no_classifier():
    cfg = small_cfg(traffic_aware=False)
    models = simengine.build_models(cfg)
    assert models.classifier.cfg.preset == "off"
    simengine.run_episode(cfg, models, 0)
    assert models.classifier.model is None


def test_arrival_stream_depends_on_seed_and_episode_only():
    cfg = small_cfg()
    a = workload.generate_arrivals(simengine.episode_rng(3, 5), cfg.workload)
    b = workload.generate_arrivals(simengine.episode_rng(3, 5), cfg.workload)
    c = workload.generate_arrivals(simengine.episode_rng(3, 6), cfg.workload)
    assert simengine.stream_digest(a) == simengine.stream_digest(b) != simengine.stream_digest(c)
