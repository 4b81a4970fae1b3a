"""Episode orchestration: arrivals, ticks, placements, departures and metrics."""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import adsch, dypr, netmodel, placement, trafficclass, workload
from .errors import BadWindow, ConfigInvalid
from .trafficclass import DemandLabel

SCHEDULERS = ("adsch", "fifo", "strict_priority")

# event-kind priorities at equal timestamps
DEPARTURE, ARRIVAL, TICK = 0, 1, 2
_KIND_NAMES = {DEPARTURE: "departure", ARRIVAL: "arrival", TICK: "tick"}


@dataclass
class PipelineConfig:
    topology: str = "netrail"
    capacity_profile: str = "default"
    scheduler: str = "adsch"
    classifier: str = "aggo+dt"
    traffic_aware: bool = True
    episodes: int = 2000
    seed: int = 0
    tick: float = 1.0
    # reserved fraction of nominal cores for services classified NHD
    nhd_reservation_frac: float = 0.6
    workload: workload.WorkloadConfig = field(default_factory=workload.WorkloadConfig)
    dypr: dypr.DyPrConfig = field(default_factory=dypr.DyPrConfig)
    trafficclass: trafficclass.ClassifierConfig = field(default_factory=trafficclass.ClassifierConfig)
    adsch: adsch.AdSchConfig = field(default_factory=adsch.AdSchConfig)
    placement: placement.PlacementConfig = field(default_factory=placement.PlacementConfig)

    def validate(self) -> None:
        if self.scheduler not in SCHEDULERS:
            raise ConfigInvalid(f"unknown scheduler {self.scheduler!r}")
        if self.classifier not in trafficclass.PRESETS:
            raise ConfigInvalid(f"unknown classifier preset {self.classifier!r}")
        if self.episodes < 1:
            raise ConfigInvalid("episodes must be >= 1")
        if self.tick <= 0:
            raise ConfigInvalid("tick must be > 0")
        if not 0 < self.nhd_reservation_frac <= 1:
            raise ConfigInvalid("nhd_reservation_frac must lie in (0, 1]")
        try:
            self.workload.validate()
            self.dypr.validate()
        except Exception as exc:  # noqa: BLE001 - surfaced as a config error
            raise ConfigInvalid(str(exc)) from None

    @property
    def effective_classifier(self) -> str:
        return self.classifier if self.traffic_aware else "off"


@dataclass
class EpisodeMetrics:
    episode: int = 0
    arrivals: int = 0
    accepted: int = 0
    rejected: int = 0
    expired: int = 0
    by_class: dict = field(default_factory=dict)  # macro -> [arrivals, accepted, rejected, expired]
    by_demand: dict = field(default_factory=dict)  # "hd"/"nhd" -> same
    remaining_cpu_avg: float = 0.0
    starvation_count: int = 0
    decomposed: int = 0
    underprovisioned: int = 0
    epsilon: float = 0.0
    actor_sigma: float = 0.0
    stream_hash: str = ""

    @property
    def sar(self) -> float:
        return self.accepted / self.arrivals if self.arrivals else 0.0

    def _class_sar(self, row) -> float:
        return row[1] / row[0] if row and row[0] else float("nan")

    def sar_class(self, macro: float) -> float:
        return self._class_sar(self.by_class.get(macro))

    @property
    def sar_hd(self) -> float:
        return self._class_sar(self.by_demand.get("hd"))

    @property
    def sar_nhd(self) -> float:
        return self._class_sar(self.by_demand.get("nhd"))


CSV_COLUMNS = (
    "episode", "sar", "sar_high", "sar_low", "sar_hd", "sar_nhd",
    "remaining_cpu_avg", "starvation_count", "epsilon", "actor_sigma",
)


def metrics_row(m: EpisodeMetrics, grid: Sequence[float]) -> list:
    return [
        m.episode, m.sar, m.sar_class(grid[-1]), m.sar_class(grid[0]), m.sar_hd, m.sar_nhd,
        m.remaining_cpu_avg, m.starvation_count, m.epsilon, m.actor_sigma,
    ]


# -- baselines --------------------------------------------------------------------

def fifo_schedule(waiting) -> list[adsch.QueueEntry]:
    entries = [_entry(w) for w in waiting]
    entries.sort(key=lambda e: (e.sfc.arrival_time, e.sfc.id))
    return entries


def strict_priority_schedule(waiting) -> list[adsch.QueueEntry]:
    entries = [_entry(w) for w in waiting]
    entries.sort(key=lambda e: (-e.state.macro_priority, -e.state.micro_priority,
                                e.sfc.arrival_time, e.sfc.id))
    return entries


def _entry(w) -> adsch.QueueEntry:
    if isinstance(w, adsch.QueueEntry):
        return adsch.QueueEntry(w.sfc, w.state, 0.0)
    sfc, prio, hd = w[:3]
    now = w[3] if len(w) > 3 else sfc.arrival_time
    return adsch.QueueEntry(sfc, adsch.build_state(sfc, now, prio, hd), 0.0)


def moving_average(series: Sequence[float], window: int) -> list[float]:
    if window < 1:
        raise BadWindow("window must be >= 1")
    out = []
    acc = 0.0
    vals = list(series)
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


# -- models bundle --------------------------------------------------------------

@dataclass
class Models:
    net: netmodel.SubstrateNetwork
    repo: placement.MicroVnfRepository
    dypr: dypr.DyPrState
    classifier: trafficclass.TrafficClassifier
    scheduler: adsch.DdpgAgent
    placer: placement.DdqlAgent
    rng: np.random.Generator  # agent-side randomness (exploration, replay sampling)
    ticks: int = 0


def build_models(cfg: PipelineConfig) -> Models:
    cfg.validate()
    net = netmodel.load_topology(cfg.topology, cfg.capacity_profile)
    ss = np.random.SeedSequence([cfg.seed, 7])
    init_rng = np.random.default_rng(ss.spawn(1)[0])
    clf_cfg = trafficclass.ClassifierConfig(**{
        f.name: getattr(cfg.trafficclass, f.name) for f in fields(cfg.trafficclass)})
    clf_cfg.preset = cfg.effective_classifier
    state_dim = 2 + len(net.nodes) + 4
    return Models(
        net=net,
        repo=placement.MicroVnfRepository(cfg.placement.share_factor),
        dypr=dypr.DyPrState(cfg.dypr),
        classifier=trafficclass.TrafficClassifier(clf_cfg),
        scheduler=adsch.DdpgAgent(cfg.adsch, init_rng),
        placer=placement.DdqlAgent(state_dim, len(net.nodes), cfg.placement, init_rng),
        rng=np.random.default_rng(ss.spawn(2)[1]),
    )


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    """Arrival-stream generator; depends on (seed, episode) only."""
    return np.random.default_rng(np.random.SeedSequence([seed, episode, 1]))


def stream_digest(arrivals: Sequence[workload.SfcRequest]) -> str:
    h = hashlib.sha256()
    for r in arrivals:
        h.update(repr((r.id, r.arrival_time, r.vnfs, r.qos, r.lifetime, r.twt,
                       r.reliability, r.popularity, r.traffic_profile)).encode())
    return h.hexdigest()[:16]


# -- episode ----------------------------------------------------------------------

@dataclass
class _Waiting:
    sfc: workload.SfcRequest
    prio: dypr.PriorityLabel
    label: DemandLabel
    demands: list[int]
    pending: tuple | None = None  # (state vector, action) from the last tick


def _tally(table: dict, key, col: int) -> None:
    row = table.setdefault(key, [0, 0, 0, 0])
    row[col] += 1


def _need(vnf: workload.VnfSpec, peak: float) -> int:
    return max(1, math.ceil(vnf.cpu_demand * peak - 1e-9))


def run_episode(
    cfg: PipelineConfig,
    models: Models,
    episode_index: int,
    log: Callable[[str], None] | None = None,
    reset: bool = True,
    drain: bool = False,
    train: bool = True,
    check: Callable[[Models, dict], None] | None = None,
) -> EpisodeMetrics:
    """Simulate one episode; agents learn online when ``train`` is set.

    ``drain`` keeps processing departures after the last arrival resolves, so
    the network ends empty. ``check`` is called after every event with the
    live mapping table (used by invariant tests).
    """
    net, repo = models.net, models.repo
    if reset:
        net.reset()
        repo.reset()
    arrivals = workload.generate_arrivals(episode_rng(cfg.seed, episode_index), cfg.workload)
    m = EpisodeMetrics(episode=episode_index, stream_hash=stream_digest(arrivals))
    m.arrivals = len(arrivals)
    grid = cfg.dypr.class_grid
    aware = cfg.traffic_aware
    rw = cfg.adsch.reward
    rng = models.rng
    emit = log or (lambda line: None)

    events: list = []
    for r in arrivals:
        heapq.heappush(events, (r.arrival_time, ARRIVAL, r.id, r))
    if arrivals:
        heapq.heappush(events, (cfg.tick * math.ceil(arrivals[0].arrival_time / cfg.tick), TICK, 0, None))

    new: list[workload.SfcRequest] = []
    waiting: list[_Waiting] = []
    live: dict[int, placement.SfcMapping] = {}
    outstanding = len(arrivals)  # arrivals not yet accepted/rejected/expired
    cpu_samples: list[int] = []
    last_time = -math.inf

    def resolve(w: _Waiting, col: int, reason: str, now: float) -> None:
        nonlocal outstanding
        _tally(m.by_class, w.prio.macro, col)
        _tally(m.by_demand, "hd" if w.sfc.hd_truth else "nhd", col)
        outstanding -= 1
        emit(f"{now:.6f} {reason} sfc={w.sfc.id} macro={w.prio.macro} hd={int(w.sfc.hd_truth)}")

    while events:
        now, kind, key, payload = heapq.heappop(events)
        assert now >= last_time, "event time went backwards"
        last_time = now
        if kind == DEPARTURE:
            mapping = live.pop(key)
            placement.release_mapping(net, repo, mapping)
            emit(f"{now:.6f} depart sfc={key}")
        elif kind == ARRIVAL:
            new.append(payload)
            emit(f"{now:.6f} arrive sfc={key}")
        else:
            _tick(cfg, models, now, new, waiting, live, events, m, resolve, train, rw, aware, rng)
            new = []
            cpu_samples.append(net.total_cpu_available)
            if outstanding > 0:
                heapq.heappush(events, (now + cfg.tick, TICK, 0, None))
            elif not drain:
                break
        if check is not None:
            check(models, live)

    if drain:
        assert not live
    m.remaining_cpu_avg = float(np.mean(cpu_samples)) if cpu_samples else float(net.total_cpu_available)
    m.accepted = sum(r[1] for r in m.by_class.values())
    m.rejected = sum(r[2] for r in m.by_class.values())
    m.expired = sum(r[3] for r in m.by_class.values())
    m.starvation_count = m.by_class.get(grid[0], [0, 0, 0, 0])[3]
    if train:
        models.classifier.end_episode(rng)
        models.placer.end_episode()
        models.scheduler.end_episode()
    m.epsilon = models.placer.epsilon
    m.actor_sigma = models.scheduler.sigma
    return m


def _tick(cfg, models, now, new, waiting, live, events, m, resolve, train, rw, aware, rng):
    net, repo = models.net, models.repo
    sched_agent = models.scheduler

    # expire services that have waited past their TWT
    still = []
    for w in waiting:
        if now - w.sfc.arrival_time > w.sfc.twt:
            resolve(w, 3, "expire", now)
        else:
            still.append(w)
    waiting[:] = still

    # prioritise and classify the newcomers
    for sfc in new:
        prio = dypr.prioritize(models.dypr, sfc, rng)
        qs = dypr.pseudo_target(dypr.featurize(sfc, cfg.dypr), cfg.dypr)
        feats = trafficclass.service_features(sfc, qs, cfg.trafficclass)
        label = models.classifier.label(feats) if aware else DemandLabel.NHD
        models.classifier.observe(feats)
        if aware and label == DemandLabel.NHD:
            frac = cfg.nhd_reservation_frac
            demands = [max(1, math.ceil(v.cpu_demand * frac - 1e-9)) for v in sfc.vnfs]
        else:
            demands = [v.cpu_demand for v in sfc.vnfs]
        _tally(m.by_class, prio.macro, 0)
        _tally(m.by_demand, "hd" if sfc.hd_truth else "nhd", 0)
        waiting.append(_Waiting(sfc, prio, label, demands))
    if not waiting:
        return

    # order the queue
    by_id = {w.sfc.id: w for w in waiting}
    triples = [(w.sfc, w.prio, int(w.label) if aware else 0) for w in waiting]
    if cfg.scheduler == "adsch":
        queue = adsch.schedule(sched_agent, triples, now, explore=train, rng=rng)
    elif cfg.scheduler == "fifo":
        queue = fifo_schedule([t + (now,) for t in triples])
    else:
        queue = strict_priority_schedule([t + (now,) for t in triples])

    # placement pass, stopping at the first transient rejection
    outcome: dict[int, str] = {}
    blocked = False
    for entry in queue:
        if blocked:
            break
        w = by_id[entry.sfc.id]
        hd_flag = int(w.label) if aware else 0
        load_now = workload.load_at(w.sfc.traffic_profile, now - w.sfc.arrival_time) if aware else 0.0
        req = placement.PlacementRequest(
            w.sfc, w.demands, w.prio.macro, w.prio.micro, hd_flag, load_now,
            load_weight=0.2 if aware else 0.0)
        res = placement.place_sfc(models.placer, req, net, repo, rng, "train" if train else "greedy")
        m.decomposed += res.decomposed
        if res.placed:
            peak = workload.profile_stats(w.sfc.traffic_profile)[1]
            short = any(d < _need(v, peak) for v, d in zip(w.sfc.vnfs, w.demands))
            if short:
                # right-sized below the live traffic peak: the SLA breaks, tear it down
                placement.release_mapping(net, repo, res.mapping)
                m.underprovisioned += 1
                outcome[w.sfc.id] = "underprovisioned"
                resolve(w, 2, "reject-underprovisioned", now)
                continue
            live[w.sfc.id] = res.mapping
            heapq.heappush(events, (now + w.sfc.lifetime, DEPARTURE, w.sfc.id, None))
            outcome[w.sfc.id] = "deployed"
            resolve(w, 1, "accept", now)
        elif res.reason == "infeasible":
            outcome[w.sfc.id] = "infeasible"
            resolve(w, 2, "reject-infeasible", now)
        else:
            blocked = True

    # scheduler transitions
    if cfg.scheduler == "adsch" and train:
        for entry in queue:
            s = entry.state
            vec = s.vector()
            result = outcome.get(entry.sfc.id)
            if result == "deployed":
                sched_agent.push(vec, entry.rank, adsch.scheduling_reward(s, True, False, rw), vec, True)
            elif result is not None:
                sched_agent.push(vec, entry.rank, adsch.scheduling_reward(s, False, False, rw), vec, True)
            else:
                sfc = entry.sfc
                wf_next = (now + cfg.tick - sfc.arrival_time) / sfc.twt
                nxt = vec.copy()
                nxt[0] = min(1.0, wf_next)
                if now + cfg.tick - sfc.arrival_time > sfc.twt:
                    r = adsch.scheduling_reward(adsch.SchedState(*nxt), False, True, rw)
                    sched_agent.push(vec, entry.rank, r, nxt, True)
                else:
                    r = adsch.scheduling_reward(s, False, False, rw)
                    sched_agent.push(vec, entry.rank, r, nxt, False)
        models.ticks += 1
        if models.ticks % cfg.adsch.train_interval == 0:
            for _ in range(cfg.adsch.updates_per_tick):
                sched_agent.train(rng)

    waiting[:] = [w for w in waiting if w.sfc.id not in outcome]


# -- experiments ------------------------------------------------------------------

@dataclass
class ExperimentResult:
    metrics: list[EpisodeMetrics]
    grid: tuple[float, ...]

    def series(self, name: str) -> list[float]:
        idx = CSV_COLUMNS.index(name)
        return [metrics_row(m, self.grid)[idx] for m in self.metrics]

    def final_window(self, name: str, window: int) -> float:
        """Mean of the last ``window`` finite values of a metric column."""
        vals = [v for v in self.series(name)[-window:] if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def pooled_sar(self, macro: float, window: int) -> float:
        """Accepted/arrivals for one macro class, pooled over the last ``window`` episodes."""
        arr = acc = 0
        for m in self.metrics[-window:]:
            row = m.by_class.get(macro)
            if row:
                arr += row[0]
                acc += row[1]
        return acc / arr if arr else float("nan")


def run_experiment(
    cfg: PipelineConfig,
    log: Callable[[str], None] | None = None,
    progress: Callable[[EpisodeMetrics], None] | None = None,
) -> ExperimentResult:
    cfg.validate()
    models = build_models(cfg)
    out = []
    for e in range(cfg.episodes):
        if log is not None:
            log(f"# episode {e}")
        mt = run_episode(cfg, models, e, log=log)
        out.append(mt)
        if progress is not None:
            progress(mt)
    return ExperimentResult(out, tuple(cfg.dypr.class_grid))


def starvation_report(metrics: Sequence[EpisodeMetrics], grid: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> dict:
    """Per-class expiry rates and SAR, pooled over the given episodes."""
    totals: dict[float, list[int]] = {}
    for m in metrics:
        for cls, row in m.by_class.items():
            acc = totals.setdefault(cls, [0, 0, 0, 0])
            for i in range(4):
                acc[i] += row[i]
    rates = {}
    for cls in grid:
        arr, ok, _, exp = totals.get(cls, [0, 0, 0, 0])
        rates[cls] = {
            "arrivals": arr,
            "expiry_rate": exp / arr if arr else 0.0,
            "sar": ok / arr if arr else 0.0,
        }
    low = grid[0]
    return {
        "per_class": rates,
        "low_class_sar": rates[low]["sar"],
        "low_class_starvation": rates[low]["expiry_rate"],
    }
