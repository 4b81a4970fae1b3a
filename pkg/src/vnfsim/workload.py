"""Stochastic SFC request generation and traffic-load profiles."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig

VNF_KINDS = (
    "wan-optimizer",
    "edge-firewall",
    "monitor",
    "app-firewall",
    "load-balancer",
)

# Kinds whose decomposition yields the reusable "read from NIC" / "parse header"
# micro-functions, in the order they sit at the head of the VNF.
SHARED_TEMPLATE = {
    "wan-optimizer": ("shared-reader", "shared-parser"),
    "edge-firewall": ("shared-reader", "shared-parser"),
    "monitor": ("shared-reader",),
    "app-firewall": ("shared-parser",),
    "load-balancer": (),
}


@dataclass(frozen=True, slots=True)
class VnfSpec:
    cpu_demand: int
    kind: str = "monitor"


@dataclass(frozen=True, slots=True)
class QosSpec:
    delay_ms: float
    jitter_ms: float
    packet_loss: float
    bandwidth: float


@dataclass(frozen=True, slots=True)
class TrafficProfile:
    base_load: float
    amplitude: float
    period: float
    phase: float = 0.0
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class SfcRequest:
    id: int
    vnfs: tuple[VnfSpec, ...]
    qos: QosSpec
    arrival_time: float
    lifetime: float
    twt: float
    reliability: float
    popularity: float
    traffic_profile: TrafficProfile
    # environment-side truth, never shown to the agents
    hd_truth: bool = False

    @property
    def cpu_demand(self) -> int:
        return sum(v.cpu_demand for v in self.vnfs)


@dataclass
class GaussianField:
    mean: float
    sigma: float
    low: float
    high: float

    def draw(self, rng: np.random.Generator) -> float:
        return float(np.clip(rng.normal(self.mean, self.sigma), self.low, self.high))


@dataclass
class WorkloadConfig:
    rate: float = 1.0
    max_services: int = 100
    horizon: float = 200.0
    chain_min: int = 2
    chain_max: int = 4
    er_p: float = 0.3
    cpu_mean: float = 5.0
    cpu_sigma: float = 2.0
    delay: GaussianField = field(default_factory=lambda: GaussianField(20.0, 8.0, 1.0, 60.0))
    jitter: GaussianField = field(default_factory=lambda: GaussianField(3.0, 1.0, 0.0, 10.0))
    loss: GaussianField = field(default_factory=lambda: GaussianField(0.01, 0.005, 0.0, 1.0))
    bandwidth: GaussianField = field(default_factory=lambda: GaussianField(50.0, 15.0, 1.0, 200.0))
    twt_min: float = 5.0
    twt_max: float = 30.0
    lifetime_mean: float = 200.0
    reliability_min: float = 0.9
    reliability_max: float = 0.999
    # high-demand services are a distinct, popular, heavily loaded population
    hd_fraction: float = 0.3
    popularity_mu_hd: float = 1.5
    popularity_mu_nhd: float = 0.0
    popularity_sigma: float = 0.5
    base_load_hd: tuple[float, float] = (0.55, 0.75)
    base_load_nhd: tuple[float, float] = (0.05, 0.30)
    amplitude_max: float = 0.25
    period_range: tuple[float, float] = (20.0, 120.0)
    noise_sigma: float = 0.02
    hd_percentile: float = 70.0

    def validate(self) -> None:
        if self.rate <= 0:
            raise BadConfig("workload.rate must be > 0")
        if self.max_services < 1:
            raise BadConfig("workload.max_services must be >= 1")
        if self.chain_min < 1 or self.chain_min > self.chain_max:
            raise BadConfig("workload chain length bounds are inconsistent")
        if not 0.0 <= self.er_p <= 1.0:
            raise BadConfig("workload.er_p must lie in [0, 1]")
        if self.horizon < 0:
            raise BadConfig("workload.horizon must be >= 0")
        if not 0 < self.twt_min <= self.twt_max:
            raise BadConfig("workload TWT bounds are inconsistent")
        if self.lifetime_mean <= 0:
            raise BadConfig("workload.lifetime_mean must be > 0")


# -- chains ------------------------------------------------------------------

def er_graph(rng: np.random.Generator, n: int, p: float) -> list[tuple[int, int]]:
    """Directed acyclic Erdős–Rényi graph: edge i->j (i<j) with probability p."""
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j))
    return edges


def linearize(n: int, edges: list[tuple[int, int]]) -> list[int]:
    """Deterministic DFS topological order of the sampled dependency graph."""
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    indeg = [0] * n
    for a, b in edges:
        children[a].append(b)
        indeg[b] += 1
    order: list[int] = []
    seen = set()

    def visit(u: int) -> None:
        seen.add(u)
        for v in sorted(children[u], reverse=True):
            if v not in seen:
                visit(v)
        order.append(u)

    for root in sorted((i for i in range(n) if indeg[i] == 0), reverse=True):
        if root not in seen:
            visit(root)
    order.reverse()
    return order


def generate_chain(rng: np.random.Generator, cfg: WorkloadConfig) -> list[VnfSpec]:
    if cfg.chain_min < 1 or cfg.chain_min > cfg.chain_max:
        raise BadConfig("chain_min must satisfy 1 <= chain_min <= chain_max")
    if not 0.0 <= cfg.er_p <= 1.0:
        raise BadConfig("er_p must lie in [0, 1]")
    n = int(rng.integers(cfg.chain_min, cfg.chain_max + 1))
    edges = er_graph(rng, n, cfg.er_p)
    kinds = [VNF_KINDS[int(k)] for k in rng.integers(0, len(VNF_KINDS), size=n)]
    demands = [max(1, int(round(rng.normal(cfg.cpu_mean, cfg.cpu_sigma)))) for _ in range(n)]
    return [VnfSpec(demands[i], kinds[i]) for i in linearize(n, edges)]


# -- traffic ------------------------------------------------------------------

def load_at(profile: TrafficProfile, t: float, rng: np.random.Generator | None = None) -> float:
    value = profile.base_load + profile.amplitude * (
        1.0 + math.sin(2.0 * math.pi * t / profile.period + profile.phase)
    ) / 2.0
    if profile.noise_sigma > 0 and rng is not None:
        value += rng.normal(0.0, profile.noise_sigma)
    return min(1.0, max(0.0, value))


@functools.lru_cache(maxsize=4096)
def cumulative_load(profile: TrafficProfile, t0: float, t1: float, dt: float) -> float:
    """Left Riemann sum of the noise-free load on [t0, t1]."""
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    total = 0.0
    t = t0
    while t < t1 - 1e-12:
        step = min(dt, t1 - t)
        total += load_at(profile, t) * step
        t += step
    return total


@functools.lru_cache(maxsize=4096)
def profile_stats(profile: TrafficProfile, samples: int = 64) -> tuple[float, float]:
    """(mean, peak) of the noise-free load over one period."""
    ts = np.arange(samples) * profile.period / samples
    vals = profile.base_load + profile.amplitude * (
        1.0 + np.sin(2.0 * np.pi * ts / profile.period + profile.phase)) / 2.0
    vals = np.clip(vals, 0.0, 1.0)
    return float(np.mean(vals)), float(np.max(vals))


def generate_profile(rng: np.random.Generator, cfg: WorkloadConfig, hd: bool) -> TrafficProfile:
    lo, hi = cfg.base_load_hd if hd else cfg.base_load_nhd
    base = float(rng.uniform(lo, hi))
    amplitude = float(rng.uniform(0.0, min(cfg.amplitude_max, 1.0 - base)))
    period = float(rng.uniform(*cfg.period_range))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    return TrafficProfile(base, amplitude, period, phase, cfg.noise_sigma)


# -- arrivals -----------------------------------------------------------------

def _draw_request(rng: np.random.Generator, cfg: WorkloadConfig, sid: int, t: float) -> SfcRequest:
    chain = tuple(generate_chain(rng, cfg))
    qos = QosSpec(
        cfg.delay.draw(rng), cfg.jitter.draw(rng), cfg.loss.draw(rng), cfg.bandwidth.draw(rng)
    )
    hd_component = bool(rng.random() < cfg.hd_fraction)
    mu = cfg.popularity_mu_hd if hd_component else cfg.popularity_mu_nhd
    popularity = float(rng.lognormal(mu, cfg.popularity_sigma))
    profile = generate_profile(rng, cfg, hd_component)
    return SfcRequest(
        id=sid,
        vnfs=chain,
        qos=qos,
        arrival_time=t,
        lifetime=float(rng.exponential(cfg.lifetime_mean)) + 1e-6,
        twt=float(rng.uniform(cfg.twt_min, cfg.twt_max)),
        reliability=float(rng.uniform(cfg.reliability_min, cfg.reliability_max)),
        popularity=popularity,
        traffic_profile=profile,
    )


def demand_score(req: SfcRequest) -> float:
    """Popularity-weighted mean load; the ground-truth demand ranking."""
    return req.popularity * profile_stats(req.traffic_profile)[0]


def label_ground_truth(requests: list[SfcRequest], percentile: float) -> list[SfcRequest]:
    if not requests:
        return []
    scores = np.array([demand_score(r) for r in requests])
    cut = float(np.percentile(scores, percentile))
    return [_with_truth(r, s > cut) for r, s in zip(requests, scores)]


def _with_truth(req: SfcRequest, hd: bool) -> SfcRequest:
    return SfcRequest(
        req.id, req.vnfs, req.qos, req.arrival_time, req.lifetime, req.twt,
        req.reliability, req.popularity, req.traffic_profile, hd,
    )


def generate_arrivals(
    rng: np.random.Generator, cfg: WorkloadConfig, horizon: float | None = None, first_id: int = 0
) -> list[SfcRequest]:
    """Poisson arrival stream on [0, horizon), capped at ``cfg.max_services``.

    Ground-truth HD flags use the percentile cut over this stream.
    """
    cfg.validate()
    horizon = cfg.horizon if horizon is None else horizon
    out: list[SfcRequest] = []
    t = 0.0
    while len(out) < cfg.max_services:
        t += float(rng.exponential(1.0 / cfg.rate))
        if t >= horizon:
            break
        out.append(_draw_request(rng, cfg, first_id + len(out), t))
    return label_ground_truth(out, cfg.hd_percentile)
