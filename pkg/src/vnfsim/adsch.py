"""Adaptive scheduling: a DDPG actor-critic that ranks each waiting service in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dypr import PriorityLabel
from .errors import InvalidOutcome
from .numkernel import Adam, Mlp, ReplayBuffer, soft_update
from .trafficclass import DemandLabel
from .workload import SfcRequest

STATE_DIM = 5  # waiting_frac, reliability, macro, micro, hd_flag


@dataclass(frozen=True, slots=True)
class SchedState:
    waiting_frac: float
    reliability: float
    macro_priority: float
    micro_priority: float
    hd_flag: float

    def vector(self) -> np.ndarray:
        return np.array(
            [self.waiting_frac, self.reliability, self.macro_priority, self.micro_priority, self.hd_flag]
        )


@dataclass
class RewardWeights:
    priority: float = 1.0
    reliability: float = 0.5
    hd: float = 0.5
    starvation: float = 1.0
    wait_penalty: float = 0.1

    def scaled(self, c: float) -> "RewardWeights":
        # wait_penalty is a ratio on the starvation weight, not a weight itself
        return RewardWeights(c * self.priority, c * self.reliability, c * self.hd, c * self.starvation,
                             self.wait_penalty)


@dataclass
class AdSchConfig:
    gamma: float = 0.9
    tau: float = 0.01
    batch_size: int = 64
    buffer_capacity: int = 50_000
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    sigma: float = 0.2
    sigma_decay: float = 0.999
    sigma_min: float = 0.01
    # penalty on the actor's pre-sigmoid output; keeps ranks off the saturated tails
    logit_penalty: float = 0.1
    updates_per_tick: int = 1
    # ticks between update rounds in the full simulator
    train_interval: int = 2
    reward: RewardWeights = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.reward is None:
            self.reward = RewardWeights()


def build_state(sfc: SfcRequest, now: float, priority: PriorityLabel, hd: DemandLabel | int) -> SchedState:
    wf = (now - sfc.arrival_time) / sfc.twt
    return SchedState(
        min(1.0, max(0.0, wf)),
        float(sfc.reliability),
        float(priority.macro),
        float(priority.micro),
        float(int(hd)),
    )


def scheduling_reward(state: SchedState, deployed: bool, expired: bool, w: RewardWeights | None = None) -> float:
    if deployed and expired:
        raise InvalidOutcome("a service cannot both deploy and expire")
    w = w or RewardWeights()
    wf = state.waiting_frac
    beneficial = 0.0
    if deployed:
        beneficial = (
            w.priority * (state.macro_priority + state.micro_priority) / 2.0
            + w.reliability * state.reliability
            + w.hd * state.hd_flag
        )
    if expired:
        starvation = -(1.0 + wf)
    elif deployed:
        starvation = w.starvation * wf
    else:
        starvation = -w.starvation * wf * w.wait_penalty
    return beneficial + starvation


class DdpgAgent:
    def __init__(self, cfg: AdSchConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.actor = Mlp([STATE_DIM, *cfg.hidden, 1], "relu", "sigmoid", rng)
        self.critic = Mlp([STATE_DIM + 1, *cfg.hidden, 1], "relu", "identity", rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params(), lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params(), lr=cfg.critic_lr)
        self.replay = ReplayBuffer(cfg.buffer_capacity)
        self.sigma = cfg.sigma
        self.updates = 0

    def rank_many(self, states: np.ndarray, explore: bool, rng: np.random.Generator | None) -> np.ndarray:
        out = self.actor.forward(states)[:, 0]
        if explore and self.sigma > 0:
            out = out + rng.normal(0.0, self.sigma, size=out.shape)
        return np.clip(out, 0.0, 1.0)

    def end_episode(self) -> None:
        self.sigma = max(self.cfg.sigma_min, self.sigma * self.cfg.sigma_decay)

    def push(self, s, a, r, s2, done) -> None:
        self.replay.push(s, a, r, s2, float(done))

    def train(self, rng: np.random.Generator) -> tuple[float, float] | None:
        if len(self.replay) < self.cfg.batch_size:
            return None
        return ddpg_update(self, self.replay.sample(rng, self.cfg.batch_size))


def rank(agent: DdpgAgent, state: SchedState, explore: bool = False, rng: np.random.Generator | None = None) -> float:
    return float(agent.rank_many(state.vector()[None, :], explore, rng)[0])


def ddpg_update(agent: DdpgAgent, batch) -> tuple[float, float]:
    """One critic and one actor step, then soft target updates.

    Returns (critic loss before the step, mean Q of the actor's actions).
    """
    s, a, r, s2, done = batch
    a = a.reshape(-1, 1)
    r = r.reshape(-1)
    done = done.reshape(-1)
    cfg = agent.cfg
    n = len(r)

    a2 = agent.actor_target.forward(s2)
    q2 = agent.critic_target.forward(np.hstack([s2, a2]))[:, 0]
    y = r + cfg.gamma * (1.0 - done) * q2

    sa = np.hstack([s, a])
    q, cache = agent.critic.forward_cached(sa)
    err = q[:, 0] - y
    critic_loss = float(np.mean(err * err))
    grads, _ = agent.critic.backward(sa, (2.0 / n) * err[:, None], cache)
    agent.critic_opt.step(grads)

    mu, acache = agent.actor.forward_cached(s)
    sa_mu = np.hstack([s, mu])
    q_mu, qcache = agent.critic.forward_cached(sa_mu)
    _, dq_dsa = agent.critic.backward(sa_mu, np.ones_like(q_mu) / n, qcache)
    dq_da = dq_dsa[:, -1:]
    # logit = log(mu / (1 - mu)); d(logit^2)/d mu = 2 logit / (mu (1 - mu))
    m = np.clip(mu, 1e-9, 1 - 1e-9)
    logit = np.log(m / (1 - m))
    dpen = cfg.logit_penalty * 2.0 * logit / (m * (1 - m)) / n
    agrads, _ = agent.actor.backward(s, -dq_da + dpen, acache)
    agent.actor_opt.step(agrads)

    soft_update(agent.critic_target, agent.critic, cfg.tau)
    soft_update(agent.actor_target, agent.actor, cfg.tau)
    agent.updates += 1
    return critic_loss, float(q_mu.mean())


@dataclass(slots=True)
class QueueEntry:
    sfc: SfcRequest
    state: SchedState
    rank: float


def _order_key(e: QueueEntry):
    return (-e.rank, e.sfc.arrival_time, e.sfc.id)


def schedule(
    agent: DdpgAgent,
    waiting: Sequence[tuple[SfcRequest, PriorityLabel, DemandLabel]],
    now: float,
    explore: bool = False,
    rng: np.random.Generator | None = None,
) -> list[QueueEntry]:
    """Rank every waiting service and sort by (rank desc, arrival, id)."""
    if not waiting:
        return []
    states = [build_state(sfc, now, prio, hd) for sfc, prio, hd in waiting]
    ranks = agent.rank_many(np.array([st.vector() for st in states]), explore, rng)
    entries = [QueueEntry(w[0], st, float(rk)) for w, st, rk in zip(waiting, states, ranks)]
    entries.sort(key=_order_key)
    return entries


# -- stand-alone training environment ---------------------------------------
#
# A capacity-limited waiting room: each tick a few services arrive, the agent
# ranks everyone, and the top ``slots`` are deployed. Services that wait past
# their TWT expire. Used to pre-train and to probe the learned ordering
# without running the full placement stack.


@dataclass
class QueueEnvConfig:
    arrivals_per_tick: float = 2.0
    slots_per_tick: int = 1
    twt_range: tuple[float, float] = (5.0, 30.0)
    grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)


def train_in_queue_env(
    agent: DdpgAgent,
    rng: np.random.Generator,
    ticks: int,
    env: QueueEnvConfig | None = None,
    on_tick: Callable[[int], None] | None = None,
) -> None:
    env = env or QueueEnvConfig()
    w = agent.cfg.reward
    waiting: list[list] = []  # [arrival, twt, reliability, macro, micro, hd]
    for t in range(ticks):
        for _ in range(int(rng.poisson(env.arrivals_per_tick))):
            waiting.append([
                float(t), float(rng.uniform(*env.twt_range)), float(rng.uniform(0.9, 0.999)),
                float(env.grid[int(rng.integers(0, len(env.grid)))]), float(rng.random()),
                float(rng.random() < 0.3),
            ])
        if waiting:
            states = np.array([
                [min(1.0, (t - s[0]) / s[1]), s[2], s[3], s[4], s[5]] for s in waiting
            ])
            acts = agent.rank_many(states, True, rng)
            order = sorted(range(len(waiting)), key=lambda i: (-acts[i], waiting[i][0], i))
            deployed = set(order[: env.slots_per_tick])
            keep = []
            for i, svc in enumerate(waiting):
                st = SchedState(*states[i])
                if i in deployed:
                    agent.push(states[i], acts[i], scheduling_reward(st, True, False, w), states[i], True)
                    continue
                wf_next = (t + 1 - svc[0]) / svc[1]
                nxt = states[i].copy()
                nxt[0] = min(1.0, wf_next)
                if wf_next > 1.0:
                    agent.push(states[i], acts[i], scheduling_reward(SchedState(*nxt), False, True, w), nxt, True)
                else:
                    agent.push(states[i], acts[i], scheduling_reward(st, False, False, w), nxt, False)
                    keep.append(svc)
            waiting = keep
        for _ in range(agent.cfg.updates_per_tick):
            agent.train(rng)
        if on_tick is not None:
            on_tick(t)
