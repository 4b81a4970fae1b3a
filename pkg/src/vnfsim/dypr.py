"""Dynamic prioritization with online ridge regression.

Lifecycle: Observatory (uniform random labels, fill the buffer) -> Train
(fit on random mini-batches) -> Predict, falling back to Train when the
running error drifts past twice the accuracy threshold.

The regression target during self-supervised start-up is a fixed
QoS-stringency score (see :func:`pseudo_target`); it is this package's
operational definition of "appropriate priority", not a learned quantity.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import BadConfig, SingularSystem, WrongMode
from .numkernel import ReplayBuffer
from .workload import SfcRequest

FEATURES = ("delay_ms", "jitter_ms", "packet_loss", "bandwidth", "reliability", "chain_length")


class Mode(Enum):
    OBSERVATORY = "observatory"
    TRAIN = "train"
    PREDICT = "predict"


@dataclass(frozen=True, slots=True)
class PriorityLabel:
    macro: float
    micro: float


@dataclass
class DyPrConfig:
    # min/max used for min-max normalisation of each feature
    ranges: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "delay_ms": (14.0, 26.0),
            "jitter_ms": (2.2, 3.8),
            "packet_loss": (0.006, 0.014),
            "bandwidth": (30.0, 70.0),
            "reliability": (0.9, 0.999),
            "chain_length": (1.0, 6.0),
        }
    )
    class_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    target_weights: tuple[float, float, float, float] = (0.35, 0.30, 0.15, 0.20)
    lam: float = 0.1
    observatory_threshold: int = 200
    batch_size: int = 32
    buffer_capacity: int = 5000
    mae_threshold: float = 0.05
    accuracy_window: int = 50
    check_every: int = 10

    def validate(self) -> None:
        if self.lam <= 0:
            raise BadConfig("dypr.lam must be > 0")
        if self.batch_size < 1 or self.observatory_threshold < self.batch_size:
            raise BadConfig("dypr observatory threshold must cover at least one batch")
        grid = list(self.class_grid)
        if not grid or grid != sorted(grid) or grid[0] <= 0 or grid[-1] != 1.0:
            raise BadConfig("dypr.class_grid must be increasing, positive, ending at 1.0")
        for name in FEATURES:
            lo, hi = self.ranges[name]
            if hi <= lo:
                raise BadConfig(f"dypr range for {name} is empty")


def featurize(sfc: SfcRequest, cfg: DyPrConfig) -> np.ndarray:
    raw = (
        sfc.qos.delay_ms,
        sfc.qos.jitter_ms,
        sfc.qos.packet_loss,
        sfc.qos.bandwidth,
        sfc.reliability,
        float(len(sfc.vnfs)),
    )
    out = np.empty(len(FEATURES))
    for i, (name, value) in enumerate(zip(FEATURES, raw)):
        lo, hi = cfg.ranges[name]
        out[i] = min(1.0, max(0.0, (value - lo) / (hi - lo)))
    return out


def pseudo_target(features: np.ndarray, cfg: DyPrConfig) -> float:
    """QoS-stringency score: tight delay/loss/jitter and high reliability rank high."""
    wd, wp, wj, wr = cfg.target_weights
    delay, jitter, loss, _, rel, _ = features
    score = wd * (1 - delay) + wp * (1 - loss) + wj * (1 - jitter) + wr * rel
    return min(1.0, max(0.0, float(score)))


def quantize_macro(score: float, grid) -> float:
    """Smallest grid value >= score; a score on a boundary stays in the lower class."""
    for g in grid:
        if score <= g + 1e-12:
            return float(g)
    return float(grid[-1])


class RidgeModel:
    """Ridge regression with running Gram/moment accumulators and an unpenalized bias."""

    def __init__(self, n_features: int, lam: float):
        self.n_features = n_features
        self.lam = lam
        d = n_features + 1
        self.gram = np.zeros((d, d))
        self.moment = np.zeros(d)
        self.weights = np.zeros(d)  # last entry is the bias
        self.fitted = False

    def accumulate(self, x: np.ndarray, y: np.ndarray) -> None:
        xa = np.hstack([np.atleast_2d(x), np.ones((np.atleast_2d(x).shape[0], 1))])
        self.gram += xa.T @ xa
        self.moment += xa.T @ np.atleast_1d(y)

    def solve(self) -> np.ndarray:
        reg = self.lam * np.eye(self.n_features + 1)
        reg[-1, -1] = 0.0
        try:
            self.weights = np.linalg.solve(self.gram + reg, self.moment)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from None
        if not np.all(np.isfinite(self.weights)):
            raise SingularSystem("non-finite ridge solution")
        self.fitted = True
        return self.weights

    def score(self, features: np.ndarray) -> float:
        return float(features @ self.weights[:-1] + self.weights[-1])


def predict(model: RidgeModel, features: np.ndarray, grid=(0.25, 0.5, 0.75, 1.0)) -> PriorityLabel:
    s = min(1.0, max(0.0, model.score(features)))
    return PriorityLabel(quantize_macro(s, grid), s)


@dataclass
class DyPrState:
    cfg: DyPrConfig
    mode: Mode = Mode.OBSERVATORY
    buffer: ReplayBuffer = None  # type: ignore[assignment]
    model: RidgeModel = None  # type: ignore[assignment]
    accuracy_window: deque = None  # type: ignore[assignment]
    since_check: int = 0

    def __post_init__(self):
        self.cfg.validate()
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.cfg.buffer_capacity)
        if self.model is None:
            self.model = RidgeModel(len(FEATURES), self.cfg.lam)
        if self.accuracy_window is None:
            self.accuracy_window = deque(maxlen=self.cfg.accuracy_window)


def observe(state: DyPrState, sfc: SfcRequest, rng: np.random.Generator) -> PriorityLabel:
    if state.mode is not Mode.OBSERVATORY:
        raise WrongMode(f"observe called in {state.mode.value} mode")
    grid = state.cfg.class_grid
    label = PriorityLabel(float(grid[int(rng.integers(0, len(grid)))]), float(rng.random()))
    x = featurize(sfc, state.cfg)
    state.buffer.push(x, pseudo_target(x, state.cfg))
    if len(state.buffer) >= state.cfg.observatory_threshold:
        state.mode = Mode.TRAIN
    return label


def fit(state: DyPrState, rng: np.random.Generator) -> RidgeModel:
    if state.mode is not Mode.TRAIN:
        raise WrongMode(f"fit called in {state.mode.value} mode")
    x, y = state.buffer.sample(rng, state.cfg.batch_size)
    state.model.accumulate(x, y)
    state.model.solve()
    return state.model


def check_accuracy(state: DyPrState) -> DyPrState:
    if state.mode is Mode.OBSERVATORY:
        raise WrongMode("accuracy is only tracked once training has started")
    if not state.accuracy_window:
        return state
    mae = float(np.mean(state.accuracy_window))
    thr = state.cfg.mae_threshold
    if state.mode is Mode.TRAIN and mae <= thr:
        state.mode = Mode.PREDICT
    elif state.mode is Mode.PREDICT and mae > 2.0 * thr:
        state.mode = Mode.TRAIN
    return state


def prioritize(state: DyPrState, sfc: SfcRequest, rng: np.random.Generator) -> PriorityLabel:
    """Label one arriving service and advance the lifecycle."""
    if state.mode is Mode.OBSERVATORY:
        return observe(state, sfc, rng)
    x = featurize(sfc, state.cfg)
    target = pseudo_target(x, state.cfg)
    if state.mode is Mode.TRAIN:
        state.buffer.push(x, target)
        fit(state, rng)
    label = predict(state.model, x, state.cfg.class_grid)
    state.accuracy_window.append(abs(label.micro - target))
    state.since_check += 1
    if state.since_check >= state.cfg.check_every:
        state.since_check = 0
        check_accuracy(state)
    return label
