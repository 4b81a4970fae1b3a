"""Fast oracle checks over the numeric kernels, runnable from the command line."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dypr, netmodel, placement, trafficclass
from .numkernel import Mlp

ACTIVATION_COMBOS = [(h, o) for h in ("relu", "tanh") for o in ("identity", "sigmoid", "tanh")]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def gradient_error(net: Mlp, x: np.ndarray, upstream: np.ndarray, h: float = 1e-6) -> float:
    """Largest relative error between backward() and central differences.

    The scalar under test is ``sum(upstream * forward(x))``; both parameter
    and input gradients are compared.
    """
    grads, dx = net.backward(x, upstream)

    def objective() -> float:
        return float(np.sum(upstream * net.forward(x)))

    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            worst = max(worst, _rel((up - down) / (2 * h), gflat[i]))
    xf = x.reshape(-1)
    dxf = np.asarray(dx).reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        up = objective()
        xf[i] = old - h
        down = objective()
        xf[i] = old
        worst = max(worst, _rel((up - down) / (2 * h), dxf[i]))
    return worst


def _rel(numeric: float, analytic: float) -> float:
    return abs(numeric - analytic) / max(1e-6, abs(numeric) + abs(analytic))


def random_net(rng: np.random.Generator, hidden: str, output: str) -> Mlp:
    sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3)))]
    sizes.append(int(rng.integers(1, 4)))
    return Mlp(sizes, hidden, output, rng)


def check_gradients(nets_per_combo: int = 20, seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for hidden, output in ACTIVATION_COMBOS:
        for _ in range(nets_per_combo):
            net = random_net(rng, hidden, output)
            x = rng.normal(size=(3, net.input_size))
            up = rng.normal(size=(3, net.output_size))
            worst = max(worst, gradient_error(net, x, up))
    return worst < tol, f"max relative error {worst:.2e} (tol {tol:g})"


def dense_ridge(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Normal-equation solution with an unpenalized trailing bias."""
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    reg = lam * np.eye(xa.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(xa.T @ xa + reg, xa.T @ y)


def ridge_via_fit(x: np.ndarray, y: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Fit through the DyPr lifecycle with a batch that covers the whole buffer."""
    n = x.shape[0]
    cfg = dypr.DyPrConfig(lam=lam, batch_size=n, observatory_threshold=n, buffer_capacity=n)
    state = dypr.DyPrState(cfg)
    for xi, yi in zip(x, y):
        state.buffer.push(xi, yi)
    state.mode = dypr.Mode.TRAIN
    return dypr.fit(state, rng).weights


def check_ridge(datasets: int = 20, seed: int = 0, tol: float = 1e-6) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(datasets):
        x = rng.random((50, len(dypr.FEATURES)))
        y = x @ rng.normal(size=x.shape[1]) + 0.1 * rng.normal(size=50)
        for lam in (0.01, 0.1, 1.0):
            got = ridge_via_fit(x, y, lam, rng)
            worst = max(worst, float(np.max(np.abs(got - dense_ridge(x, y, lam)))))
    return worst < tol, f"max abs deviation {worst:.2e} (tol {tol:g})"


def gi_formula(demand: int, nai: float) -> int:
    size = max(1, math.floor(nai * demand))
    return math.ceil(demand / size)


def check_gi_table() -> tuple[bool, str]:
    bad = 0
    for demand in range(1, 65):
        prev = None
        for k in range(1, 21):
            nai = round(0.05 * k, 2)
            gi = placement.granularity_index(demand, nai)
            if gi != gi_formula(demand, nai) or (prev is not None and gi > prev):
                bad += 1
            prev = gi
    return bad == 0, f"{bad} mismatching cells of {64 * 20}"


def check_nai_bounds(steps: int = 500, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    net = netmodel.load_topology("netrail")
    held: list[tuple[int, int]] = []
    for _ in range(steps):
        if held and rng.random() < 0.4:
            node, cores = held.pop(int(rng.integers(0, len(held))))
            netmodel.release_cpu(net, node, cores)
        else:
            node = int(rng.integers(0, len(net.nodes)))
            cores = int(rng.integers(1, 20))
            if net.node(node).cpu_available >= cores:
                netmodel.allocate_cpu(net, node, cores)
                held.append((node, cores))
        nai = netmodel.network_availability_index(net)
        if not 0.0 <= nai <= 1.0:
            return False, f"NAI {nai} left [0, 1]"
        used = sum(c for _, c in held)
        if net.total_cpu_available != net.total_cpu_capacity - used:
            return False, "CPU ledger drifted from the allocation record"
    return True, f"{steps} random allocate/release steps"


def check_kmeans(datasets: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for i in range(datasets):
        n = int(rng.integers(10, 60))
        pts = rng.normal(size=(n, int(rng.integers(1, 4))))
        hist: list[float] = []
        trafficclass.kmeans(pts, int(rng.integers(1, 5)), rng, history=hist)
        if any(b > a + 1e-9 for a, b in zip(hist, hist[1:])):
            return False, f"WCSS increased on dataset {i}"
    return True, f"WCSS non-increasing on {datasets} datasets"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("gradient-check", check_gradients),
    ("ridge-normal-equations", check_ridge),
    ("granularity-index-table", check_gi_table),
    ("nai-bounds", check_nai_bounds),
    ("kmeans-wcss-monotone", check_kmeans),
]


def run_selftest(emit: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, ok, detail, time.perf_counter() - t0)
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{res.seconds:.2f}s]")
        results.append(res)
    return results
