"""Small dense MLP kernels, Adam, target-network maintenance and replay buffers.

Everything is float64 numpy. Shared by the DDPG scheduler and the DDQL placer.
"""
from __future__ import annotations

import copy
from typing import IO, Sequence

import numpy as np

from .errors import ArchitectureMismatch, BufferTooSmall, DimensionMismatch

_HIDDEN = ("relu", "tanh")
_OUTPUT = ("identity", "sigmoid", "tanh")


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows; the clip keeps saturated outputs strictly inside (0, 1)
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), _SIG_LO, _SIG_HI)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at pre-activation ``z`` (output ``a``)."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


class Mlp:
    """Fully connected network; weights are stored as (fan_in, fan_out) matrices."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes!r}")
        if hidden_activation not in _HIDDEN:
            raise ValueError(f"unknown hidden activation {hidden_activation!r}")
        if output_activation not in _OUTPUT:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = [int(n) for n in layer_sizes]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        # one contiguous buffer; weights and biases are views into it
        self.flat = np.empty(sum(a * b + b for a, b in pairs))
        self._bind_views()
        for (fan_in, fan_out), w, b in zip(pairs, self.weights, self.biases):
            bound = 1.0 / np.sqrt(fan_in)
            w[...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b[...] = rng.uniform(-bound, bound, size=fan_out)

    def _bind_views(self) -> None:
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            self.biases.append(self.flat[off:off + fan_out])
            off += fan_out

    def __deepcopy__(self, memo) -> "Mlp":
        new = object.__new__(Mlp)
        new.layer_sizes = list(self.layer_sizes)
        new.hidden_activation = self.hidden_activation
        new.output_activation = self.output_activation
        new.flat = self.flat.copy()
        new._bind_views()
        return new

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order W0, b0, W1, b1, ... (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_size or x.ndim not in (1, 2):
            raise DimensionMismatch(
                f"expected input of width {self.input_size}, got shape {x.shape}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = _activate(self.output_activation if i == last else self.hidden_activation, z)
        return a

    def _forward_cache(self, x: np.ndarray):
        acts = [x]
        pres = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = _activate(self.output_activation if i == last else self.hidden_activation, z)
            pres.append(z)
            acts.append(a)
        return acts, pres

    def forward_cached(self, x):
        """Batched forward pass that also returns the cache :meth:`backward` can reuse."""
        x = self._check_input(x)
        xb = x if x.ndim == 2 else x[None, :]
        cache = self._forward_cache(xb)
        y = cache[0][-1]
        return (y if x.ndim == 2 else y[0]), cache

    def backward(self, x, upstream_grad, cache=None) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``<upstream_grad, forward(x)>``.

        Returns (parameter gradients in :meth:`params` order, gradient w.r.t. x).
        For batched ``x`` the parameter gradients are summed over the batch.
        ``cache`` may come from :meth:`forward_cached` on the same ``x``.
        """
        x = self._check_input(x)
        g = np.asarray(upstream_grad, dtype=np.float64)
        batched = x.ndim == 2
        xb = x if batched else x[None, :]
        gb = g if g.ndim == 2 else g[None, :]
        if gb.shape != (xb.shape[0], self.output_size):
            raise DimensionMismatch(
                f"upstream gradient shape {g.shape} does not match output "
                f"({xb.shape[0]}, {self.output_size})"
            )
        acts, pres = cache if cache is not None else self._forward_cache(xb)
        last = len(self.weights) - 1
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        delta = gb
        for i in range(last, -1, -1):
            name = self.output_activation if i == last else self.hidden_activation
            delta = delta * _activation_grad(name, pres[i], acts[i + 1])
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        dx = delta if batched else delta[0]
        return grads, dx

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden_activation == other.hidden_activation
            and self.output_activation == other.output_activation
        )

    def save(self, fh: IO[str]) -> None:
        save_tensors(fh, self.params())

    def load(self, fh: IO[str]) -> None:
        tensors = load_tensors(fh)
        current = self.params()
        if len(tensors) != len(current) or any(
            t.shape != c.shape for t, c in zip(tensors, current)
        ):
            raise ArchitectureMismatch("checkpoint shapes do not match this network")
        for dst, src in zip(current, tensors):
            dst[...] = src


def forward(mlp: Mlp, x) -> np.ndarray:
    return mlp.forward(x)


def backward(mlp: Mlp, x, upstream_grad):
    return mlp.backward(x, upstream_grad)


class Adam:
    """Adam with bias correction, updating a fixed list of arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        # when the params tile one contiguous buffer, update that buffer in one go
        self._flat = _shared_base(self.params)
        size = sum(p.size for p in self.params)
        self._m = np.zeros(size)
        self._v = np.zeros(size)
        self.m = _split(self._m, self.params)
        self.v = _split(self._v, self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionMismatch("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise DimensionMismatch(f"gradient shape {np.shape(g)} != {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        g = np.concatenate([np.ravel(x) for x in grads])
        m, v = self._m, self._v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        delta = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        if self._flat is not None:
            self._flat -= delta
        else:
            for p, d in zip(self.params, _split(delta, self.params)):
                p -= d


def _split(buf: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, off = [], 0
    for p in like:
        out.append(buf[off:off + p.size].reshape(p.shape))
        off += p.size
    return out


def _shared_base(params: Sequence[np.ndarray]) -> np.ndarray | None:
    """The flat buffer the params exactly tile, in order, if there is one."""
    if not params:
        return None
    base = params[0].base
    if base is None or base.ndim != 1 or not all(p.base is base for p in params):
        return None
    off = 0
    for p in params:
        addr = p.__array_interface__["data"][0] - base.__array_interface__["data"][0]
        if addr != off * base.itemsize or not p.flags.c_contiguous:
            return None
        off += p.size
    return base if off == base.size else None


def adam_step(params, grads, state: Adam) -> Sequence[np.ndarray]:
    """Functional spelling of :meth:`Adam.step`; ``state`` must own ``params``."""
    if any(p is not q for p, q in zip(params, state.params)) or len(params) != len(state.params):
        raise DimensionMismatch("adam state was built for different parameters")
    state.step(grads)
    return params


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    if not target.same_architecture(online):
        raise ArchitectureMismatch("target and online networks differ")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat
    return target


class ReplayBuffer:
    """Ring buffer of fixed-shape transitions stored column-wise.

    Each pushed item is a tuple of array-likes; storage for each field is
    allocated on the first push from that field's shape.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._cols: list[np.ndarray] | None = None
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, *fields) -> None:
        if self._cols is None:
            self._cols = [
                np.zeros((self.capacity,) + np.shape(f), dtype=np.float64) for f in fields
            ]
        elif len(fields) != len(self._cols):
            raise DimensionMismatch("transition arity changed")
        for col, f in zip(self._cols, fields):
            col[self._next] = f
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        # physical slots from oldest to newest
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def items(self) -> list[tuple]:
        if self._cols is None:
            return []
        return [tuple(c[i] for c in self._cols) for i in self._order()]

    def sample(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, ...]:
        if batch_size > self._size or self._cols is None:
            raise BufferTooSmall(f"need {batch_size} transitions, have {self._size}")
        idx = _sample_without_replacement(rng, self._size, batch_size)
        return tuple(c[idx] for c in self._cols)

    def last(self, n: int) -> tuple[np.ndarray, ...]:
        """The ``n`` most recent transitions, oldest first."""
        if self._cols is None or n <= 0:
            return ()
        n = min(n, self._size)
        idx = self._order()[-n:]
        return tuple(c[idx] for c in self._cols)


def _sample_without_replacement(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    if k * 4 >= n:
        return rng.permutation(n)[:k]
    # sparse case: draw with rejection of duplicates (cheap for k << n)
    chosen = rng.integers(0, n, size=k)
    uniq = np.unique(chosen)
    while uniq.size < k:
        extra = rng.integers(0, n, size=k - uniq.size)
        uniq = np.unique(np.concatenate([uniq, extra]))
    # np.unique sorts; shuffle so batch order carries no index bias
    return rng.permutation(uniq)


def buffer_push(buf: ReplayBuffer, *fields) -> None:
    buf.push(*fields)


def buffer_sample(buf: ReplayBuffer, rng: np.random.Generator, batch_size: int):
    return buf.sample(rng, batch_size)


# -- tensor dump -----------------------------------------------------------
#
# Text format, one tensor per block:
#
#   tensor <index> <ndim> <d0> <d1> ...
#   <values, row-major, space separated, repr() precision>
#
# Floats are written with repr(), which round-trips float64 exactly.


def save_tensors(fh: IO[str], tensors: Sequence[np.ndarray]) -> None:
    for i, t in enumerate(tensors):
        t = np.asarray(t, dtype=np.float64)
        fh.write(f"tensor {i} {t.ndim} {' '.join(str(d) for d in t.shape)}\n".replace("  ", " "))
        fh.write(" ".join(repr(float(v)) for v in t.ravel()) + "\n")


def load_tensors(fh: IO[str]) -> list[np.ndarray]:
    out = []
    lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) % 2:
        raise ValueError("truncated tensor dump")
    for header, body in zip(lines[0::2], lines[1::2]):
        parts = header.split()
        if parts[0] != "tensor":
            raise ValueError(f"bad tensor header {header!r}")
        ndim = int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        values = np.array([float(v) for v in body.split()], dtype=np.float64)
        out.append(values.reshape(shape))
    return out
