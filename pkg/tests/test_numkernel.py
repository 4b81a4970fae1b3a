import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnfsim import numkernel
from vnfsim.errors import ArchitectureMismatch, BufferTooSmall, DimensionMismatch
from vnfsim.numkernel import Adam, Mlp, ReplayBuffer
from vnfsim.selftest import ACTIVATION_COMBOS, gradient_error


def test_zero_weights_give_final_bias():
    net = Mlp([3, 4, 2], "relu", "identity")
    for w in net.weights:
        w[...] = 0.0
    net.biases[-1][...] = [0.3, -1.2]
    assert np.allclose(net.forward(np.array([1.0, 2.0, 3.0])), [0.3, -1.2])


def test_one_by_one_arithmetic():
    net = Mlp([1, 1], output_activation="identity")
    net.weights[0][...] = 2.0
    net.biases[0][...] = 1.0
    assert net.forward(np.array([3.0])) == pytest.approx([7.0])
    _, dx = net.backward(np.array([3.0]), np.array([1.0]))
    assert dx[0] == 2.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_sigmoid_head_in_open_interval(seed, scale):
    rng = np.random.default_rng(seed)
    net = Mlp([4, 8, 3], "tanh", "sigmoid", rng)
    y = net.forward(rng.normal(size=(5, 4)) * scale)
    assert np.all((y > 0) & (y < 1))


def test_dimension_mismatch():
    net = Mlp([3, 2])
    with pytest.raises(DimensionMismatch):
        net.forward(np.zeros(4))
    with pytest.raises(DimensionMismatch):
        net.backward(np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("combo", range(len(ACTIVATION_COMBOS)))
def test_finite_difference_gradients(combo):
    hidden, output = ACTIVATION_COMBOS[combo]
    rng = np.random.default_rng(combo)
    for _ in range(5):
        net = Mlp([3, 5, 4, 2], hidden, output, rng)
        x = rng.normal(size=(4, 3))
        up = rng.normal(size=(4, 2))
        assert gradient_error(net, x, up, h=1e-5) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(0)
    net = Mlp([3, 5, 2], "tanh", "sigmoid", rng)
    grads, dx = net.backward(rng.normal(size=3), np.zeros(2))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_batched_gradients_are_sums():
    rng = np.random.default_rng(1)
    net = Mlp([3, 4, 2], "relu", "tanh", rng)
    x = rng.normal(size=(6, 3))
    up = rng.normal(size=(6, 2))
    batch, _ = net.backward(x, up)
    single = [net.backward(x[i], up[i])[0] for i in range(6)]
    for j, g in enumerate(batch):
        assert np.allclose(g, sum(s[j] for s in single))


def test_adam_examples():
    p = np.array([1.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([0.0])])
    assert p[0] == 1.0
    opt = Adam([p], lr=0.1)
    opt.step([np.array([1.0])])
    assert p[0] == pytest.approx(0.9, abs=1e-7)
    w = np.array([0.0])
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.step([2 * (w - 3.0)])
    assert abs(w[0] - 3.0) < 0.05


def test_adam_flat_and_list_paths_agree():
    rng = np.random.default_rng(2)
    net = Mlp([3, 4, 2], rng=rng)
    loose = [p.copy() for p in net.params()]
    a, b = Adam(net.params(), lr=0.01), Adam(loose, lr=0.01)
    assert a._flat is net.flat and b._flat is None
    for _ in range(5):
        grads = [rng.normal(size=p.shape) for p in loose]
        a.step(grads)
        b.step(grads)
    for p, q in zip(net.params(), loose):
        assert np.allclose(p, q, atol=1e-14)


def test_adam_step_functional_and_mismatch():
    p = [np.zeros(2)]
    state = Adam(p, lr=0.1)
    numkernel.adam_step(p, [np.ones(2)], state)
    assert np.allclose(p[0], -0.1)
    with pytest.raises(DimensionMismatch):
        state.step([np.ones(3)])


def test_soft_update_examples():
    a, b = Mlp([2, 3, 1]), Mlp([2, 3, 1], rng=np.random.default_rng(5))
    t = a.copy()
    numkernel.soft_update(t, b, 0.0)
    assert np.array_equal(t.flat, a.flat)
    numkernel.soft_update(t, b, 1.0)
    assert np.array_equal(t.flat, b.flat)
    t.flat[...] = 0.0
    b2 = b.copy()
    b2.flat[...] = 2.0
    numkernel.soft_update(t, b2, 0.5)
    assert np.all(t.flat == 1.0)
    with pytest.raises(ArchitectureMismatch):
        numkernel.soft_update(Mlp([2, 1]), Mlp([3, 1]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 100))
def test_soft_update_contracts(tau, seed):
    rng = np.random.default_rng(seed)
    t, o = Mlp([3, 4, 2], rng=rng), Mlp([3, 4, 2], rng=rng)
    d0 = np.linalg.norm(t.flat - o.flat)
    numkernel.soft_update(t, o, tau)
    assert np.linalg.norm(t.flat - o.flat) <= d0 + 1e-12


def test_copy_is_independent():
    net = Mlp([2, 2])
    c = net.copy()
    c.weights[0][0, 0] += 1.0
    assert net.weights[0][0, 0] != c.weights[0][0, 0]
    assert np.shares_memory(c.weights[0], c.flat)


def test_buffer_ring_and_permutation():
    buf = ReplayBuffer(3)
    for i in range(4):
        buf.push(float(i), np.array([i, i]))
    assert len(buf) == 3
    assert [x[0] for x in buf.items()] == [1.0, 2.0, 3.0]
    (vals, _) = buf.sample(np.random.default_rng(0), 3)
    assert sorted(vals.tolist()) == [1.0, 2.0, 3.0]
    with pytest.raises(BufferTooSmall):
        buf.sample(np.random.default_rng(0), 4)


@pytest.mark.parametrize("batch", [5, 40])
def test_buffer_sampling_uniform(batch):
    n = 50
    buf = ReplayBuffer(n)
    for i in range(n):
        buf.push(float(i))
    rng = np.random.default_rng(3)
    counts = np.zeros(n)
    draws = 10_000
    for _ in range(draws // batch):
        (idx,) = buf.sample(rng, batch)
        assert len(set(idx.tolist())) == batch
        counts[idx.astype(int)] += 1
    total = counts.sum()
    expected = total / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 49 degrees of freedom; mean 49, sd ~9.9
    assert chi2 < 49 + 3 * 9.9


def test_tensor_dump_round_trip_and_format():
    rng = np.random.default_rng(4)
    net = Mlp([3, 4, 2], rng=rng)
    fh = io.StringIO()
    net.save(fh)
    text = fh.getvalue()
    assert text.splitlines()[0] == "tensor 0 2 3 4"
    other = Mlp([3, 4, 2], rng=np.random.default_rng(9))
    other.load(io.StringIO(text))
    assert np.array_equal(other.flat, net.flat)
    with pytest.raises(ArchitectureMismatch):
        Mlp([3, 5, 2]).load(io.StringIO(text))


def test_kernels_deterministic():
    def run():
        rng = np.random.default_rng(11)
        net = Mlp([3, 8, 1], "relu", "sigmoid", rng)
        opt = Adam(net.params())
        x = rng.normal(size=(16, 3))
        for _ in range(10):
            g, _ = net.backward(x, net.forward(x) - 0.5)
            opt.step(g)
        return net.flat.copy()
    assert np.array_equal(run(), run())
