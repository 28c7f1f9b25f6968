import json

import numpy as np
import pytest

from rwacert import nn
from rwacert.nn import GradientSet, Mlp, NetworkFormatError


def hand_forward(net, x):
    """Independent oracle: explicit loops, no shared code with nn.forward."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for i in range(w.shape[0]):
            acc = b[i]
            for j in range(w.shape[1]):
                acc += w[i, j] * h[j]
            if layer != len(net.weights) - 1:
                acc = max(acc, 0.0)
            out.append(acc)
        h = out
    return np.array(h)


class TestForward:
    def test_zero_weights_return_output_bias(self):
        net = Mlp(
            (np.zeros((3, 2)), np.zeros((1, 3))),
            (np.zeros(3), np.array([4.5])),
        )
        for x in ([0.0, 0.0], [3.0, -7.0], [1e6, 2.0]):
            assert nn.forward(net, x)[0] == 4.5

    def test_identity_layer_is_relu(self):
        net = Mlp((np.eye(2), np.eye(2)), (np.zeros(2), np.zeros(2)))
        out = nn.forward(net, [2.0, -3.0])
        # hidden relu clamps the negative component before the linear output
        assert np.allclose(out, [2.0, 0.0])

    def test_matches_hand_rolled_oracle(self):
        net = nn.init([4, 8, 1], seed=11)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=4)
            assert np.allclose(nn.forward(net, x), hand_forward(net, x), atol=1e-12)

    def test_batched_matches_single(self):
        net = nn.init([4, 8, 8, 2], seed=3)
        xs = np.random.default_rng(1).normal(size=(5, 4))
        batch = nn.forward(net, xs)
        for i, x in enumerate(xs):
            assert np.allclose(batch[i], nn.forward(net, x))

    def test_shape_mismatch_raises(self):
        net = nn.init([4, 8, 1], seed=0)
        with pytest.raises(ValueError):
            nn.forward(net, [1.0, 2.0])

    def test_piecewise_linear_along_rays(self):
        # f(x + t d) must be linear between activation-pattern changes
        net = nn.init([3, 10, 10, 1], seed=7)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=3)
            d = rng.normal(size=3)
            ts = np.linspace(0, 1e-4, 5)  # small enough to stay on one piece
            vals = np.array([nn.forward(net, x + t * d)[0] for t in ts])
            second_diff = np.diff(vals, 2)
            assert np.all(np.abs(second_diff) < 1e-12)


class TestGradients:
    def test_matches_central_differences(self):
        net = nn.init([4, 8, 8, 1], seed=5)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 4))
        adj = rng.normal(size=(6, 1))

        def loss(candidate):
            return float(np.sum(nn.forward(candidate, x) * adj))

        _, trace = nn.forward_trace(net, x)
        grads, _ = nn.gradients(net, trace, adj)
        h = 1e-5
        checked = 0
        for li in range(len(net.weights)):
            for idx in [(0, 0), (1, 2), (3, 1)]:
                if idx[0] >= net.weights[li].shape[0] or idx[1] >= net.weights[li].shape[1]:
                    continue
                ws = [w.copy() for w in net.weights]
                ws[li][idx] += h
                up = loss(Mlp(tuple(ws), net.biases))
                ws[li][idx] -= 2 * h
                down = loss(Mlp(tuple(ws), net.biases))
                fd = (up - down) / (2 * h)
                an = grads.weights[li][idx]
                assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd)), (li, idx)
                checked += 1
        assert checked >= 6

    def test_zero_adjoint_zero_gradients(self):
        net = nn.init([3, 6, 1], seed=1)
        x = np.ones((4, 3))
        _, trace = nn.forward_trace(net, x)
        grads, input_adj = nn.gradients(net, trace, np.zeros((4, 1)))
        assert all(np.all(g == 0) for g in grads.weights)
        assert all(np.all(g == 0) for g in grads.biases)
        assert np.all(input_adj == 0)

    def test_adjoint_linearity(self):
        net = nn.init([3, 6, 2], seed=2)
        x = np.random.default_rng(3).normal(size=(5, 3))
        adj = np.random.default_rng(4).normal(size=(5, 2))
        _, trace = nn.forward_trace(net, x)
        g1, _ = nn.gradients(net, trace, adj)
        g3, _ = nn.gradients(net, trace, 3.0 * adj)
        for a, b in zip(g1.weights + g1.biases, g3.weights + g3.biases):
            assert np.allclose(3.0 * a, b)

    def test_requires_recorded_trace(self):
        net = nn.init([3, 6, 1], seed=1)
        with pytest.raises(ValueError):
            nn.gradients(net, None, np.zeros((1, 1)))

    def test_relu_subgradient_at_zero_is_zero(self):
        # single neuron sitting exactly at zero pre-activation
        net = Mlp((np.array([[1.0]]), np.array([[1.0]])), (np.zeros(1), np.zeros(1)))
        _, trace = nn.forward_trace(net, np.array([[0.0]]))
        grads, input_adj = nn.gradients(net, trace, np.array([[1.0]]))
        assert input_adj[0, 0] == 0.0


class TestInit:
    def test_seed_determinism(self):
        a = nn.init([4, 20, 20, 2], seed=42)
        b = nn.init([4, 20, 20, 2], seed=42)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_different_seeds_differ(self):
        a = nn.init([4, 20, 2], seed=1)
        b = nn.init([4, 20, 2], seed=2)
        assert not all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_kaiming_bound(self):
        net = nn.init([7, 40, 40, 3], seed=0)
        for w in net.weights:
            bound = np.sqrt(6.0 / w.shape[1])
            assert np.all(np.abs(w) <= bound)
        assert all(np.all(b == 0) for b in net.biases)

    def test_requires_hidden_layer(self):
        with pytest.raises(ValueError):
            nn.init([4, 2], seed=0)


class TestSgdStep:
    def test_zero_lr_is_identity(self):
        net = nn.init([3, 5, 1], seed=0)
        grads = GradientSet(
            tuple(np.ones_like(w) for w in net.weights),
            tuple(np.ones_like(b) for b in net.biases),
        )
        out = nn.sgd_step(net, grads, 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(out.weights, net.weights))

    def test_steps_compose_additively(self):
        net = nn.init([3, 5, 1], seed=0)
        grads = GradientSet(
            tuple(np.full_like(w, 0.5) for w in net.weights),
            tuple(np.full_like(b, 0.5) for b in net.biases),
        )
        two_small = nn.sgd_step(nn.sgd_step(net, grads, 0.1), grads, 0.1)
        one_big = nn.sgd_step(net, grads, 0.2)
        for a, b in zip(two_small.weights, one_big.weights):
            assert np.allclose(a, b)

    def test_descends_scalar_quadratic(self):
        # loss = (f(x0) - 3)^2 at one point; oracle: value must drop
        net = nn.init([2, 4, 1], seed=8)
        x = np.array([[1.0, -1.0]])

        def loss(candidate):
            return float((nn.forward(candidate, x)[0, 0] - 3.0) ** 2)

        _, trace = nn.forward_trace(net, x)
        resid = nn.forward(net, x) - 3.0
        grads, _ = nn.gradients(net, trace, 2.0 * resid)
        assert loss(nn.sgd_step(net, grads, 0.01)) < loss(net)

    def test_shape_mismatch_rejected(self):
        net = nn.init([3, 5, 1], seed=0)
        other = nn.init([3, 6, 1], seed=0)
        grads = GradientSet.zeros_like(other)
        with pytest.raises(ValueError):
            nn.sgd_step(net, grads, 0.1)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = nn.init([4, 20, 20, 2], seed=13)
        path = tmp_path / "net.json"
        nn.save(net, path)
        loaded = nn.load(path)
        assert all(np.array_equal(a, b) for a, b in zip(net.weights, loaded.weights))
        assert all(np.array_equal(a, b) for a, b in zip(net.biases, loaded.biases))
        x = np.random.default_rng(0).normal(size=(10, 4))
        assert np.array_equal(nn.forward(net, x), nn.forward(loaded, x))

    def test_truncated_file_rejected(self, tmp_path):
        net = nn.init([4, 8, 1], seed=0)
        path = tmp_path / "net.json"
        nn.save(net, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(NetworkFormatError):
            nn.load(path)

    def test_inconsistent_sizes_rejected(self, tmp_path):
        net = nn.init([4, 8, 1], seed=0)
        doc = nn.to_dict(net)
        doc["layer_sizes"] = [4, 9, 1]
        path = tmp_path / "net.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(NetworkFormatError):
            nn.load(path)
