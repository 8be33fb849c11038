"""
Unit tests for the layer kernels
Tests forward definitions and input gradients of every layer in src/layers.py
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.layers import BN_EPS, BatchNorm, Conv2D, Dense, Flatten, MaxPool2, ReLU


def numeric_input_grad(layer, x, params, upstream, h=1e-5):
    """Central differences of sum(upstream * layer(x)) with respect to x."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        out_plus = layer.forward(plus.reshape(x.shape), params, {}, True)[0]
        out_minus = layer.forward(minus.reshape(x.shape), params, {}, True)[0]
        grad.ravel()[i] = (np.sum(upstream * out_plus) - np.sum(upstream * out_minus)) / (2 * h)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


class TestBatchNorm:
    """Test suite for BatchNorm"""

    @pytest.fixture
    def layer(self):
        """A BN layer over one feature"""
        return BatchNorm("bn1", (1,), (1,))

    # Tests for forward()
    def test_two_sample_batch(self, layer):
        """Test that inputs {1, 3} normalise to about {-1, +1}"""
        params = layer.init_params(np.random.default_rng(0))
        out, _, stats = layer.forward(np.array([[1.0], [3.0]]), params, layer.init_buffers(), True)

        expected = np.array([[-1.0], [1.0]]) / np.sqrt(1.0 + BN_EPS)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
        assert stats["mean"][0] == 2.0
        assert stats["var"][0] == 1.0

    def test_constant_batch_gives_beta(self, layer):
        """Test that a constant batch maps to beta everywhere"""
        params = {"bn1.gamma": np.array([2.0]), "bn1.beta": np.array([0.5])}
        out, _, _ = layer.forward(np.full((4, 1), 3.0), params, layer.init_buffers(), True)

        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_train_output_is_standardised(self):
        """Test per-channel batch mean 0 and variance var / (var + eps) for a 4-D input"""
        layer = BatchNorm("bn1", (3, 4, 4), (3, 4, 4))
        rng = np.random.default_rng(1)
        x = rng.normal(2.0, 3.0, size=(5, 3, 4, 4))
        params = layer.init_params(rng)
        out, _, stats = layer.forward(x, params, layer.init_buffers(), True)

        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-9)
        expected = stats["var"] / (stats["var"] + BN_EPS)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), expected, atol=1e-9)

    def test_infer_mode_uses_running_buffers(self, layer):
        """Test that inference normalises with the running statistics"""
        params = layer.init_params(np.random.default_rng(0))
        buffers = {"bn1.running_mean": np.array([1.0]), "bn1.running_var": np.array([4.0])}
        out, _, stats = layer.forward(np.array([[5.0]]), params, buffers, False)

        assert stats is None
        assert out[0, 0] == pytest.approx(4.0 / np.sqrt(4.0 + BN_EPS), abs=1e-12)

    # Tests for update_running()
    def test_running_update_uses_unbiased_variance(self, layer):
        """Test the momentum update with the N-1 variance"""
        buffers = layer.init_buffers()
        stats = {"mean": np.array([2.0]), "var": np.array([1.0]), "count": 2}
        updated = layer.update_running(buffers, stats, momentum=0.1)

        assert updated["bn1.running_mean"][0] == pytest.approx(0.2)
        assert updated["bn1.running_var"][0] == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)

    # Tests for backward()
    def test_input_gradient(self):
        """Test the full BN backward against finite differences"""
        layer = BatchNorm("bn1", (2, 3, 3), (2, 3, 3))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 3, 3))
        params = {"bn1.gamma": rng.normal(size=2), "bn1.beta": rng.normal(size=2)}
        upstream = rng.normal(size=x.shape)
        _, cache, _ = layer.forward(x, params, {}, True)
        dx, _ = layer.backward(upstream, cache, params)

        assert relative_error(dx, numeric_input_grad(layer, x, params, upstream)) < 1e-6


class TestConv2D:
    """Test suite for Conv2D"""

    @pytest.fixture
    def setup(self):
        """A 2->3 channel 3x3 convolution with random parameters and input"""
        layer = Conv2D("conv1", (2, 5, 4), (3, 5, 4), kernel=3)
        rng = np.random.default_rng(3)
        params = layer.init_params(rng)
        params["conv1.bias"] = rng.normal(size=3)
        x = rng.normal(size=(2, 2, 5, 4))
        return layer, params, x

    def test_forward_matches_direct_loops(self, setup):
        """Test the convolution against a scalar loop with zero padding"""
        layer, params, x = setup
        out, _, _ = layer.forward(x, params, {}, True)

        w, b = params["conv1.weight"], params["conv1.bias"]
        expected = np.zeros((2, 3, 5, 4))
        for n in range(2):
            for o in range(3):
                for i in range(5):
                    for j in range(4):
                        total = b[o]
                        for c in range(2):
                            for di in range(3):
                                for dj in range(3):
                                    r, s = i + di - 1, j + dj - 1
                                    if 0 <= r < 5 and 0 <= s < 4:
                                        total += w[o, c, di, dj] * x[n, c, r, s]
                        expected[n, o, i, j] = total
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_input_gradient(self, setup):
        """Test the convolution input gradient against finite differences"""
        layer, params, x = setup
        upstream = np.random.default_rng(4).normal(size=(2, 3, 5, 4))
        _, cache, _ = layer.forward(x, params, {}, True)
        dx, _ = layer.backward(upstream, cache, params)

        assert relative_error(dx, numeric_input_grad(layer, x, params, upstream)) < 1e-6

    def test_he_initialisation_scale(self):
        """Test that weights follow a fan-in scaled normal"""
        layer = Conv2D("conv1", (8, 4, 4), (64, 4, 4), kernel=3)
        weights = layer.init_params(np.random.default_rng(0))["conv1.weight"]

        assert weights.std() == pytest.approx(np.sqrt(2.0 / 72), rel=0.05)


class TestMaxPool2:
    """Test suite for MaxPool2"""

    def test_forward_takes_window_maximum(self):
        """Test 2x2 maxima"""
        layer = MaxPool2("maxpool1", (1, 2, 4), (1, 1, 2))
        x = np.array([[[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 6.0]]]])
        out, _, _ = layer.forward(x, {}, {}, True)

        np.testing.assert_array_equal(out, [[[[5.0, 7.0]]]])

    def test_tie_routes_gradient_to_first_maximum(self):
        """Test that a tied window sends the gradient to the first position"""
        layer = MaxPool2("maxpool1", (1, 2, 2), (1, 1, 1))
        x = np.full((1, 1, 2, 2), 3.0)
        _, cache, _ = layer.forward(x, {}, {}, True)
        dx, _ = layer.backward(np.array([[[[1.0]]]]), cache, {})

        np.testing.assert_array_equal(dx, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_input_gradient(self):
        """Test the pooling gradient against finite differences"""
        layer = MaxPool2("maxpool1", (2, 4, 4), (2, 2, 2))
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 2, 4, 4))
        upstream = rng.normal(size=(2, 2, 2, 2))
        _, cache, _ = layer.forward(x, {}, {}, True)
        dx, _ = layer.backward(upstream, cache, {})

        assert relative_error(dx, numeric_input_grad(layer, x, {}, upstream)) < 1e-6


class TestElementwiseLayers:
    """Test suite for ReLU, Flatten and Dense"""

    def test_relu_gradient(self):
        """Test ReLU passes gradient only where the input is positive"""
        layer = ReLU("relu1", (3,), (3,))
        x = np.array([[-1.0, 2.0, 0.5]])
        _, cache, _ = layer.forward(x, {}, {}, True)
        dx, _ = layer.backward(np.ones((1, 3)), cache, {})

        np.testing.assert_array_equal(dx, [[0.0, 1.0, 1.0]])

    def test_flatten_round_trip(self):
        """Test Flatten reshapes forward and back"""
        layer = Flatten("flatten1", (2, 2, 2), (8,))
        x = np.arange(16.0).reshape(2, 2, 2, 2)
        out, cache, _ = layer.forward(x, {}, {}, True)
        dx, _ = layer.backward(out, cache, {})

        assert out.shape == (2, 8)
        np.testing.assert_array_equal(dx, x)

    def test_dense_gradients(self):
        """Test Dense input and weight gradients against finite differences"""
        layer = Dense("dense1", (4,), (3,))
        rng = np.random.default_rng(6)
        params = layer.init_params(rng)
        x = rng.normal(size=(5, 4))
        upstream = rng.normal(size=(5, 3))
        _, cache, _ = layer.forward(x, params, {}, True)
        dx, grads = layer.backward(upstream, cache, params)

        assert relative_error(dx, numeric_input_grad(layer, x, params, upstream)) < 1e-6
        np.testing.assert_allclose(grads["dense1.weight"], x.T @ upstream)
        np.testing.assert_allclose(grads["dense1.bias"], upstream.sum(axis=0))
