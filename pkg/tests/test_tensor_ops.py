"""Forward semantics of the layer kernels against hand and naive-loop oracles."""

import numpy as np
import pytest

from ftengine.errors import (
    InvalidHyperparameterError,
    InvalidRateError,
    ShapeMismatchError,
)
from ftengine.tensor import (
    Tensor,
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    maxpool2d,
    pointwise_dense,
    relu,
    softmax,
)

from oracles import conv2d_naive, maxpool2d_naive, pointwise_dense_naive


class TestTensor:
    def test_row_major_round_trip(self):
        t = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
        flat = t.data.reshape(-1)
        for idx in [(0, 0, 0), (1, 2, 3), (0, 2, 1)]:
            assert t.data[idx] == flat[np.ravel_multi_index(idx, t.shape)]

    def test_size_matches_shape_product(self):
        t = Tensor(np.zeros((3, 5)))
        assert t.size == 15

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 0)))


class TestConv2d:
    def test_vgg_block_shape(self):
        x = Tensor(np.zeros((224, 224, 3), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 3, 64), dtype=np.float32))
        b = Tensor(np.zeros(64, dtype=np.float32))
        y = conv2d(x, w, b, stride=1, pad=1)
        assert y.shape == (224, 224, 64)

    def test_zero_kernel_gives_zero_output(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 4, 1)))
        w = Tensor(np.zeros((3, 3, 1, 1)))
        b = Tensor(np.zeros(1))
        y = conv2d(x, w, b, stride=1, pad=1)
        assert y.shape == (4, 4, 1)
        assert np.all(y.data == 0)

    def test_single_receptive_field(self):
        x = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        w = Tensor(np.array([[[[1.0]], [[0.0]]], [[[0.0]], [[1.0]]]]))
        b = Tensor(np.zeros(1))
        y = conv2d(x, w, b, stride=1, pad=0)
        assert y.shape == (1, 1, 1)
        assert y.data.item() == pytest.approx(5.0)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((4, 4, 2)))
        w = Tensor(np.zeros((3, 3, 3, 4)))
        with pytest.raises(ShapeMismatchError):
            conv2d(x, w, Tensor(np.zeros(4)), 1, 1)

    def test_invalid_hyperparameters(self):
        x = Tensor(np.zeros((2, 2, 1)))
        w = Tensor(np.zeros((5, 5, 1, 1)))
        with pytest.raises(InvalidHyperparameterError):
            conv2d(x, w, Tensor(np.zeros(1)), stride=1, pad=0)

    def test_output_extent_formula(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            s = int(rng.integers(1, 4))
            p = int(rng.integers(0, 4))
            h = int(rng.integers(max(1, k - 2 * p), 12))
            if h + 2 * p < k:
                continue
            x = Tensor(rng.normal(size=(h, h, 2)).astype(np.float32))
            w = Tensor(rng.normal(size=(k, k, 2, 3)).astype(np.float32))
            y = conv2d(x, w, Tensor(np.zeros(3, dtype=np.float32)), stride=s, pad=p)
            expect = (h + 2 * p - k) // s + 1
            assert y.shape == (expect, expect, 3)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            h = int(rng.integers(3, 9))
            cin = int(rng.integers(1, 5))
            cout = int(rng.integers(1, 4))
            k = int(rng.integers(1, min(h, 4) + 1))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 2))
            x = rng.normal(size=(h, h, cin)).astype(np.float32)
            w = rng.normal(size=(k, k, cin, cout)).astype(np.float32)
            b = rng.normal(size=cout).astype(np.float32)
            y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, pad=p)
            ref = conv2d_naive(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), s, p)
            np.testing.assert_allclose(y.data, ref, atol=1e-4, rtol=1e-4)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(4, 6, 6, 2)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 3, 2, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=3).astype(np.float32))
        batched = conv2d(Tensor(xs), w, b, stride=1, pad=1)
        for i in range(4):
            single = conv2d(Tensor(xs[i]), w, b, stride=1, pad=1)
            np.testing.assert_array_equal(batched.data[i], single.data)


class TestMaxPool:
    def test_block5_shape(self):
        x = Tensor(np.zeros((14, 14, 512), dtype=np.float32))
        assert maxpool2d(x, 2, 2).shape == (7, 7, 512)

    def test_constant_input(self):
        x = Tensor(np.full((6, 6, 3), 2.5, dtype=np.float32))
        y = maxpool2d(x, 2, 2)
        assert np.all(y.data == 2.5)

    def test_forced_maximum(self):
        x = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        assert maxpool2d(x, 2, 2).data.item() == 4.0

    def test_invalid_window(self):
        with pytest.raises(InvalidHyperparameterError):
            maxpool2d(Tensor(np.zeros((3, 3, 1))), k=4, stride=1)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            h = int(rng.integers(2, 9))
            c = int(rng.integers(1, 5))
            k = int(rng.integers(1, h + 1))
            s = int(rng.integers(1, 4))
            x = rng.normal(size=(h, h, c)).astype(np.float32)
            y = maxpool2d(Tensor(x), k, s)
            ref = maxpool2d_naive(x, k, s)
            np.testing.assert_allclose(y.data, ref, atol=1e-6)


class TestRelu:
    def test_examples(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        y = relu(Tensor(-np.abs(np.random.default_rng(1).normal(size=(3, 4))) - 0.1))
        assert np.all(y.data == 0)


class TestPointwiseDense:
    def test_feature_map_shape(self):
        x = Tensor(np.zeros((7, 7, 512), dtype=np.float32))
        w = Tensor(np.zeros((512, 128), dtype=np.float32))
        b = Tensor(np.zeros(128, dtype=np.float32))
        assert pointwise_dense(x, w, b).shape == (7, 7, 128)

    def test_identity_weights(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 4)).astype(np.float32)
        y = pointwise_dense(Tensor(x), Tensor(np.eye(4, dtype=np.float32)), Tensor(np.zeros(4, dtype=np.float32)))
        np.testing.assert_allclose(y.data, x, atol=1e-6)

    def test_hand_product(self):
        y = pointwise_dense(
            Tensor(np.array([1.0, 2.0])),
            Tensor(np.array([[1.0], [3.0]])),
            Tensor(np.array([0.5])),
        )
        assert y.data.item() == pytest.approx(7.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            pointwise_dense(Tensor(np.zeros((3, 5))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            lead = tuple(int(e) for e in rng.integers(1, 5, size=int(rng.integers(1, 3))))
            cin = int(rng.integers(1, 6))
            cout = int(rng.integers(1, 6))
            x = rng.normal(size=lead + (cin,)).astype(np.float32)
            w = rng.normal(size=(cin, cout)).astype(np.float32)
            b = rng.normal(size=cout).astype(np.float32)
            y = pointwise_dense(Tensor(x), Tensor(w), Tensor(b))
            ref = pointwise_dense_naive(x, w, b)
            np.testing.assert_allclose(y.data, ref, atol=1e-5, rtol=1e-5)


class TestGlobalAvgPool:
    def test_channel_vector_shape(self):
        assert global_avg_pool(Tensor(np.zeros((7, 7, 512), dtype=np.float32))).shape == (512,)

    def test_constant_map(self):
        y = global_avg_pool(Tensor(np.full((4, 4, 3), 1.5)))
        np.testing.assert_allclose(y.data, [1.5, 1.5, 1.5])

    def test_single_channel_mean(self):
        x = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
        assert global_avg_pool(x).data.item() == pytest.approx(2.5)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(50,)))
        y = dropout(x, 0.3, np.random.default_rng(1), training=False)
        np.testing.assert_array_equal(y.data, x.data)

    def test_rate_zero_identity(self):
        x = Tensor(np.ones(10))
        y = dropout(x, 0.0, np.random.default_rng(1), training=True)
        np.testing.assert_array_equal(y.data, x.data)

    def test_expectation_preserved(self):
        x = Tensor(np.ones(100_000, dtype=np.float64))
        y = dropout(x, 0.3, np.random.default_rng(42), training=True)
        assert abs(y.data.mean() - 1.0) < 0.01

    def test_invalid_rate(self):
        with pytest.raises(InvalidRateError):
            dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), training=True)


class TestSoftmax:
    def test_log_ratio(self):
        y = softmax(Tensor(np.array([0.0, np.log(3.0)])))
        np.testing.assert_allclose(y.data, [0.25, 0.75], atol=1e-12)

    def test_uniform_logits(self):
        y = softmax(Tensor(np.zeros(5)))
        np.testing.assert_allclose(y.data, np.full(5, 0.2), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(scale=10, size=(40, 7)).astype(np.float32))
        y = softmax(x)
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(40), atol=1e-6)
        assert np.all(y.data > 0) and np.all(y.data <= 1)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        loss = cross_entropy(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[1.0, 0.0]])))
        assert loss.data.item() == pytest.approx(0.0, abs=1e-9)

    def test_coin_flip(self):
        loss = cross_entropy(Tensor(np.array([[0.5, 0.5]])), Tensor(np.array([[0.0, 1.0]])))
        assert loss.data.item() == pytest.approx(np.log(2.0), abs=1e-9)

    def test_mean_of_identical_rows(self):
        row = np.array([[0.7, 0.3]])
        lab = np.array([[1.0, 0.0]])
        single = cross_entropy(Tensor(row), Tensor(lab)).data.item()
        double = cross_entropy(Tensor(np.repeat(row, 2, 0)), Tensor(np.repeat(lab, 2, 0))).data.item()
        assert double == pytest.approx(single, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cross_entropy(Tensor(np.ones((2, 3)) / 3), Tensor(np.ones((2, 2)) / 2))
