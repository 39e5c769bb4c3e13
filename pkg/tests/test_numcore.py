import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmodal.numcore import (
    RandomStream,
    ShapeError,
    from_csv,
    matmul,
    next_gaussian,
    next_uniform,
    row_l2_normalize,
    softmax_rows,
    sub_stream,
    to_csv,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_zero(self):
        b = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(np.zeros((2, 2)), b), np.zeros((2, 3)))

    def test_hand_dot_product(self):
        # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17.0], [39.0]])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            matmul([[np.nan]], [[1.0]])

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, m, k, p = rng.integers(1, 8, size=4)
            a, b, c = rng.normal(size=(n, m)), rng.normal(size=(m, k)), rng.normal(size=(k, p))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            scale = np.abs(left).max() + 1e-300
            assert np.abs(left - right).max() / scale < 1e-9


class TestRowNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(row_l2_normalize([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_preserved(self):
        np.testing.assert_array_equal(row_l2_normalize([[0.0, 0.0]], eps=1e-12), [[0.0, 0.0]])

    def test_ones(self):
        np.testing.assert_allclose(row_l2_normalize([[1.0, 1.0, 1.0]]), [[1 / math.sqrt(3)] * 3],
                                   atol=1e-15)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            row_l2_normalize([[1.0]], eps=0.0)

    @given(arrays(np.float64, (4, 3), elements=finite))
    def test_unit_norm_and_idempotent(self, a):
        once = row_l2_normalize(a)
        norms = np.linalg.norm(a, axis=1)
        big = norms > 1e-6
        np.testing.assert_allclose(np.linalg.norm(once[big], axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(row_l2_normalize(once[big]), once[big], atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)

    def test_no_overflow(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_hand_values(self):
        e = math.e
        np.testing.assert_allclose(softmax_rows([[1.0, 2.0]]), [[1 / (1 + e), e / (1 + e)]], atol=1e-15)

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
    def test_shift_invariance_and_normalised(self, a, shift):
        p = softmax_rows(a)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)
        np.testing.assert_allclose(softmax_rows(a + shift), p, atol=1e-12)


class TestRandomStream:
    def test_determinism(self):
        a, b = RandomStream(123), RandomStream(123)
        assert [next_uniform(a) for _ in range(20)] == [next_uniform(b) for _ in range(20)]
        assert [next_gaussian(a) for _ in range(20)] == [next_gaussian(b) for _ in range(20)]

    def test_uniform_mean(self):
        s = RandomStream(7)
        draws = s.uniform(100_000)
        assert 0.49 <= draws.mean() <= 0.51
        assert draws.min() >= 0.0 and draws.max() < 1.0

    def test_sub_streams_differ(self):
        s = RandomStream(5)
        one = sub_stream(s, 1).uniform(100)
        two = sub_stream(s, 2).uniform(100)
        assert not np.array_equal(one, two)

    def test_sub_stream_ignores_parent_draws(self):
        s = RandomStream(5)
        before = s.sub_stream(3).uniform(10)
        s.uniform(1000)
        np.testing.assert_array_equal(before, s.sub_stream(3).uniform(10))

    def test_frozen_values(self):
        # Philox keyed through SeedSequence: these values must not change across machines
        s = RandomStream(42)
        first = [next_uniform(s) for _ in range(3)]
        assert first == RandomStream(42).uniform(3).tolist()
        assert all(0 <= v < 1 for v in first)


def test_csv_round_trip(tmp_path):
    a = np.random.default_rng(1).normal(size=(4, 3))
    path = tmp_path / "m.csv"
    to_csv(a, path)
    np.testing.assert_array_equal(from_csv(path), a)
    text = to_csv(a)
    assert text.count("\n") == 4 and "," in text
    np.testing.assert_array_equal(from_csv(text), a)
