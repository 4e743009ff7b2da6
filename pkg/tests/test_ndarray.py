import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trat.ndarray import Rng, derive_seed, elementwise, matmul, sample


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), b), b)


def test_matmul_row_by_column():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = Rng(7)
    a, b = rng.gaussian((5, 7)), rng.gaussian((7, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 12), st.integers(0, 2**32))
def test_matmul_oracle_up_to_64(m, k, n, seed):
    rng = Rng(seed)
    a, b = rng.gaussian((m, k)), rng.gaussian((k, n))
    ref = triple_loop(a, b)
    scale = np.abs(a) @ np.abs(b)
    assert np.all(np.abs(matmul(a, b) - ref) <= 1e-12 * np.maximum(scale, 1.0))


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_elementwise_examples():
    assert elementwise("relu", [-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]
    assert elementwise("clamp", [-0.2, 0.5, 1.3], 0, 1).tolist() == [0.0, 0.5, 1.0]
    assert elementwise("exp", [0.0]).tolist() == [1.0]
    assert elementwise("scale", [1.0, -2.0], 3).tolist() == [3.0, -6.0]
    assert elementwise("add", [1.0, 2.0], 1.0).tolist() == [2.0, 3.0]


def test_elementwise_errors():
    with pytest.raises(ValueError, match="non-positive"):
        elementwise("log", [1.0, 0.0])
    with pytest.raises(ValueError, match="incompatible shapes"):
        elementwise("mul", np.zeros(3), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        elementwise("sqrt", [1.0])


def test_gaussian_zero_std_is_zero():
    assert np.array_equal(sample(Rng(1), "gaussian", (3, 4), mean=0.0, std=0.0), np.zeros((3, 4)))


def test_negative_std_rejected():
    with pytest.raises(ValueError):
        Rng(0).gaussian((2,), 0.0, -1.0)


def test_rademacher_statistics():
    r = sample(Rng(3), "rademacher", (100_000,))
    assert np.all(np.abs(r) == 1.0)
    # 3 standard errors of a mean of 1e5 unit-variance draws, times 3
    assert abs(r.mean()) < 3 * 10 ** -2.5 * 3


def test_fixed_seed_repeats():
    a = Rng(42).gaussian((4,))
    b = Rng(42).gaussian((4,))
    assert np.array_equal(a, b)


def test_stream_is_frozen():
    # frozen from the first run; guards against generator or seeding changes
    got = Rng(42).gaussian((4,))
    np.testing.assert_array_equal(got, np.array(FROZEN_SEED42))


FROZEN_SEED42 = [0.3375714466967798, -0.7821534784435413, -0.3160252007782352, -2.1012153395949684]


def test_children_are_independent_and_stable():
    assert derive_seed(5, 0) != derive_seed(5, 1)
    assert Rng(5).child(3).seed == derive_seed(5, 3)
    a = Rng(5).child(0).gaussian((3,))
    b = Rng(5).child(1).gaussian((3,))
    assert not np.array_equal(a, b)


def test_uniform_bounds():
    u = sample(Rng(0), "uniform", (1000,), lo=-2.0, hi=3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
