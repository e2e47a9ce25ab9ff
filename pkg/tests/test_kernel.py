import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sreseg.kernel import MASKED, expand_kernel, fold_gradient, param_count, ring_index_map

odd_k = st.integers(0, 15).map(lambda i: 2 * i + 1)


def test_k1():
    m = ring_index_map(1)
    assert m.ring_of.tolist() == [[0]]
    assert m.bands == 1 and m.cardinality.tolist() == [1]


def test_k3():
    m = ring_index_map(3)
    assert m.ring_of.tolist() == [[1, 1, 1], [1, 0, 1], [1, 1, 1]]
    assert m.bands == 2 and m.cardinality.tolist() == [1, 8]


def test_k5_corners_masked():
    m = ring_index_map(5)
    assert m.bands == 3 and m.cardinality.tolist() == [1, 8, 12]
    assert m.masked_count == 4
    for i, j in [(0, 0), (0, 4), (4, 0), (4, 4)]:
        assert m.ring_of[i, j] == MASKED


@pytest.mark.parametrize("k, n", [(9, 5), (5, 3), (1, 1)])
def test_param_count(k, n):
    assert param_count(k) == n


@pytest.mark.parametrize("bad", [0, 2, -1, 33, 3.0, True])
def test_bad_sizes(bad):
    with pytest.raises(ValueError):
        ring_index_map(bad)


@given(odd_k)
def test_ring_map_properties(k):
    m = ring_index_map(k)
    r = m.ring_of
    for t in (np.rot90(r), r[::-1], r[:, ::-1], r.T):
        assert np.array_equal(t, r)
    c = k // 2
    assert r[c, c] == 0 and m.cardinality[0] == 1
    assert m.cardinality.sum() + m.masked_count == k * k
    u, v = np.mgrid[-c : c + 1, -c : c + 1]
    rounded = np.floor(np.hypot(u, v) + 0.5)
    assert np.array_equal(r == MASKED, rounded >= m.bands)
    assert r[r != MASKED].max() < m.bands


def test_expand_examples():
    assert np.array_equal(expand_kernel([1.0, 8.0], ring_index_map(3)), np.ones((3, 3)))
    assert expand_kernel([2.5], ring_index_map(1)).tolist() == [[2.5]]
    delta = expand_kernel([1.0, 0.0, 0.0], ring_index_map(5))
    expected = np.zeros((5, 5))
    expected[2, 2] = 1
    assert np.array_equal(delta, expected)


def test_fold_examples():
    m = ring_index_map(3)
    assert np.array_equal(fold_gradient(np.ones((3, 3)), m), [1.0, 1.0])
    assert np.array_equal(fold_gradient(np.zeros((3, 3)), m), [0.0, 0.0])
    g = np.zeros((3, 3))
    g[1, 1] = 1
    assert np.array_equal(fold_gradient(g, m), [1.0, 0.0])


def test_expand_shape_errors():
    with pytest.raises(ValueError):
        expand_kernel([1.0, 2.0, 3.0], ring_index_map(3))
    with pytest.raises(ValueError):
        fold_gradient(np.ones((4, 4)), ring_index_map(3))


@given(odd_k, st.integers(0, 2**32 - 1))
def test_expanded_kernel_is_d4_symmetric(k, seed):
    m = ring_index_map(k)
    w = np.random.default_rng(seed).standard_normal((2, 3, m.bands))
    d = expand_kernel(w, m)
    for t in (np.rot90(d, axes=(-2, -1)), d[..., ::-1, :], d[..., :, ::-1], np.swapaxes(d, -1, -2)):
        assert np.array_equal(t, d)


@given(odd_k, st.integers(0, 2**32 - 1))
def test_adjoint_identity(k, seed):
    m = ring_index_map(k)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m.bands)
    G = rng.standard_normal((k, k))
    assert np.isclose(np.sum(expand_kernel(w, m) * G), w @ fold_gradient(G, m), rtol=0, atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
def test_ring_means_preserved(w):
    m = ring_index_map(5)
    d = expand_kernel(w, m)
    for r in range(m.bands):
        assert np.isclose(d[m.ring_of == r].sum(), w[r], atol=1e-9)
