import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lutimlp.aggregate import max_aggregate, max_aggregate_batch


def test_single_point():
    z = np.array([[0.5, -1.0, 3.0]])
    f = max_aggregate(z)
    assert f.a.tolist() == [0.5, -1.0, 3.0]
    assert f.argmax.tolist() == [0, 0, 0]


def test_two_points():
    f = max_aggregate(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert f.a.tolist() == [1.0, 1.0]
    assert f.argmax.tolist() == [0, 1]


def test_matches_column_scan(rng):
    z = rng.normal(size=(50, 16))
    f = max_aggregate(z)
    for k in range(16):
        best, arg = -np.inf, -1
        for i in range(50):
            if z[i, k] > best:
                best, arg = z[i, k], i
        assert f.a[k] == best and f.argmax[k] == arg


def test_ties_go_to_smallest_index():
    z = np.array([[0.0, 2.0], [1.0, 2.0], [1.0, 0.0]])
    assert max_aggregate(z).argmax.tolist() == [1, 0]


def test_empty_is_an_error():
    with pytest.raises(ValueError):
        max_aggregate(np.zeros((0, 4)))


def test_batch_matches_single(rng):
    z = rng.normal(size=(4, 30, 7))
    vals, idx = max_aggregate_batch(z)
    for b in range(4):
        f = max_aggregate(z[b])
        assert np.array_equal(vals[b], f.a) and np.array_equal(idx[b], f.argmax)


matrices = arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 6)),
                  elements=st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 1)))


@settings(max_examples=200, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_permutation_invariance(z, rnd):
    perm = list(range(z.shape[0]))
    rnd.shuffle(perm)
    perm = np.array(perm)
    f = max_aggregate(z)
    g = max_aggregate(z[perm])
    # value equality: max(-0.0, 0.0) keeps whichever zero came first
    assert np.array_equal(f.a, g.a)
    if not np.any(z == 0):
        assert f.a.tobytes() == g.a.tobytes()
    # the winning point is the same up to ties in value
    assert np.array_equal(z[perm][g.argmax, np.arange(z.shape[1])], f.a)


@settings(max_examples=200, deadline=None)
@given(matrices, arrays(np.float64, 6, elements=st.floats(-5, 5, allow_nan=False)))
def test_adding_a_point_never_decreases(z, extra):
    extra = extra[: z.shape[1]]
    before = max_aggregate(z).a
    after = max_aggregate(np.vstack([z, extra])).a
    assert np.all(after >= before)
