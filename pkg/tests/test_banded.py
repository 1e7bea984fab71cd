import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamattn import _kernels
from streamattn.accounting import accounting
from streamattn.banded import sa_backward, sa_forward, sa_score_elements, valid_extents
from streamattn.dense import build_band_mask, maa_backward, maa_forward, maa_score_elements
from streamattn.frames import AttentionInputs, BandSpec
from streamattn.numerics import Rng, finite_difference_grad

bands = st.builds(BandSpec, st.integers(0, 6), st.integers(0, 6))


def _case(seed, n, d, g=None):
    rng = Rng(seed)
    shape = (n, d) if g is None else (g, n, d)
    return AttentionInputs(*(rng.normal(shape) for _ in range(3))), rng.normal(shape)


@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 4), bands)
def test_sa_equals_masked_dense(seed, n, d, band):
    inp, g = _case(seed, n, d)
    y, cache = sa_forward(inp, band)
    mask = build_band_mask(n, band)
    y_ref, dense = maa_forward(inp, mask)
    np.testing.assert_allclose(y, y_ref, rtol=0, atol=1e-12)
    got, ref = sa_backward(inp, band, cache, g), maa_backward(inp, mask, dense, g)
    np.testing.assert_allclose(got.d_queries, ref.d_queries, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got.d_keys, ref.d_keys, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got.d_values, ref.d_values, rtol=0, atol=1e-10)


@given(st.integers(1, 20), bands)
def test_banded_rows_normalize_over_valid_extent(n, band):
    inp, _ = _case(0, n, 2)
    _, cache = sa_forward(inp, band)
    lo, hi = valid_extents(n, band)
    probs = cache.probs[0]
    cols = np.arange(band.receptive_field())
    valid = (cols[None, :] >= lo[:, None]) & (cols[None, :] <= hi[:, None])
    assert np.all(probs[~valid] == 0.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-14)


def test_band_column_maps_to_time_offset():
    # one-hot keys: frame t's score with key s is large only when s == t + 1
    n = 5
    q = np.eye(n)
    k = np.roll(np.eye(n), 1, axis=0) * 50.0  # key s is e_{s-1}
    v = np.arange(n, dtype=float)[:, None]
    band = BandSpec(2, 1)
    y, cache = sa_forward(AttentionInputs(q, k, v), band)
    # column j is time t - B + j, so time t+1 sits at column B + 1
    assert np.all(np.argmax(cache.probs[0][:-1], axis=1) == band.look_back + 1)
    np.testing.assert_allclose(y[:-1, 0], np.arange(1, n), atol=1e-6)


def test_zero_band_copies_values_and_kills_query_key_grads(rng):
    inp, g = _case(3, 7, 3)
    band = BandSpec(0, 0)
    y, cache = sa_forward(inp, band)
    assert np.array_equal(y, inp.values)
    grads = sa_backward(inp, band, cache, g)
    assert np.all(grads.d_queries == 0.0)
    assert np.all(grads.d_keys == 0.0)
    assert np.array_equal(grads.d_values, g)


@pytest.mark.parametrize("band", [BandSpec(0, 0), BandSpec(2, 1), BandSpec(1, 3), BandSpec(8, 8)])
def test_sa_backward_matches_finite_differences(band, backend):
    n, d = 6, 2
    inp, g = _case(11, n, d)
    _, cache = sa_forward(inp, band)
    grads = sa_backward(inp, band, cache, g)
    base = [inp.queries, inp.keys, inp.values]
    for i, analytic in enumerate((grads.d_queries, grads.d_keys, grads.d_values)):

        def f(x, i=i):
            arrs = list(base)
            arrs[i] = x.reshape(n, d)
            return float(np.sum(sa_forward(AttentionInputs(*arrs), band)[0] * g))

        np.testing.assert_allclose(analytic.ravel(), finite_difference_grad(f, base[i]), atol=1e-8)


@pytest.mark.parametrize("band", [BandSpec(0, 0), BandSpec(3, 1), BandSpec(2, 5)])
def test_backends_agree(band):
    inp, g = _case(5, 13, 3, g=2)
    q, k, v = inp.batched()
    W = band.receptive_field()
    results = []
    for table in (_kernels.NUMPY_KERNELS, _kernels.NUMBA_KERNELS, _kernels.PYTHON_KERNELS):
        probs = np.zeros((2, 13, W))
        y = table["sa_forward"](q, k, v, band.look_back, band.look_ahead, 0.5, probs)
        grads = table["sa_backward"](q, k, v, probs, g, band.look_back, band.look_ahead, 0.5)
        results.append((y, probs) + tuple(grads))
    for other in results[1:]:
        for a, b in zip(results[0], other):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_batched_heads_match_one_by_one():
    inp, g = _case(9, 10, 2, g=3)
    band = BandSpec(2, 2)
    y, cache = sa_forward(inp, band)
    grads = sa_backward(inp, band, cache, g)
    for h in range(3):
        one = AttentionInputs(inp.queries[h], inp.keys[h], inp.values[h])
        y1, c1 = sa_forward(one, band)
        np.testing.assert_allclose(y[h], y1, atol=1e-15)
        np.testing.assert_allclose(grads.d_keys[h], sa_backward(one, band, c1, g[h]).d_keys, atol=1e-15)


def test_float32_inputs_stay_float32():
    inp, _ = _case(1, 8, 4)
    f32 = AttentionInputs(*(a.astype(np.float32) for a in (inp.queries, inp.keys, inp.values)))
    y, cache = sa_forward(f32, BandSpec(2, 1))
    assert y.dtype == np.float32 and cache.probs.dtype == np.float32
    np.testing.assert_allclose(y, sa_forward(inp, BandSpec(2, 1))[0], atol=1e-5)


def test_worked_example_score_counts():
    band = BandSpec(100, 19)  # window of 120 frames
    assert sa_score_elements(6000, band) == 720_000
    assert maa_score_elements(6000) == 36_000_000


def test_accounting_records_exact_banded_buffer():
    inp, _ = _case(0, 50, 4)
    band = BandSpec(6, 3)
    with accounting() as acc:
        sa_forward(inp, band)
    assert acc.peak_elements("sa_scores") == sa_score_elements(50, band)
    assert acc.peak_bytes("sa_scores") == sa_score_elements(50, band) * 8


def test_no_quadratic_buffer_is_allocated():
    n, d = 2000, 4
    inp, g = _case(0, n, d)
    band = BandSpec(4, 4)
    sa_forward(inp, band)  # warm-up (compilation, caches)
    tracemalloc.start()
    try:
        y, cache = sa_forward(inp, band)
        sa_backward(inp, band, cache, g)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert peak < 0.1 * n * n * 8  # an N x N float64 buffer would be 32 MB


def test_backward_rejects_mismatched_cache():
    inp, g = _case(0, 6, 2)
    _, cache = sa_forward(inp, BandSpec(1, 1))
    with pytest.raises(RuntimeError):
        sa_backward(inp, BandSpec(2, 1), cache, g)
    other, _ = _case(0, 7, 2)
    with pytest.raises(RuntimeError):
        sa_backward(other, BandSpec(1, 1), cache, np.zeros((7, 2)))


def test_band_extents_must_be_non_negative():
    with pytest.raises(ValueError):
        BandSpec(-1, 0)
