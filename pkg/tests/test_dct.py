import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import stable_dct_input
from leukonet.dct import DctConfig, dct2d, dct_layer_forward, energy_mask, energy_threshold, idct2d, signed_log_normalize
from leukonet.tensor import Tensor, finite_diff_check


def dct_oracle(x):
    """Direct O(N^4) evaluation of the orthonormal DCT-II definition."""
    h, w = x.shape
    out = np.zeros((h, w))
    for k in range(h):
        for l in range(w):
            ak = math.sqrt((1 if k == 0 else 2) / h)
            al = math.sqrt((1 if l == 0 else 2) / w)
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[i, j] * math.cos(math.pi * (2 * i + 1) * k / (2 * h)) * math.cos(math.pi * (2 * j + 1) * l / (2 * w))
            out[k, l] = ak * al * s
    return out


def test_constant_image_has_only_dc():
    n, v = 8, 3.5
    c = dct2d(Tensor(np.full((n, n), v))).data
    assert c[0, 0] == pytest.approx(n * v, rel=1e-14)
    c[0, 0] = 0.0
    assert np.abs(c).max() < 1e-12


def test_matches_direct_summation_oracle(rng):
    x = rng.normal(size=(8, 8))
    np.testing.assert_allclose(dct2d(Tensor(x)).data, dct_oracle(x), atol=1e-12)
    np.testing.assert_allclose(idct2d(dct2d(Tensor(x))).data, x, atol=1e-9)


def test_non_square_matches_oracle(rng):
    x = rng.normal(size=(5, 7))
    np.testing.assert_allclose(dct2d(Tensor(x)).data, dct_oracle(x), atol=1e-12)


def test_idct_of_scaled_dc_delta_is_ones():
    n = 6
    c = np.zeros((n, n))
    c[0, 0] = n
    np.testing.assert_allclose(idct2d(Tensor(c)).data, 1.0, atol=1e-12)


def test_idct_of_zero_is_zero():
    assert not idct2d(Tensor(np.zeros((4, 4)))).data.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 64), st.integers(8, 64), st.integers(0, 2**32 - 1))
def test_round_trips_and_parseval(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(h, w))
    c = dct2d(Tensor(x)).data
    assert abs((c * c).sum() - (x * x).sum()) < 1e-9 * max(1.0, (x * x).sum())
    assert np.abs(idct2d(Tensor(c)).data - x).max() < 1e-9
    assert np.abs(dct2d(idct2d(Tensor(x))).data - x).max() < 1e-9


def test_linearity(rng):
    x, y = rng.normal(size=(2, 3, 9, 9))
    a, b = 1.7, -0.3
    lhs = dct2d(Tensor(a * x + b * y)).data
    rhs = a * dct2d(Tensor(x)).data + b * dct2d(Tensor(y)).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_threshold_worked_example():
    out, mask = energy_threshold(Tensor(np.array([[10.0, 2.0, 0.5]])))
    np.testing.assert_array_equal(out.data, [[10.0, 1.0, 1.0]])
    np.testing.assert_array_equal(mask, [[True, False, False]])


def test_threshold_full_fraction_keeps_everything(rng):
    c = rng.normal(size=(4, 4))
    out, mask = energy_threshold(Tensor(c), DctConfig(energy_fraction=1.0))
    np.testing.assert_array_equal(out.data, c)
    assert mask.all()


@pytest.mark.parametrize("n", [1, 3, 7, 16, 20, 64])
def test_threshold_equal_coefficients_keep_ceiling_row_major(n):
    c = np.full((1, n), 2.5)
    mask = energy_mask(c, 0.95)
    k = math.ceil(0.95 * n)
    assert mask.sum() == k
    np.testing.assert_array_equal(mask[0], np.arange(n) < k)


def test_threshold_all_zero_plane_keeps_nothing(caplog):
    with caplog.at_level(logging.DEBUG, logger="leukonet.dct"):
        out, mask = energy_threshold(Tensor(np.zeros((3, 3))))
    assert not mask.any()
    np.testing.assert_array_equal(out.data, 1.0)
    assert "all-zero" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.999))
def test_threshold_minimality(seed, fraction):
    c = np.random.default_rng(seed).normal(size=(2, 6, 6)) * np.random.default_rng(seed + 1).uniform(0.1, 10, size=(2, 6, 6))
    mask = energy_mask(c, fraction)
    for plane, m in zip(c, mask):
        e = plane**2
        kept = e[m]
        assert kept.sum() >= fraction * e.sum() * (1 - 1e-12)
        assert kept.sum() - kept.min() < fraction * e.sum()
        # Nothing dropped outranks something kept.
        assert e[~m].max(initial=0.0) <= kept.min()


def test_signed_log_examples():
    out = signed_log_normalize(Tensor([100.0, -1000.0, 1.0, -0.5])).data
    np.testing.assert_allclose(out, [2.0, -3.0, 0.0, 0.0], atol=1e-15)
    assert not np.signbit(out[3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_signed_log_is_exactly_odd(values):
    c = np.array(values)
    a = signed_log_normalize(Tensor(c)).data
    b = signed_log_normalize(Tensor(-c)).data
    assert np.array_equal(b, -a + 0.0)


def test_signed_log_gradient_uses_magnitude():
    c = Tensor([-100.0, 100.0, 0.5], requires_grad=True)
    signed_log_normalize(c).sum().backward()
    np.testing.assert_allclose(c.grad, [1 / (100 * math.log(10)), 1 / (100 * math.log(10)), 0.0], rtol=1e-14)


def test_layer_on_constant_channel():
    n, v = 8, 2.0
    out = dct_layer_forward(Tensor(np.full((1, 1, n, n), v))).data[0, 0]
    assert out[0, 0] == pytest.approx(math.log10(n * v), rel=1e-14)
    out[0, 0] = 0.0
    assert not out.any()


def test_layer_on_zero_input():
    assert not dct_layer_forward(Tensor(np.zeros((2, 3, 5, 5)))).data.any()


def test_layer_gradient_on_stable_mask(rng):
    x = stable_dct_input(rng, 1, 2, 10)
    assert finite_diff_check(lambda t: (dct_layer_forward(t) ** 2).sum(), Tensor(x, requires_grad=True)) < 1e-4


def test_layer_replaced_positions_get_zero_gradient(rng):
    x = Tensor(stable_dct_input(rng, 1, 1, 8), requires_grad=True)
    c = dct2d(x)
    kept, mask = energy_threshold(c)
    kept.sum().backward()
    # d/dx of the sum of kept coefficients is the inverse DCT of the mask.
    np.testing.assert_allclose(x.grad, idct2d(Tensor(mask.astype(float))).data, atol=1e-12)


def test_layer_is_batch_order_invariant(rng):
    x = rng.normal(size=(4, 3, 8, 8)) * 5
    perm = rng.permutation(4)
    np.testing.assert_array_equal(dct_layer_forward(Tensor(x[perm])).data, dct_layer_forward(Tensor(x)).data[perm])


def test_config_validation():
    with pytest.raises(ValueError):
        DctConfig(energy_fraction=0.0)
    with pytest.raises(ValueError):
        DctConfig(log_clamp_floor=0.5)
