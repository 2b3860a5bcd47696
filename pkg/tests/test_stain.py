from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leukonet.exceptions import ConfigError, RangeError, SingularMatrixError
from leukonet.stain import StainDeconvolution, init_stain_matrix, od_to_rgb, rgb_to_od, sd_forward
from leukonet.tensor import Rng, Tensor


def test_od_of_white_is_zero():
    assert rgb_to_od(np.array([255.0])).data[0] == 0.0


def test_od_one_decade():
    assert rgb_to_od(np.array([25.5])).data[0] == pytest.approx(1.0, abs=1e-15)


def test_od_of_black_is_clamped():
    assert rgb_to_od(np.array([0.0])).data[0] == pytest.approx(np.log10(255.0), abs=1e-15)
    assert rgb_to_od(np.array([0.0])).data[0] == pytest.approx(2.40654, abs=1e-5)


def test_od_range_error():
    with pytest.raises(RangeError):
        rgb_to_od(np.array([256.0]))
    with pytest.raises(RangeError):
        rgb_to_od(np.array([-1.0]))


def test_od_to_rgb_examples():
    np.testing.assert_allclose(od_to_rgb(np.array([0.0, 1.0])).data, [255.0, 25.5], rtol=1e-15)
    with pytest.raises(RangeError):
        od_to_rgb(np.array([-0.1]))


def test_od_round_trip_integer_sweep():
    i = np.arange(1, 256, dtype=np.float64)
    assert np.abs(od_to_rgb(rgb_to_od(i)).data - i).max() < 1e-9


def test_od_monotone_decreasing():
    od = rgb_to_od(np.linspace(0, 255, 1021)).data
    assert (np.diff(od) <= 0).all()


def test_sd_identity_is_identity(rng):
    od = rng.uniform(0, 2, size=(2, 3, 4, 4))
    assert np.abs(sd_forward(Tensor(od), Tensor(np.eye(3))).data - od).max() <= 1e-12


def test_sd_double_identity_halves(rng):
    od = rng.uniform(0, 2, size=(1, 3, 3, 3))
    np.testing.assert_allclose(sd_forward(Tensor(od), Tensor(2 * np.eye(3))).data, od / 2, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sd_reconstruction_through_stain_matrix(seed):
    r = np.random.default_rng(seed)
    m = np.eye(3) + r.uniform(-0.4, 0.4, size=(3, 3))
    if np.linalg.cond(m) > 1e3:
        return
    od = r.uniform(0, 2.4, size=(2, 3, 3, 3))
    q = sd_forward(Tensor(od), Tensor(m)).data
    back = np.einsum("njhw,jk->nkhw", q, m)
    assert np.abs(back - od).max() < 1e-8


def test_sd_singular_matrix_error_names_det():
    with pytest.raises(SingularMatrixError, match=r"\|det\|"):
        sd_forward(Tensor(np.ones((1, 3, 1, 1))), Tensor(np.ones((3, 3))))


def test_identity_scheme():
    np.testing.assert_array_equal(init_stain_matrix("identity"), np.eye(3))


def test_random_scheme_is_seeded_row_normalized_well_conditioned():
    a, b = init_stain_matrix("random", Rng(3)), init_stain_matrix("random", Rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, rtol=1e-12)
    assert abs(np.linalg.det(a)) >= 0.1
    assert (a >= 0).all()


def test_standard_scheme_matches_bundled_file_bit_exactly():
    text = resources.files("leukonet.resources").joinpath("standard_stain_od.txt").read_text()
    golden = np.array([float(t) for t in text.split()]).reshape(3, 3)
    assert init_stain_matrix("standard").tobytes() == golden.tobytes()


def test_standard_constants_are_normalized_literature_vectors():
    raw = np.array([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]])
    expected = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    np.testing.assert_allclose(init_stain_matrix("standard"), expected, atol=1e-9)
    assert (init_stain_matrix("standard") >= 0).all()


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        init_stain_matrix("bogus")


def test_post_step_restores_invertibility():
    layer = StainDeconvolution("identity")
    layer.stain.data = np.zeros((3, 3))
    layer.post_step()
    assert abs(np.linalg.det(layer.stain.data)) > 1e-8


def test_freeze_flag_stops_stain_gradient():
    layer = StainDeconvolution("standard", trainable=False)
    assert not layer.stain.requires_grad
