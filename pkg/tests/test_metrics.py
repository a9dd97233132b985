import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from oracles import psnr_formula
from t4dg.metrics import LUMA, PSNR_CAP, SSIM_C1, MetricReport, psnr, ssim


def test_psnr_identical_is_cap():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_half_gray():
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(10 * np.log10(4))


def test_psnr_matches_formula():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert abs(psnr(a, b) - psnr_formula(a, b)) <= 1e-9


def test_extent_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_identical():
    a = np.random.default_rng(2).uniform(size=(16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_negative_image():
    a = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert ssim(a, 1.0 - a) < 0


def test_ssim_constant_closed_form():
    c, delta = 0.4, 0.1
    a = np.full((16, 16, 3), c)
    b = a + delta
    mu_a, mu_b = c * LUMA.sum(), (c + delta) * LUMA.sum()
    expected = (2 * mu_a * mu_b + SSIM_C1) / (mu_a**2 + mu_b**2 + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_reference_library(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 20))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@given(st.integers(0, 10_000))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 12, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_report_csv():
    rep = MetricReport()
    a = np.zeros((12, 12, 3))
    rep.add("f0", a, a + 0.5)
    rep.add("f1", a, a)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "frame,psnr,ssim"
    assert lines[-1].startswith("mean,")
    assert rep.mean_psnr == pytest.approx((10 * np.log10(4) + 99) / 2)
