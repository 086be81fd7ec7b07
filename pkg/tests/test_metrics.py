import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from fgin import metrics
from fgin.errors import ShapeError


@pytest.fixture
def cube():
    return np.random.default_rng(7).random((24, 20, 5))


def test_identical(cube):
    assert metrics.mpsnr(cube, cube) == 100.0
    assert metrics.mssim(cube, cube) == pytest.approx(1.0, abs=1e-12)
    assert metrics.sam(cube, cube) == pytest.approx(0.0, abs=1e-6)


def test_constant_offset_psnr():
    x, y = np.full((12, 12, 3), 0.5), np.full((12, 12, 3), 0.25)
    assert metrics.mpsnr(x, y) == pytest.approx(10 * np.log10(1 / 0.0625), abs=1e-3)
    assert metrics.mpsnr(x, y) == pytest.approx(12.0412, abs=1e-3)


def test_psnr_matches_skimage(cube):
    noisy = np.clip(cube + np.random.default_rng(0).normal(0, 0.05, cube.shape), 0, 1)
    ref = np.mean([peak_signal_noise_ratio(cube[..., b], noisy[..., b], data_range=1.0) for b in range(5)])
    assert metrics.mpsnr(noisy, cube) == pytest.approx(ref, abs=1e-9)


def test_psnr_cap_per_band(cube):
    other = cube.copy()
    other[..., 0] += 0.1
    per = metrics.band_psnr(other, cube)
    assert np.all(per[1:] == 100.0) and per[0] == pytest.approx(20.0)


def test_symmetry(cube):
    y = np.clip(cube + 0.03 * np.random.default_rng(1).standard_normal(cube.shape), 0, 1)
    assert metrics.mpsnr(cube, y) == metrics.mpsnr(y, cube)
    assert metrics.mssim(cube, y) == pytest.approx(metrics.mssim(y, cube), abs=1e-12)
    assert metrics.sam(cube, y) == pytest.approx(metrics.sam(y, cube), abs=1e-12)


def test_ssim_matches_skimage(cube):
    y = np.clip(cube ** 1.3 + 0.02, 0, 1)
    ref = np.mean([structural_similarity(cube[..., b], y[..., b], data_range=1.0, gaussian_weights=True,
                                         sigma=1.5, use_sample_covariance=False) for b in range(5)])
    assert metrics.mssim(cube, y) == pytest.approx(ref, abs=1e-9)


def test_ssim_inverted_below_one(cube):
    assert metrics.mssim(cube, 1 - cube) < 1.0


def test_ssim_window_exceeds_image():
    with pytest.raises(ShapeError, match="window exceeds image"):
        metrics.mssim(np.zeros((10, 30, 2)), np.zeros((10, 30, 2)))


def test_sam_orthogonal():
    x = np.zeros((3, 3, 2))
    y = np.zeros((3, 3, 2))
    x[..., 0] = 1.0
    y[..., 1] = 1.0
    assert metrics.sam(x, y) == pytest.approx(90.0, abs=1e-6)


def test_sam_scale_invariant(cube):
    assert metrics.sam(cube + 0.1, 2 * (cube + 0.1)) == pytest.approx(0.0, abs=1e-6)
    assert metrics.sam(cube + 0.1, 0.3 * (cube + 0.1)) == pytest.approx(0.0, abs=1e-6)


def test_sam_zero_norm_pixels():
    x = np.ones((2, 2, 3))
    y = np.ones((2, 2, 3))
    x[0, 0] = 0.0
    y[1, 1] = [1.0, 0.0, 0.0]
    expected = np.degrees(np.arccos(1 / np.sqrt(3))) / 4
    assert metrics.sam(x, y) == pytest.approx(expected, abs=1e-9)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.mpsnr(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        metrics.sam(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


def test_psnr_noise_ladder(cube):
    noise = np.random.default_rng(99).standard_normal(cube.shape)
    scores = [metrics.mpsnr(cube + a * noise, cube) for a in (0.001, 0.003, 0.01, 0.03, 0.1)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_report_and_csv(cube):
    y = np.clip(cube + 0.01, 0, 1)
    r = metrics.report(y, cube, "p0", 0.5)
    assert r.sam >= 0 and r.mssim <= 1 + 1e-9
    agg = metrics.aggregate([r, metrics.report(cube, cube, "p1")], "mean")
    assert agg.mpsnr == pytest.approx((r.mpsnr + 100.0) / 2)
    text = metrics.reports_to_csv([r, agg])
    assert text.splitlines()[0] == "label,mpsnr,mssim,sam,wall_time"
    assert "mpsnr=" in r.to_kv()
    bands = metrics.band_psnr_csv([r]).splitlines()
    assert bands[0] == "band,p0" and len(bands) == 6
