"""
Tests for the image quality metrics, the report table and the PGM exports.
"""

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from core.exceptions import MetricsError, ShapeMismatchError
from core.metrics import (
    REPORT_COLUMNS,
    MetricsReport,
    brain_region,
    correlation_map,
    correlation_pgm,
    evaluate_image,
    gmwm_contrast,
    panel_pgm,
    psnr,
    roi_snr,
    save_pgm,
    ssim,
    window,
    wm_roi,
)
from core.phantom import NoiseModel, gaussian_blur, generate_subject, segment_means


@pytest.fixture(scope="module")
def clean_subject():
    return generate_subject(21, NoiseModel(0.0), spatial_variation=0.0)


# =============================================================================
# PSNR / SSIM
# =============================================================================

class TestPsnr:

    def test_identical_images_report_the_cap(self):
        image = np.random.default_rng(0).uniform(0, 100, (16, 16))
        assert psnr(image, image, 100.0) == 99.0

    def test_tiny_error_is_capped(self):
        truth = np.zeros((8, 8))
        assert psnr(truth + 1e-12, truth, 1.0) == 99.0

    def test_mse_of_one_percent_range_is_20_db(self):
        truth = np.full((10, 10), 100.0)
        assert psnr(truth + 10.0, truth, 100.0) == pytest.approx(20.0, abs=1e-12)
        assert psnr(np.full((4, 4), 0.1), np.zeros((4, 4)), 1.0) == pytest.approx(20.0, abs=1e-9)

    def test_mask_restricts_the_error(self):
        truth = np.zeros((4, 4))
        test = truth.copy()
        test[0, 0] = 50.0
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        assert psnr(test, truth, 1.0, mask) == 99.0

    def test_decreases_with_noise(self, clean_subject):
        truth = clean_subject.clean_cbf.numpy()
        rng = np.random.default_rng(1)
        values = [psnr(truth + s * rng.standard_normal(truth.shape), truth, 60.0) for s in (1, 2, 4, 8, 16)]
        assert values == sorted(values, reverse=True)

    def test_errors(self):
        with pytest.raises(MetricsError):
            psnr(np.ones((4, 4)), np.zeros((4, 4)), 0.0)
        with pytest.raises(ShapeMismatchError):
            psnr(np.ones((4, 4)), np.zeros((4, 5)), 1.0)


class TestSsim:

    @pytest.fixture
    def images(self):
        rng = np.random.default_rng(2)
        base = gaussian_blur(rng.uniform(0, 100, (32, 32)), 3.0)
        return base, base + 5.0 * rng.standard_normal(base.shape)

    def test_identity(self, images):
        base, _ = images
        assert ssim(base, base, 100.0) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry_and_bounds(self, images):
        base, noisy = images
        forward, backward = ssim(base, noisy, 100.0), ssim(noisy, base, 100.0)
        assert forward == pytest.approx(backward, abs=1e-12)
        assert -1.0 <= forward < 1.0

    def test_inverted_image_is_dissimilar(self, images):
        base, _ = images
        assert ssim(100.0 - base, base, 100.0) < 1.0

    def test_region_smaller_than_window(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[10:15, 10:15] = True
        with pytest.raises(MetricsError):
            ssim(np.ones((32, 32)), np.ones((32, 32)), 1.0, mask)


# =============================================================================
# ROI statistics
# =============================================================================

def two_tissue_image():
    gm = np.zeros((6, 6), dtype=bool)
    gm[:2] = True
    wm = np.zeros((6, 6), dtype=bool)
    wm[3:] = True
    image = np.zeros((6, 6))
    image[gm] = 60.0
    image[3:] = np.where(np.arange(6) % 2 == 0, 20.0, 30.0)
    return image, gm, wm


class TestRoiStatistics:

    def test_snr_example(self):
        image, gm, wm = two_tissue_image()
        assert roi_snr(image, gm, wm) == pytest.approx(12.0)

    def test_snr_is_scale_invariant(self):
        image, gm, wm = two_tissue_image()
        assert roi_snr(3.7 * image, gm, wm) == pytest.approx(12.0)
        # an offset moves only the numerator
        assert roi_snr(image + 5.0, gm, wm) == pytest.approx(65.0 / 5.0)

    def test_snr_sentinels_and_errors(self):
        image, gm, wm = two_tissue_image()
        image[wm] = 25.0
        assert roi_snr(image, gm, wm) == float("inf")
        with pytest.raises(MetricsError):
            roi_snr(image, np.zeros_like(gm), wm)
        single = np.zeros_like(wm)
        single[5, 5] = True
        with pytest.raises(MetricsError):
            roi_snr(image, gm, single)

    def test_clean_phantom_contrast(self, clean_subject):
        clean = clean_subject.clean_cbf.numpy()
        assert gmwm_contrast(clean, clean_subject.gm, clean_subject.wm) == pytest.approx(2.4, rel=1e-6)
        assert gmwm_contrast(0.3 * clean, clean_subject.gm, clean_subject.wm) == pytest.approx(2.4, rel=1e-6)

    def test_blur_pulls_contrast_toward_one(self, clean_subject):
        clean = clean_subject.clean_cbf.numpy()
        values = [gmwm_contrast(gaussian_blur(clean, f), clean_subject.gm, clean_subject.wm)
                  for f in (1.0, 2.0, 3.0, 4.0)]
        assert values == sorted(values, reverse=True)
        assert values[0] < 2.4
        assert values[-1] > 1.0

    def test_zero_wm_mean(self):
        image, gm, wm = two_tissue_image()
        image[wm] = 0.0
        with pytest.raises(MetricsError):
            gmwm_contrast(image, gm, wm)

    def test_wm_roi_falls_back_for_thin_masks(self):
        wm = np.zeros((8, 8), dtype=bool)
        wm[3, 2:6] = True
        np.testing.assert_array_equal(wm_roi(wm), wm)
        block = np.zeros((8, 8), dtype=bool)
        block[1:7, 1:7] = True
        assert wm_roi(block).sum() == 16

    def test_brain_region_dilates_by_margin(self):
        gm = np.zeros((9, 9), dtype=bool)
        gm[4, 4] = True
        region = brain_region(gm, np.zeros_like(gm), margin=2)
        # default cross structuring element grows a diamond
        assert region.sum() == 13
        assert brain_region(gm, np.zeros_like(gm), margin=0).sum() == 1


# =============================================================================
# Correlation maps
# =============================================================================

class TestCorrelationMap:

    def test_identical_outputs_give_one(self):
        rng = np.random.default_rng(3)
        images = [rng.uniform(0, 1, (4, 4)) for _ in range(5)]
        rmap = correlation_map(images, images).numpy()
        np.testing.assert_allclose(rmap, 1.0, atol=1e-12)
        assert rmap.dtype == np.float64

    def test_constant_pixel_is_zero(self):
        rng = np.random.default_rng(4)
        images = [rng.uniform(0, 1, (4, 4)) for _ in range(5)]
        for image in images:
            image[1, 2] = 3.0
        assert correlation_map(images, images).numpy()[1, 2] == 0.0

    def test_affine_invariance(self):
        rng = np.random.default_rng(5)
        outputs = [rng.standard_normal((6, 6)) for _ in range(8)]
        references = [o + rng.standard_normal((6, 6)) for o in outputs]
        base = correlation_map(outputs, references, threshold=-1.0).numpy()
        moved = correlation_map([2.5 * o + 40.0 for o in outputs], references, threshold=-1.0).numpy()
        np.testing.assert_allclose(moved, base, atol=1e-12)

    def test_threshold_zeroes_weak_pixels(self):
        rng = np.random.default_rng(6)
        outputs = [rng.standard_normal((6, 6)) for _ in range(8)]
        references = [rng.standard_normal((6, 6)) for _ in range(8)]
        rmap = correlation_map(outputs, references, threshold=0.3).numpy()
        assert np.all((rmap == 0.0) | (rmap > 0.3))

    def test_null_survival_matches_the_t_tail(self):
        n, shape, threshold = 10, (32, 32), 0.3
        rng = np.random.default_rng(7)
        outputs = [rng.standard_normal(shape) for _ in range(n)]
        references = [rng.standard_normal(shape) for _ in range(n)]
        surviving = float(np.mean(correlation_map(outputs, references, threshold).numpy() > 0))
        t = threshold * np.sqrt(n - 2) / np.sqrt(1 - threshold ** 2)
        expected = stats.t.sf(t, n - 2)
        pixels = shape[0] * shape[1]
        assert abs(surviving - expected) < 4 * np.sqrt(expected * (1 - expected) / pixels)

    def test_needs_three_subjects(self):
        images = [np.ones((2, 2)), np.zeros((2, 2))]
        with pytest.raises(MetricsError):
            correlation_map(images, images)


# =============================================================================
# Report
# =============================================================================

def row(subject_id, method, psnr_db=30.0, ssim_value=0.9, snr=6.0, contrast=2.0):
    return {"subject_id": subject_id, "method": method, "psnr_db": psnr_db,
            "ssim": ssim_value, "snr": snr, "gmwm_contrast": contrast}


class TestMetricsReport:

    def test_single_row_aggregate(self):
        summary = MetricsReport([row("s0000", "input")]).aggregate()
        assert summary["method"].tolist() == ["input"]
        assert summary["n"].tolist() == [1]
        assert summary["psnr_db_mean"].iloc[0] == 30.0
        assert summary["psnr_db_std"].iloc[0] == 0.0

    def test_two_methods(self):
        report = MetricsReport()
        report.add(row("s0000", "input", psnr_db=20.0))
        report.add(row("s0001", "input", psnr_db=24.0))
        report.add(row("s0000", "dwan-lfn-l1", psnr_db=30.0))
        summary = report.aggregate().set_index("method")
        assert list(summary.index) == ["input", "dwan-lfn-l1"]
        assert summary.loc["input", "psnr_db_mean"] == 22.0
        assert summary.loc["input", "psnr_db_std"] == 2.0
        assert report.methods() == ["input", "dwan-lfn-l1"]

    def test_csv_round_trip(self, tmp_path):
        report = MetricsReport([row("s0000", "input", psnr_db=21.1234567), row("s0001", "pgs")])
        path = report.to_csv(tmp_path / "report.csv")
        assert path.read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
        loaded = MetricsReport.from_csv(path)
        assert len(loaded) == 2
        assert loaded.rows[0]["subject_id"] == "s0000"
        assert loaded.rows[0]["psnr_db"] == pytest.approx(21.123457, abs=1e-9)

    def test_malformed_reports(self, tmp_path):
        bad_columns = tmp_path / "bad.csv"
        bad_columns.write_text("subject_id,method,psnr\ns0000,input,1.0\n")
        with pytest.raises(MetricsError):
            MetricsReport.from_csv(bad_columns)
        bad_value = tmp_path / "value.csv"
        bad_value.write_text(",".join(REPORT_COLUMNS) + "\ns0000,input,high,0.9,6.0,2.0\n")
        with pytest.raises(MetricsError):
            MetricsReport.from_csv(bad_value)
        with pytest.raises(MetricsError):
            MetricsReport().add({"subject_id": "s0000"})
        with pytest.raises(MetricsError):
            MetricsReport().aggregate()

    def test_evaluate_image_on_a_phantom(self):
        subject = generate_subject(22, NoiseModel(60.0, seed=1))
        truth = subject.clean_cbf.numpy()
        noisy = segment_means(subject).input1
        result = evaluate_image("s0000", "input", noisy, truth, subject.gm, subject.wm, float(truth.max()))
        assert list(result) == REPORT_COLUMNS
        assert 0.0 < result["psnr_db"] < 99.0
        perfect = evaluate_image("s0000", "clean", truth, truth, subject.gm, subject.wm, float(truth.max()))
        assert perfect["psnr_db"] == 99.0
        assert perfect["ssim"] == pytest.approx(1.0)
        assert perfect["snr"] > result["snr"]


# =============================================================================
# PGM export
# =============================================================================

class TestPgm:

    def test_window_maps_range_to_gray(self):
        gray = window(np.array([[-5.0, 0.0, 60.0, 120.0, 500.0]]))
        assert gray.tolist() == [[0, 0, 128, 255, 255]]
        with pytest.raises(MetricsError):
            window(np.zeros((2, 2)), 5.0, 5.0)

    def test_saved_image_is_8_bit_grayscale(self, tmp_path):
        path = save_pgm(np.linspace(0, 120, 24).reshape(4, 6), tmp_path / "img.pgm")
        assert path.read_bytes()[:2] == b"P5"
        with Image.open(path) as image:
            assert image.mode == "L"
            assert image.size == (6, 4)
            assert np.asarray(image)[-1, -1] == 255

    def test_correlation_gray_levels(self, tmp_path):
        rmap = np.array([[0.0, 0.3, 0.30001, 1.0]])
        path = correlation_pgm(rmap, tmp_path / "r.pgm")
        with Image.open(path) as image:
            gray = np.asarray(image)
        assert gray[0, 0] == 0 and gray[0, 1] == 0
        assert gray[0, 2] == 1
        assert gray[0, 3] == 255

    def test_panel_has_separators(self, tmp_path):
        path = panel_pgm([np.full((4, 5), 120.0), np.full((4, 5), 120.0)], tmp_path / "panel.pgm")
        with Image.open(path) as image:
            gray = np.asarray(image)
        assert gray.shape == (9, 5)
        assert not gray[4].any()
        assert gray[:4].min() == 255
        with pytest.raises(ShapeMismatchError):
            panel_pgm([np.zeros((4, 5)), np.zeros((4, 6))], tmp_path / "bad.pgm")
