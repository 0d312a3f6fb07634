import math
import shutil

import numpy as np
import pytest

from didmdn.errors import MissingOutput, ShapeMismatch, TooSmall
from didmdn.metrics import (
    evaluate_dataset,
    format_psnr,
    psnr,
    ssim,
    ssim_scalar_oracle,
    to_luma,
)
from didmdn.raingen import load_image_u8


def structured_image(size=24, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = 0.3 + 0.4 * np.sin(yy / 3.0) * np.cos(xx / 5.0)
    img += 0.1 * rng.random((size, size))
    return np.clip(img, 0.0, 1.0)


class TestPsnr:
    def test_identical_images_give_infinity(self):
        a = np.random.default_rng(0).random((16, 16))
        assert psnr(a, a) == math.inf

    def test_unit_mse_at_unit_peak_is_zero_db(self):
        a = np.zeros((8, 8))
        b = np.ones((8, 8))
        assert psnr(a, b, peak=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form_peak_255_mse_100(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 10.0)  # MSE exactly 100
        assert psnr(a, b, peak=255.0) == pytest.approx(28.1308, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreases_with_noise_amplitude(self):
        rng = np.random.default_rng(2)
        a = rng.random((32, 32))
        noise = rng.standard_normal((32, 32))
        values = [psnr(a, a + amp * noise) for amp in (0.01, 0.05, 0.2)]
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_invalid_peak(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)), peak=0.0)


class TestSsim:
    def test_identical_images_give_exactly_one(self):
        a = structured_image(20)
        assert ssim(a, a) == 1.0

    def test_constant_images_closed_form(self):
        a = np.full((16, 16), 0.5)
        b = np.full((16, 16), 0.25)
        value = ssim(a, b, peak=1.0)
        # zero-variance windows: contrast/structure term reduces to 1
        exact = (2 * 0.5 * 0.25 + 1e-4) / (0.5**2 + 0.25**2 + 1e-4)
        assert value == pytest.approx(exact, abs=1e-12)
        assert value == pytest.approx(0.80013, abs=1e-4)

    def test_symmetry(self):
        a = structured_image(20, seed=3)
        b = structured_image(20, seed=4)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_scalar_loop_oracle_on_16x16(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((16, 16))
        b = np.clip(a + 0.1 * rng.standard_normal((16, 16)), 0.0, 1.0)
        assert abs(ssim(a, b) - ssim_scalar_oracle(a, b)) <= 1e-6

    def test_matches_oracle_on_color_input(self):
        rng = np.random.default_rng(5)
        a = rng.random((16, 16, 3))
        b = np.clip(a + 0.05 * rng.standard_normal((16, 16, 3)), 0.0, 1.0)
        assert abs(ssim(a, b) - ssim_scalar_oracle(a, b)) <= 1e-6

    def test_negated_natural_image_scores_low(self):
        a = structured_image(32, seed=7)
        value = ssim(a, 1.0 - a)
        assert value < 0.3
        assert value == pytest.approx(ssim_scalar_oracle(a, 1.0 - a), abs=1e-6)

    def test_color_input_uses_luma(self):
        rng = np.random.default_rng(8)
        a = rng.random((16, 16, 3))
        b = rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(to_luma(a), to_luma(b)), abs=1e-15)

    def test_too_small_raises(self):
        with pytest.raises(TooSmall):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))


class TestEvaluateDataset:
    def test_clean_outputs_score_perfectly(self, toy_dataset, tmp_path):
        out = tmp_path / "perfect"
        out.mkdir()
        for rec in toy_dataset.records:
            name = (toy_dataset.root / rec.rainy_path).name
            shutil.copy(toy_dataset.resolve(rec.clean_path), out / name)
        report = evaluate_dataset(toy_dataset, out)
        assert report.psnr_db == math.inf
        assert report.ssim == pytest.approx(1.0, abs=1e-12)
        assert report.n_images == len(toy_dataset)

    def test_rainy_outputs_equal_manual_per_image_mean(self, toy_dataset, tmp_path):
        out = tmp_path / "rainy"
        out.mkdir()
        manual_psnr, manual_ssim = [], []
        for rec in toy_dataset.records:
            src = toy_dataset.resolve(rec.rainy_path)
            shutil.copy(src, out / src.name)
            clean = load_image_u8(toy_dataset.resolve(rec.clean_path)) / 255.0
            rainy = load_image_u8(src) / 255.0
            manual_psnr.append(psnr(rainy, clean))
            manual_ssim.append(ssim(rainy, clean))
        report = evaluate_dataset(toy_dataset, out)
        assert report.psnr_db == pytest.approx(float(np.mean(manual_psnr)), abs=1e-12)
        assert report.ssim == pytest.approx(float(np.mean(manual_ssim)), abs=1e-12)

    def test_single_record_equals_pair_metrics(self, toy_dataset, tmp_path):
        import didmdn.raingen as rg

        rec = toy_dataset.records[0]
        sub = rg.DatasetManifest(
            records=[rec],
            counts_per_label={rec.label: 1},
            global_seed=toy_dataset.global_seed,
            root=toy_dataset.root,
        )
        out = tmp_path / "single"
        out.mkdir()
        src = toy_dataset.resolve(rec.rainy_path)
        shutil.copy(src, out / src.name)
        report = evaluate_dataset(sub, out)
        clean = load_image_u8(toy_dataset.resolve(rec.clean_path)) / 255.0
        rainy = load_image_u8(src) / 255.0
        assert report.n_images == 1
        assert report.psnr_db == pytest.approx(psnr(rainy, clean), abs=1e-12)
        assert report.ssim == pytest.approx(ssim(rainy, clean), abs=1e-12)

    def test_missing_output_names_the_record(self, toy_dataset, tmp_path):
        out = tmp_path / "empty"
        out.mkdir()
        with pytest.raises(MissingOutput) as exc:
            evaluate_dataset(toy_dataset, out)
        name = (toy_dataset.root / toy_dataset.records[0].rainy_path).name
        assert name in str(exc.value)


def test_format_psnr():
    assert format_psnr(math.inf) == "inf"
    assert format_psnr(28.13079) == "28.1308"
