import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fc2n.autograd import Tensor
from fc2n.data import rgb_to_y
from fc2n.errors import DimensionError
from fc2n.evaluate import (
    PSNR_CAP,
    BicubicPredictor,
    EvalReport,
    ModelPredictor,
    bicubic_baseline_psnr,
    data_range_ensemble,
    ensemble_predict,
    evaluate_dataset,
    evaluate_images,
    geometric_self_ensemble,
    psnr_y,
    ssim_y,
)
from fc2n.model import ModelConfig, build_model

from conftest import natural_images


# ---------------------------------------------------------------------------
# metrics


def test_psnr_of_constant_offset(rng):
    gt = rng.uniform(20, 200, size=(16, 16, 3))
    # a uniform RGB offset d moves Y by d * 219.859 / 256
    d = 4.0
    dy = d * (65.738 + 129.057 + 25.064) / 256
    assert psnr_y(gt + d, gt) == pytest.approx(10 * math.log10(255**2 / dy**2), abs=1e-12)


def test_psnr_cap_and_shave(rng):
    gt = rng.uniform(0, 255, size=(10, 10, 3))
    assert psnr_y(gt, gt) == PSNR_CAP
    pred = gt.copy()
    pred[0, :] += 50  # only the shaved border differs
    assert psnr_y(pred, gt, shave=1) == PSNR_CAP
    assert psnr_y(pred, gt) < 40
    with pytest.raises(DimensionError):
        psnr_y(gt, gt[:-1])
    with pytest.raises(DimensionError):
        psnr_y(gt, gt, shave=5)


def test_ssim_of_constant_images():
    # zero variance leaves only the luminance term (2ab + C1) / (a^2 + b^2 + C1)
    a, b = 80.0, 120.0
    c1 = (0.01 * 255) ** 2
    got = ssim_y(np.full((12, 12), a), np.full((12, 12), b))
    assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), abs=1e-12)


def test_ssim_matches_scikit_image(rng):
    skm = pytest.importorskip("skimage.metrics")
    gt = rng.uniform(0, 255, size=(40, 36, 3))
    pred = np.clip(gt + rng.normal(scale=12, size=gt.shape), 0, 255)
    ref = skm.structural_similarity(rgb_to_y(pred), rgb_to_y(gt), data_range=255, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False, win_size=11)
    assert ssim_y(pred, gt) == pytest.approx(ref, abs=1e-6)


def test_ssim_identity_and_window_size(rng):
    gt = rng.uniform(0, 255, size=(14, 14, 3))
    assert ssim_y(gt, gt) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DimensionError):
        ssim_y(gt, gt, shave=2)


@given(st.integers(0, 2**31 - 1), st.floats(0.5, 30))
@settings(max_examples=25, deadline=None)
def test_metrics_worsen_with_noise(seed, sigma):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 255, size=(16, 16, 3))
    noise = rng.normal(size=gt.shape)
    small, large = gt + sigma * noise, gt + 2 * sigma * noise
    assert psnr_y(small, gt) > psnr_y(large, gt)
    assert ssim_y(small, gt) > ssim_y(large, gt)


# ---------------------------------------------------------------------------
# ensembles


def brute_force_geometric(predict, x):
    """Eight explicit branches built from flips and transposes."""
    branches = [
        (lambda a: a, lambda a: a),
        (lambda a: a[:, ::-1], lambda a: a[:, ::-1]),
        (lambda a: a[::-1], lambda a: a[::-1]),
        (lambda a: a[::-1, ::-1], lambda a: a[::-1, ::-1]),
        (lambda a: a.transpose(1, 0, 2), lambda a: a.transpose(1, 0, 2)),
        (lambda a: a.transpose(1, 0, 2)[:, ::-1], lambda a: a[:, ::-1].transpose(1, 0, 2)),
        (lambda a: a.transpose(1, 0, 2)[::-1], lambda a: a[::-1].transpose(1, 0, 2)),
        (lambda a: a[::-1, ::-1].transpose(1, 0, 2), lambda a: a.transpose(1, 0, 2)[::-1, ::-1]),
    ]
    return sum(inv(predict(fwd(x))) for fwd, inv in branches) / 8


class NonEquivariant:
    """Position-dependent toy predictor: x2 nearest upscale plus a ramp."""

    forward_calls = 0

    def __call__(self, x):
        self.forward_calls += 1
        up = np.kron(x, np.ones((2, 2, 1)))
        return up * 0.9 + np.arange(up.shape[0])[:, None, None] + 0.3 * np.arange(up.shape[1])[None, :, None]


def test_geometric_matches_brute_force(rng):
    x = rng.uniform(0, 255, size=(5, 7, 3))
    f = NonEquivariant()
    got = geometric_self_ensemble(f, x, clamp=False)
    assert f.forward_calls == 8
    np.testing.assert_allclose(got, brute_force_geometric(f, x), rtol=0, atol=1e-6)


def test_range_matches_brute_force(rng):
    x = rng.uniform(0, 255, size=(5, 7, 3))
    f = NonEquivariant()
    expect = (f(x) + 255 - f(255 - x)) / 2
    np.testing.assert_allclose(data_range_ensemble(f, x, clamp=False), expect, rtol=0, atol=1e-6)


def test_combined_matches_brute_force(rng):
    x = rng.uniform(0, 255, size=(4, 6, 3))
    f = NonEquivariant()
    expect = (brute_force_geometric(f, x) + 255 - brute_force_geometric(f, 255 - x)) / 2
    np.testing.assert_allclose(ensemble_predict(f, x, "geo+range"), np.clip(expect, 0, 255), rtol=0, atol=1e-6)


def test_ensembles_are_idempotent_for_equivariant_predictors(rng):
    # x2 bicubic on integer images is exact in binary floating point, so it
    # commutes bit-for-bit with every flip, transpose and complement
    x = rng.integers(0, 256, size=(9, 12, 3)).astype(float)
    f = BicubicPredictor(2)
    direct = f(x)
    assert np.array_equal(geometric_self_ensemble(f, x, clamp=False), direct)
    assert np.array_equal(data_range_ensemble(f, x, clamp=False), direct)
    assert np.array_equal(ensemble_predict(f, x, "geo+range"), np.clip(direct, 0, 255))


def test_model_forward_pass_counts(rng):
    model = build_model(ModelConfig(n=1, m=1, base_width=4, expand_width=8), rng_seed=0)
    pred = ModelPredictor(model)
    x = rng.uniform(0, 255, size=(6, 5, 3))
    for mode, calls in (("none", 1), ("geo", 8), ("geo+range", 16)):
        before = pred.forward_calls
        out = ensemble_predict(pred, x, mode)
        assert out.shape == (12, 10, 3)
        assert out.min() >= 0 and out.max() <= 255
        assert pred.forward_calls - before == calls
    with pytest.raises(ValueError):
        ensemble_predict(pred, x, "median")


def test_model_predictor_scales_values(rng):
    model = build_model(ModelConfig(n=1, m=1, base_width=4, expand_width=8), rng_seed=0)
    x = rng.uniform(0, 255, size=(4, 4, 3))
    direct = model(Tensor(x[None] / 255.0)).data[0] * 255
    np.testing.assert_allclose(ModelPredictor(model)(x), direct, atol=1e-12)


# ---------------------------------------------------------------------------
# dataset evaluation


def test_identity_scores_cap(rng):
    hr = [rng.integers(0, 256, size=(20, 22, 3)).astype(float) for _ in range(2)]
    report = evaluate_images(BicubicPredictor(1), hr, 1)
    assert report.mean_psnr == PSNR_CAP
    assert report.mean_ssim == pytest.approx(1.0)


def test_report_formats(rng):
    report = EvalReport("set", 2, "none", [("a.png", 30.0, 0.9), ("b.png", 32.0, 0.8)])
    assert report.mean_psnr == 31.0 and report.mean_ssim == pytest.approx(0.85)
    lines = report.to_csv().splitlines()
    assert lines[0] == "image,psnr_db,ssim"
    assert lines[1] == "a.png,30.0,0.9"
    assert lines[-1].startswith("MEAN,31.0,")
    assert "MEAN" in report.to_table().splitlines()[-1]


def test_evaluate_dataset_from_directory(tmp_path, rng):
    from fc2n.data import downsample, save_image

    hr_dir, lr_dir = tmp_path / "hr", tmp_path / "lr"
    hr_dir.mkdir()
    lr_dir.mkdir()
    imgs = [rng.integers(0, 256, size=(24, 26, 3)).astype(float) for _ in range(2)]
    for i, img in enumerate(imgs):
        save_image(img, hr_dir / f"im{i}.png")
        save_image(downsample(img, 2), lr_dir / f"im{i}x2.png")
    model = build_model(ModelConfig(n=1, m=1, base_width=4, expand_width=8), rng_seed=0)
    synth = evaluate_dataset(model, hr_dir, 2)
    paired = evaluate_dataset(model, hr_dir, 2, lr_dir=lr_dir)
    assert [r[0] for r in synth.rows] == ["im0.png", "im1.png"]
    assert synth.rows == paired.rows
    threaded = evaluate_dataset(model, hr_dir, 2, workers=2)
    assert threaded.rows == synth.rows


def test_bicubic_baseline_on_photographs():
    # down-then-up bicubic on natural photos lands in the usual 25-40 dB band,
    # and x2 is always easier than x4
    for img in natural_images(max_side=256)[:4]:
        p2, p4 = bicubic_baseline_psnr(img, 2), bicubic_baseline_psnr(img, 4)
        assert 22 < p4 < p2 < 45
