"""Y-channel PSNR/SSIM, inference-time ensembles and dataset evaluation.

A *predictor* is any callable mapping an (h, w, 3) LR image on the 0..255
scale to an unclamped SR image on the same scale. :func:`as_predictor`
wraps a :class:`~fc2n.model.Model`; :class:`BicubicPredictor` is the
interpolation baseline.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fc2n.autograd import Tensor
from fc2n.data import (
    bicubic_resize,
    crop_to_multiple,
    dihedral,
    dihedral_inverse,
    downsample,
    find_paired_lr,
    list_images,
    load_image,
    quantize,
    rgb_to_y,
)
from fc2n.errors import DimensionError
from fc2n.model import Model, model_forward

PSNR_CAP = 99.0
ENSEMBLE_MODES = ("none", "geo", "geo+range")

Predictor = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# metrics


def _shave(a: np.ndarray, s: int) -> np.ndarray:
    return a[s:a.shape[0] - s, s:a.shape[1] - s] if s > 0 else a


def _prepare_y(pred: np.ndarray, gt: np.ndarray, shave: int) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    yp = _shave(rgb_to_y(pred) if pred.ndim == 3 else pred, shave)
    yg = _shave(rgb_to_y(gt) if gt.ndim == 3 else gt, shave)
    if yp.size == 0:
        raise DimensionError(f"nothing left after shaving {shave} pixels")
    return yp, yg


def psnr_from_mse(mse: float, peak: float = 255.0) -> float:
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr_y(pred: np.ndarray, gt: np.ndarray, shave: int = 0) -> float:
    """PSNR in dB of the Y channels, capped at 99 dB.

    RGB inputs (H, W, 3) are converted to luma; 2-D inputs are taken as Y.
    """
    yp, yg = _prepare_y(pred, gt, shave)
    return psnr_from_mse(float(np.mean((yp - yg) ** 2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(a, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_y(pred: np.ndarray, gt: np.ndarray, shave: int = 0) -> float:
    """Mean SSIM of the Y channels over all valid 11x11 Gaussian windows (sigma 1.5)."""
    yp, yg = _prepare_y(pred, gt, shave)
    if min(yp.shape) < 11:
        raise DimensionError(f"image {yp.shape} is smaller than the 11x11 SSIM window")
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    g = _gaussian_window()
    mu1, mu2 = _filter_valid(yp, g), _filter_valid(yg, g)
    s11 = _filter_valid(yp * yp, g) - mu1 * mu1
    s22 = _filter_valid(yg * yg, g) - mu2 * mu2
    s12 = _filter_valid(yp * yg, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# predictors


class ModelPredictor:
    """Runs a model on one 0..255 image at a time."""

    def __init__(self, model: Model):
        self.model = model

    @property
    def scale(self) -> int:
        return self.model.config.scale

    @property
    def forward_calls(self) -> int:
        return self.model.forward_calls

    def __call__(self, img: np.ndarray) -> np.ndarray:
        x = Tensor(np.ascontiguousarray(img)[None] / 255.0, dtype=self.model.dtype)
        y = model_forward(self.model, x)
        return y.data[0].astype(np.float64) * 255.0


class BicubicPredictor:
    """Bicubic upscaling baseline."""

    def __init__(self, scale: int):
        self.scale = scale
        self.forward_calls = 0

    def __call__(self, img: np.ndarray) -> np.ndarray:
        self.forward_calls += 1
        if self.scale == 1:
            return np.array(img, dtype=np.float64)
        return bicubic_resize(img, self.scale, antialias=False)


def as_predictor(model) -> Predictor:
    return ModelPredictor(model) if isinstance(model, Model) else model


# ---------------------------------------------------------------------------
# ensembles


def _pairwise_mean(items: Sequence[np.ndarray]) -> np.ndarray:
    # fixed binary-tree order: averaging identical inputs returns them exactly
    level = list(items)
    count = len(level)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0] / count


def geometric_self_ensemble(predict: Predictor, lr_img: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Average of predictions over the 8 flips/rotations, each mapped back first."""
    outs = [dihedral_inverse(predict(dihedral(lr_img, k)), k) for k in range(8)]
    out = _pairwise_mean(outs)
    return np.clip(out, 0, 255) if clamp else out


def data_range_ensemble(predict: Predictor, lr_img: np.ndarray, clamp: bool = True) -> np.ndarray:
    """``[f(x) + 255 - f(255 - x)] / 2``."""
    lr_img = np.asarray(lr_img, dtype=np.float64)
    y = predict(lr_img)
    y_bar = predict(255.0 - lr_img)
    out = (y + (255.0 - y_bar)) / 2.0
    return np.clip(out, 0, 255) if clamp else out


def ensemble_predict(predict: Predictor, lr_img: np.ndarray, mode: str = "none") -> np.ndarray:
    """Clamped SR prediction with ensemble ``mode`` in none | geo | geo+range."""
    if mode == "none":
        return np.clip(predict(np.asarray(lr_img, dtype=np.float64)), 0, 255)
    if mode == "geo":
        return geometric_self_ensemble(predict, lr_img)
    if mode == "geo+range":
        return data_range_ensemble(lambda x: geometric_self_ensemble(predict, x, clamp=False), lr_img)
    raise ValueError(f"unknown ensemble mode {mode!r}; expected one of {ENSEMBLE_MODES}")


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    dataset: str
    scale: int
    ensemble: str
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0

    def __post_init__(self):
        if self.rows:
            self.mean_psnr = float(np.mean([r[1] for r in self.rows]))
            self.mean_ssim = float(np.mean([r[2] for r in self.rows]))

    def to_table(self) -> str:
        width = max([5] + [len(r[0]) for r in self.rows])
        lines = [
            f"dataset={self.dataset} scale=x{self.scale} ensemble={self.ensemble}",
            f"{'image':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>7}",
        ]
        for name, p, s in self.rows:
            lines.append(f"{name:<{width}}  {p:9.3f}  {s:7.4f}")
        lines.append(f"{'MEAN':<{width}}  {self.mean_psnr:9.3f}  {self.mean_ssim:7.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr_db", "ssim"])
        for name, p, s in self.rows:
            w.writerow([name, repr(p), repr(s)])
        w.writerow(["MEAN", repr(self.mean_psnr), repr(self.mean_ssim)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def evaluate_images(predict: Predictor, hr_images: Sequence[np.ndarray], scale: int, ensemble_mode: str = "none",
                    shave: int | None = None, lr_images: Sequence[np.ndarray] | None = None,
                    names: Sequence[str] | None = None, dataset: str = "images", workers: int = 1) -> EvalReport:
    """Score in-memory HR images; LR inputs are synthesized by bicubic downsampling unless given."""
    if not hr_images:
        raise ValueError("dataset is empty")
    if ensemble_mode not in ENSEMBLE_MODES:
        raise ValueError(f"unknown ensemble mode {ensemble_mode!r}; expected one of {ENSEMBLE_MODES}")
    shave = scale if shave is None else shave
    names = list(names) if names is not None else [f"img{i:03d}" for i in range(len(hr_images))]

    def score(i: int) -> tuple[str, float, float]:
        hr = crop_to_multiple(np.asarray(hr_images[i], dtype=np.float64), scale)
        lr = downsample(hr, scale) if lr_images is None else np.asarray(lr_images[i], dtype=np.float64)
        sr = quantize(ensemble_predict(predict, lr, ensemble_mode))
        if sr.shape != hr.shape:
            raise DimensionError(f"{names[i]}: SR output {sr.shape} does not match HR {hr.shape}")
        return names[i], psnr_y(sr, hr, shave), ssim_y(sr, hr, shave)

    idx = range(len(hr_images))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, idx))
    else:
        rows = [score(i) for i in idx]
    return EvalReport(dataset, scale, ensemble_mode, rows)


def evaluate_dataset(model, hr_dir, scale: int, ensemble_mode: str = "none", shave: int | None = None,
                     lr_dir=None, workers: int = 1) -> EvalReport:
    """Evaluate every image of ``hr_dir`` in file-name order.

    ``shave`` defaults to ``scale`` pixels per border.
    """
    paths = list_images(hr_dir)
    if not paths:
        raise ValueError(f"no images in {hr_dir}")
    hr = [load_image(p) for p in paths]
    lr = None if lr_dir is None else [load_image(find_paired_lr(p, lr_dir, scale)) for p in paths]
    return evaluate_images(as_predictor(model), hr, scale, ensemble_mode, shave, lr, [p.name for p in paths],
                           Path(hr_dir).name, workers)


def bicubic_baseline_psnr(hr: np.ndarray, scale: int, shave: int | None = None) -> float:
    """Y-PSNR of bicubic down-then-up resampling of one HR image."""
    hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), scale)
    lr = downsample(hr, scale)
    sr = quantize(bicubic_resize(lr, Fraction(scale), antialias=False))
    return psnr_y(sr, hr, scale if shave is None else shave)
