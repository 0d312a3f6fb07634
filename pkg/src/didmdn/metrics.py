"""Reference PSNR and SSIM used for all evaluation.

PSNR is 10*log10(peak^2 / MSE), +inf on identical inputs. SSIM is the
standard windowed formulation: 11x11 Gaussian window with sigma 1.5,
C1=(0.01 L)^2, C2=(0.03 L)^2, averaged over all fully valid windows.
Color inputs are converted to luma (BT.601 weights) before SSIM.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import MissingOutput, ShapeMismatch, TooSmall
from .raingen import DatasetManifest, load_image_u8

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclasses.dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_images: int
    per_image: list[tuple[str, float, float]] = dataclasses.field(default_factory=list)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the MSE is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def to_luma(img: np.ndarray) -> np.ndarray:
    """Collapse an (H, W, 3) image to single-channel luma; pass gray through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    raise ShapeMismatch(f"expected (H, W) or (H, W, 3), got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over 11x11 Gaussian-weighted windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    ya, yb = to_luma(a), to_luma(b)
    h, w = ya.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise TooSmall(f"spatial dims {(h, w)} below SSIM window {SSIM_WINDOW}")

    window = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def win(x):
        return signal.correlate2d(x, window, mode="valid")

    mu_a = win(ya)
    mu_b = win(yb)
    var_a = win(ya * ya) - mu_a * mu_a
    var_b = win(yb * yb) - mu_b * mu_b
    cov = win(ya * yb) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_scalar_oracle(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Naive per-window loop evaluation of SSIM; the independent cross-check.

    Deliberately written as explicit loops over window positions rather than
    via convolution, so it shares no code path with `ssim`.
    """
    ya = to_luma(np.asarray(a, dtype=np.float64))
    yb = to_luma(np.asarray(b, dtype=np.float64))
    if ya.shape != yb.shape:
        raise ShapeMismatch(f"shape {ya.shape} vs {yb.shape}")
    h, w = ya.shape
    n = SSIM_WINDOW
    if h < n or w < n:
        raise TooSmall(f"spatial dims {(h, w)} below SSIM window {n}")
    window = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    values = []
    for i in range(h - n + 1):
        for j in range(w - n + 1):
            pa = ya[i : i + n, j : j + n]
            pb = yb[i : i + n, j : j + n]
            mu_a = float((window * pa).sum())
            mu_b = float((window * pb).sum())
            var_a = float((window * pa * pa).sum()) - mu_a * mu_a
            var_b = float((window * pb * pb).sum()) - mu_b * mu_b
            cov = float((window * pa * pb).sum()) - mu_a * mu_b
            num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
            den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return float(np.mean(values))


def format_psnr(value: float) -> str:
    """Render a PSNR value for reports; infinity prints as "inf"."""
    return "inf" if math.isinf(value) else f"{value:.4f}"


def evaluate_dataset(manifest: DatasetManifest, model_outputs: Path) -> MetricReport:
    """Average PSNR/SSIM of restored outputs against clean ground truth.

    Expects `model_outputs` to contain one file per manifest record, named
    like the record's rainy image.
    """
    model_outputs = Path(model_outputs)
    psnrs, ssims, rows = [], [], []
    for rec in manifest.records:
        name = Path(rec.rainy_path).name
        out_path = model_outputs / name
        if not out_path.exists():
            raise MissingOutput(f"no model output for record {name} at {out_path}")
        clean = load_image_u8(manifest.resolve(rec.clean_path)).astype(np.float64) / 255.0
        out = load_image_u8(out_path).astype(np.float64) / 255.0
        p = psnr(out, clean)
        s = ssim(out, clean)
        psnrs.append(p)
        ssims.append(s)
        rows.append((name, p, s))
    mean_psnr = math.inf if any(math.isinf(p) for p in psnrs) else float(np.mean(psnrs))
    return MetricReport(
        psnr_db=mean_psnr,
        ssim=float(np.mean(ssims)),
        n_images=len(rows),
        per_image=rows,
    )
