"""Density-aware single-image de-raining toolkit."""

from .density import ALL_LABELS, COVERAGE_BANDS, DensityLabel
from .raingen import (
    DatasetManifest,
    RainParams,
    SamplePair,
    build_dataset,
    compose,
    density_to_params,
    generate_clean_images,
    render_streaks,
)
from .metrics import MetricReport, evaluate_dataset, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "ALL_LABELS",
    "COVERAGE_BANDS",
    "DensityLabel",
    "DatasetManifest",
    "MetricReport",
    "RainParams",
    "SamplePair",
    "build_dataset",
    "compose",
    "density_to_params",
    "evaluate_dataset",
    "generate_clean_images",
    "psnr",
    "render_streaks",
    "__version__",
]
