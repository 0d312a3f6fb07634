"""Ablation harness: train the four model configurations under one budget.

Configurations, in report order:

* Single          the kernel-5 stream alone, no label fusion
* Yang-Multi      dilated-conv multi-scale trunk, no label fusion
* Multi-no-label  three dense streams, no label fusion
* DID-MDN         three dense streams with density-label fusion

Each is trained from the same seed list with an identical step budget and
scored on a held-out set; the report carries the published full-scale
reference numbers for the same four configurations as annotations.
"""

from __future__ import annotations

import dataclasses
import statistics

import torch

from .derainer import DerainerConfig, MultiStreamDerainNet
from .metrics import psnr, ssim
from .raingen import DatasetManifest
from .trainer import OptimConfig, TrainResult, pair_to_tensors, train_derainer

# (report name, variant, published full-scale PSNR dB, published SSIM)
ABLATION_CONFIGS = (
    ("Single", "single", 26.05, 0.8893),
    ("Yang-Multi", "yang_multi", 26.75, 0.8901),
    ("Multi-no-label", "multi_no_label", 27.56, 0.9028),
    ("DID-MDN", "didmdn", 27.95, 0.9087),
)


@dataclasses.dataclass
class AblationReport:
    rows: list[dict]
    metadata: dict


@torch.no_grad()
def score_model(model: MultiStreamDerainNet, manifest: DatasetManifest) -> tuple[float, float]:
    """Mean PSNR/SSIM of clipped refined outputs against clean ground truth.

    Ground-truth labels feed the fusion input for the label-using variant,
    so the score isolates the architecture rather than classifier noise.
    """
    psnrs, ssims = [], []
    for rec in manifest.records:
        pair = manifest.load_pair(rec)
        y, clean, _ = pair_to_tensors(pair)
        label = pair.label if model.cfg.uses_label else None
        out = model.derain(y, label)
        refined = out.refined[0].numpy().transpose(1, 2, 0)
        target = clean[0].numpy().transpose(1, 2, 0)
        psnrs.append(psnr(refined, target))
        ssims.append(ssim(refined, target))
    return float(statistics.fmean(psnrs)), float(statistics.fmean(ssims))


def run_ablation(
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    seeds: tuple[int, ...] = (0, 1, 2),
    base_model_cfg: DerainerConfig | None = None,
    optim_cfg: OptimConfig | None = None,
    max_steps: int | None = None,
    progress=None,
) -> AblationReport:
    """Train and score all four configurations; metrics are medians over seeds."""
    base_model_cfg = base_model_cfg or DerainerConfig()
    optim_cfg = optim_cfg or OptimConfig()
    rows = []
    for name, variant, ref_psnr, ref_ssim in ABLATION_CONFIGS:
        cfg = dataclasses.replace(base_model_cfg, variant=variant)
        per_seed_psnr, per_seed_ssim = [], []
        for seed in seeds:
            result: TrainResult = train_derainer(
                train_manifest, cfg, optim_cfg, seed=seed, max_steps=max_steps
            )
            p, s = score_model(result.model, test_manifest)
            per_seed_psnr.append(p)
            per_seed_ssim.append(s)
            if progress is not None:
                progress(name, seed, p, s)
        rows.append(
            {
                "config": name,
                "variant": variant,
                "psnr_db": float(statistics.median(per_seed_psnr)),
                "ssim": float(statistics.median(per_seed_ssim)),
                "psnr_per_seed": per_seed_psnr,
                "ssim_per_seed": per_seed_ssim,
                "reference_psnr_db": ref_psnr,
                "reference_ssim": ref_ssim,
            }
        )
    metadata = {
        "seeds": ",".join(str(s) for s in seeds),
        "epochs": optim_cfg.epochs,
        "max_steps": max_steps if max_steps is not None else "none",
        "train_records": len(train_manifest),
        "test_records": len(test_manifest),
        "reference_ordering": "DID-MDN 27.95 > Multi-no-label 27.56 > Yang-Multi 26.75 > Single 26.05 (full scale)",
    }
    return AblationReport(rows=rows, metadata=metadata)
