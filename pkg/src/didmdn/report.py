"""Delimited reports and the matplotlib figures rendered alongside them."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport, format_psnr


def write_loss_curve(
    curve: list[tuple], columns: tuple[str, ...], csv_path: Path, fig_path: Path | None = None
) -> None:
    """Dump a training curve as CSV and render the loss traces to a PNG."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(curve)
    if fig_path is None or not curve:
        return
    steps = [row[0] for row in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in range(1, len(columns)):
        name = columns[col]
        if name == "lr" or name == "stage":
            continue
        ax.plot(steps, [row[col] for row in curve], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def write_evaluation_report(
    report: MetricReport, csv_path: Path, fig_path: Path | None = None
) -> None:
    """Per-image metric rows plus the aggregate, with a summary figure."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image", "psnr_db", "ssim"))
        for name, p, s in report.per_image:
            writer.writerow((name, format_psnr(p), f"{s:.6f}"))
        writer.writerow(("mean", format_psnr(report.psnr_db), f"{report.ssim:.6f}"))
    if fig_path is None:
        return
    finite = [(p, s) for _, p, s in report.per_image if math.isfinite(p)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    if finite:
        axes[0].hist([p for p, _ in finite], bins=min(20, max(3, len(finite))), color="steelblue")
    axes[0].set_xlabel("PSNR (dB)")
    axes[0].set_ylabel("images")
    axes[1].hist([s for _, _, s in report.per_image], bins=min(20, max(3, report.n_images)), color="darkorange")
    axes[1].set_xlabel("SSIM")
    fig.suptitle(
        f"n={report.n_images}  mean PSNR={format_psnr(report.psnr_db)} dB  mean SSIM={report.ssim:.4f}"
    )
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def write_ablation_report(rows: list[dict], metadata: dict, csv_path: Path, fig_path: Path | None = None) -> None:
    """Table-shaped comparison of the four ablation configurations.

    Each row carries the measured toy-scale metrics next to the published
    full-scale reference values for the same configuration.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for key, value in sorted(metadata.items()):
            writer.writerow((f"# {key}", value))
        writer.writerow(
            ("config", "psnr_db", "ssim", "psnr_per_seed", "ssim_per_seed", "reference_psnr_db", "reference_ssim")
        )
        for row in rows:
            writer.writerow(
                (
                    row["config"],
                    f"{row['psnr_db']:.4f}",
                    f"{row['ssim']:.6f}",
                    ";".join(f"{v:.4f}" for v in row["psnr_per_seed"]),
                    ";".join(f"{v:.6f}" for v in row["ssim_per_seed"]),
                    f"{row['reference_psnr_db']:.2f}",
                    f"{row['reference_ssim']:.4f}",
                )
            )
    if fig_path is None:
        return
    names = [row["config"] for row in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    x = range(len(rows))
    axes[0].bar(x, [row["psnr_db"] for row in rows], color="steelblue")
    axes[0].set_xticks(list(x), names, rotation=15, fontsize=8)
    axes[0].set_ylabel("PSNR (dB)")
    axes[0].set_title("toy-scale PSNR (median over seeds)")
    axes[1].bar(x, [row["reference_psnr_db"] for row in rows], color="gray")
    axes[1].set_xticks(list(x), names, rotation=15, fontsize=8)
    axes[1].set_ylabel("PSNR (dB)")
    axes[1].set_title("published full-scale reference")
    axes[1].set_ylim(25, 29)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
