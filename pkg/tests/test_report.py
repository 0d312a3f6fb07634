import csv
import math

from didmdn.metrics import MetricReport
from didmdn.report import (
    write_ablation_report,
    write_evaluation_report,
    write_loss_curve,
)
from didmdn.trainer import DERAINER_CURVE_COLUMNS


def test_loss_curve_csv_and_figure(tmp_path):
    curve = [(i, 0.1 / (i + 1), 0.2, 0.05, 0.35, 0.001) for i in range(10)]
    csv_path = tmp_path / "curve.csv"
    fig_path = tmp_path / "curve.png"
    write_loss_curve(curve, DERAINER_CURVE_COLUMNS, csv_path, fig_path)
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(DERAINER_CURVE_COLUMNS)
    assert len(rows) == 11
    assert fig_path.stat().st_size > 0


def test_evaluation_report_rows_and_aggregate(tmp_path):
    report = MetricReport(
        psnr_db=math.inf,
        ssim=1.0,
        n_images=2,
        per_image=[("a.png", math.inf, 1.0), ("b.png", 25.5, 0.9)],
    )
    csv_path = tmp_path / "report.csv"
    write_evaluation_report(report, csv_path, tmp_path / "report.png")
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image", "psnr_db", "ssim"]
    assert rows[1][1] == "inf"
    assert rows[-1][0] == "mean"
    assert rows[-1][1] == "inf"
    assert (tmp_path / "report.png").stat().st_size > 0


def test_ablation_report_contents(tmp_path):
    rows = [
        {
            "config": name,
            "psnr_db": 20.0 + i,
            "ssim": 0.8 + 0.01 * i,
            "psnr_per_seed": [20.0 + i, 20.1 + i],
            "ssim_per_seed": [0.8, 0.81],
            "reference_psnr_db": ref_p,
            "reference_ssim": ref_s,
        }
        for i, (name, ref_p, ref_s) in enumerate(
            [
                ("Single", 26.05, 0.8893),
                ("Yang-Multi", 26.75, 0.8901),
                ("Multi-no-label", 27.56, 0.9028),
                ("DID-MDN", 27.95, 0.9087),
            ]
        )
    ]
    csv_path = tmp_path / "ablation.csv"
    write_ablation_report(rows, {"seeds": "0,1,2"}, csv_path, tmp_path / "ablation.png")
    text = csv_path.read_text()
    assert "# seeds,0,1,2" in text.replace('"', "")
    for name in ("Single", "Yang-Multi", "Multi-no-label", "DID-MDN"):
        assert name in text
    assert "27.95" in text
    assert (tmp_path / "ablation.png").stat().st_size > 0
