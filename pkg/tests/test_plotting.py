import csv

from PIL import Image

from umafd.plotting import _smooth, plot_ablation, plot_protocols, plot_report, plot_training_log
from umafd.trainer import LOG_HEADER


def _png_ok(path):
    with Image.open(path) as img:
        return img.format == "PNG" and img.size[0] > 100


def test_smooth_running_mean():
    assert _smooth([1, 2, 3, 4], 2) == [1.0, 1.5, 2.5, 3.5]
    assert _smooth([5, 6], 10) == [5, 6]


def test_training_log_figure(tmp_path):
    log = tmp_path / "train_log.csv"
    with open(log, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for i in range(30):
            w.writerow([i, 1 / (i + 1), 0, 0.69, 0.1, 0.2, 2.0, 1, 1, 1, 1, 1, 1])
    assert _png_ok(plot_training_log(log, tmp_path / "curve.png", window=5))


def test_report_and_ablation_figures(tmp_path):
    rep = tmp_path / "report.csv"
    rep.write_text("protocol,seed,accuracy,precision,recall,f1,auc\numafd,0,0.8,0.7,0.9,0.79,0.85\numafd,median,0.8,0.7,0.9,0.79,0.85\n")
    assert _png_ok(plot_report(rep, tmp_path / "r.png"))
    abl = tmp_path / "ablation.csv"
    abl.write_text("stage,accuracy,precision,recall,f1,auc\n" + "".join(f"V-0{i},0.{i},0.5,0.5,0.5,0.5\n" for i in range(1, 7)))
    assert _png_ok(plot_ablation(abl, tmp_path / "a.png"))
    assert _png_ok(plot_protocols({"baseline": 0.5, "umafd": 0.7, "supervised-target": 0.95}, tmp_path / "p.png"))
