"""Rebuild figures and a per-scene CSV from a run directory's artifacts."""
from pathlib import Path

import numpy as np

from . import plots
from .experiment import read_csv, write_csv

SCENE_FIELDS = ("scene", "peak_iou", "peak_epoch", "final_iou", "area_at_peak", "final_label_iou")


def load_curves(run_dir, key="iou"):
    files = sorted((Path(run_dir) / "metrics").glob("scene_*.csv"))
    if not files:
        raise FileNotFoundError(f"{run_dir}: no metrics/scene_*.csv")
    cols = [[float(r[key]) for r in read_csv(f)] for f in files]
    return np.array(cols).T


def render(run_dir):
    """Write figures/*.png and scenes.csv under ``run_dir``; returns the scene rows."""
    run = Path(run_dir)
    fig = run / "figures"
    fig.mkdir(exist_ok=True)
    iou = load_curves(run, "iou")
    area = load_curves(run, "pos_area")
    label_rows = read_csv(run / "label_metrics.csv") if (run / "label_metrics.csv").exists() else []
    trace = read_csv(run / "trace.csv") if (run / "trace.csv").exists() else []
    updates = sorted({int(r["epoch"]) for r in label_rows})
    plots.plot_curves(iou, fig / "degeneration_iou.png", "half-max IoU", marks=updates)
    plots.plot_curves(area, fig / "positive_area.png", "positive pixels", marks=updates)
    plots.plot_label_quality(label_rows, fig / "label_quality.png")
    per_scene = {}
    for r in trace:
        pts = per_scene.setdefault(f"scene {r['scene']}", [])
        pt = (int(r["epoch"]), float(r["loss_d"]))
        if not pts or pts[-1][0] != pt[0]:
            pts.append(pt)
    if per_scene:
        some = dict(list(per_scene.items())[:5])
        plots.plot_loss_d(some, fig / "loss_d.png")
    final_label = {}
    if updates:
        last = updates[-1]
        final_label = {int(r["scene"]): float(r["iou"]) for r in label_rows if int(r["epoch"]) == last}
    rows = []
    for s in range(iou.shape[1]):
        pe = int(iou[:, s].argmax())
        rows.append({"scene": s, "peak_iou": iou[pe, s], "peak_epoch": pe + 1,
                     "final_iou": iou[-1, s], "area_at_peak": int(area[pe, s]),
                     "final_label_iou": final_label.get(s, "")})
    write_csv(run / "scenes.csv", SCENE_FIELDS, rows)
    return rows
