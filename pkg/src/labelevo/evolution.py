"""Point-to-mask label evolution driven by intermediate network predictions."""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import regions
from .tensor import focal_loss, Tensor

log = logging.getLogger(__name__)


@dataclass
class EvolutionConfig:
    t_loss: float = 10.0
    t_b: float = 0.5
    k: float = 0.5
    f: int = 5
    d: int = 33
    r: float = 0.0015
    connectivity: int = 8
    loss_scale: float = 1.0  # epoch loss is multiplied by this before comparing to t_loss

    def __post_init__(self):
        if not 0 <= self.t_b < 1:
            raise ValueError("t_b must lie in [0, 1)")
        if self.k < 0 or self.f < 1 or self.r <= 0:
            raise ValueError("need k >= 0, f >= 1 and r > 0")
        if self.d < 3 or self.d % 2 == 0:
            raise ValueError("crop size d must be odd and >= 3")


def adaptive_threshold(pred_patch, positive_count, cfg, h, w):
    pred_patch = np.asarray(pred_patch)
    if pred_patch.size == 0:
        raise ValueError("adaptive_threshold: empty patch")
    if positive_count < 0:
        raise ValueError("adaptive_threshold: negative positive count")
    growth = cfg.k * (1.0 - cfg.t_b) * positive_count / (h * w * cfg.r)
    return float(pred_patch.max()) * (cfg.t_b + growth)


def extract_candidates(pred_patch, threshold):
    if not math.isfinite(threshold):
        raise ValueError("extract_candidates: threshold must be finite")
    pred_patch = np.asarray(pred_patch, dtype=float)
    return pred_patch * (pred_patch > threshold)


def eliminate_false_alarms(candidates, label_positive, connectivity=8):
    """Keep only candidate regions touching a positive label pixel.

    Returns the filtered candidates and the keep mask.
    """
    candidates = np.asarray(candidates, dtype=float)
    label_positive = np.asarray(label_positive, dtype=bool)
    if candidates.shape != label_positive.shape:
        raise ValueError("eliminate_false_alarms: shape mismatch")
    cmap = regions.connected_components(candidates > 0, connectivity)
    hit = np.unique(cmap.labels[label_positive & (cmap.labels > 0)])
    keep = np.isin(cmap.labels, hit) & (cmap.labels > 0)
    return candidates * keep, keep


def blend_update(label_patch, filtered, update_mask):
    label_patch = np.asarray(label_patch, dtype=float)
    n = np.asarray(update_mask, dtype=bool)
    out = np.where(n, (label_patch + filtered) / 2.0, label_patch)
    assert np.all((out >= 0) & (out <= 1)) or not np.all((label_patch >= 0) & (label_patch <= 1)), \
        "blend_update left [0, 1]"
    return out


@dataclass
class TargetUpdate:
    target: int
    t_adapt: float
    pos_before: int
    pos_after: int
    skipped: bool = False


def evolve_labels(label, pred, cfg):
    """One round of label evolution over every positive region of ``label``.

    Regions are processed in ascending component id; each sees the label as
    left by the regions before it.
    """
    label = np.asarray(label, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if label.shape != pred.shape:
        raise ValueError("evolve_labels: label and prediction shapes differ")
    h, w = label.shape
    cmap = regions.connected_components(regions.positive_pixels(label), cfg.connectivity)
    if not len(cmap):
        raise ValueError("evolve_labels: label has no positive pixels")
    out = label.copy()
    trace = []
    for comp in cmap.components:
        own = np.zeros((h, w), dtype=bool)
        own[comp.pixels[:, 0], comp.pixels[:, 1]] = True
        own &= out > 0.5
        count = int(own.sum())
        if count == 0:
            log.warning("target %d lost its positive pixels; skipped", comp.id)
            trace.append(TargetUpdate(comp.id, float("nan"), 0, 0, skipped=True))
            continue
        center = regions.centroid(np.argwhere(own))
        l_patch, origin = regions.crop_neighborhood(out, center, cfg.d)
        p_patch, _ = regions.crop_neighborhood(pred, center, cfg.d)
        own_patch, _ = regions.crop_neighborhood(own, center, cfg.d)
        t_adapt = adaptive_threshold(p_patch, count, cfg, h, w)
        cand = extract_candidates(p_patch, t_adapt)
        filtered, keep = eliminate_false_alarms(cand, own_patch, cfg.connectivity)
        n_mask = (p_patch > t_adapt) & keep
        new_patch = blend_update(l_patch, filtered, n_mask)
        out = regions.paste_neighborhood(out, new_patch, origin)
        after = int(((out > 0.5) & _window(h, w, origin, cfg.d)).sum())
        before = int(((l_patch > 0.5)).sum())
        trace.append(TargetUpdate(comp.id, t_adapt, before, after))
    return out, trace


def _window(h, w, origin, d):
    m = np.zeros((h, w), dtype=bool)
    r0, c0 = origin
    m[max(r0, 0):max(r0 + d, 0), max(c0, 0):max(c0 + d, 0)] = True
    return m


class EvolutionScheduler:
    """Arms once the last epoch loss drops below ``t_loss`` and then fires
    every ``f`` epochs, counting from the arming epoch."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.trigger_epoch = None

    def __call__(self, epoch, history):
        if not history:
            raise ValueError("scheduler needs a non-empty loss history")
        if self.trigger_epoch is None:
            if history[-1] * self.cfg.loss_scale < self.cfg.t_loss:
                self.trigger_epoch = epoch
                return True
            return False
        return (epoch - self.trigger_epoch) % self.cfg.f == 0


def loss_delta(pred, labels_before, labels_after, gamma=2.0, alpha=0.75):
    """|focal(pred, before) - focal(pred, after)| with the prediction held fixed."""
    p = Tensor(np.asarray(pred, dtype=float))
    a = focal_loss(p, labels_before, gamma=gamma, alpha=alpha).item()
    b = focal_loss(p, labels_after, gamma=gamma, alpha=alpha).item()
    return abs(a - b)


@dataclass
class EvolutionTrace:
    rows: list = field(default_factory=list)

    def add(self, epoch, scene, updates, loss_d):
        for u in updates:
            self.rows.append({"epoch": epoch, "scene": scene, "target": u.target,
                              "t_adapt": u.t_adapt, "pos_before": u.pos_before,
                              "pos_after": u.pos_after, "loss_d": loss_d})

    FIELDS = ("epoch", "scene", "target", "t_adapt", "pos_before", "pos_after", "loss_d")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=self.FIELDS, lineterminator="\r\n")
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
