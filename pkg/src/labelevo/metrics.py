"""Pixel- and target-level scores for labels and predictions."""
from dataclasses import dataclass, field

import numpy as np

from .regions import connected_components


@dataclass
class MetricRecord:
    epoch: int
    iou: float
    pa: float
    pd: float
    fa: float
    pos_area: int
    detected: list = field(default_factory=list)


def iou(pred, gt):
    a, b = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("iou: shape mismatch")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pixel_accuracy(label, gt):
    """Fraction of GT pixels covered by the label."""
    a, b = np.asarray(label, dtype=bool), np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("pixel_accuracy: shape mismatch")
    n = np.count_nonzero(b)
    if n == 0:
        raise ValueError("pixel_accuracy: empty ground truth")
    return np.count_nonzero(a & b) / n


def _target_centroids(targets):
    out = []
    for t in targets:
        if hasattr(t, "centroid"):
            out.append(tuple(t.centroid))
        else:
            out.append(tuple(t))
    return out


def pd_fa(pred, targets, match_distance=3.0, connectivity=8, return_flags=False):
    """Target detection rate and false-alarm pixel rate.

    Predicted components are matched one-to-one to targets greedily by
    ascending centroid distance, accepting pairs within ``match_distance``.
    """
    pred = np.asarray(pred, dtype=bool)
    h, w = pred.shape
    gts = _target_centroids(targets)
    cmap = connected_components(pred, connectivity)
    pairs = []
    for ci, comp in enumerate(cmap.components):
        for ti, (tr, tc) in enumerate(gts):
            dist = np.hypot(comp.centroid[0] - tr, comp.centroid[1] - tc)
            if dist <= match_distance:
                pairs.append((dist, ci, ti))
    pairs.sort()
    used_c, used_t = set(), set()
    for _, ci, ti in pairs:
        if ci not in used_c and ti not in used_t:
            used_c.add(ci)
            used_t.add(ti)
    pd = len(used_t) / len(gts) if gts else 0.0
    false_px = sum(c.area for i, c in enumerate(cmap.components) if i not in used_c)
    fa = false_px / (h * w)
    if return_flags:
        return pd, fa, [i in used_t for i in range(len(gts))]
    return pd, fa


def half_max_mask(pred):
    pred = np.asarray(pred, dtype=float)
    peak = pred.max()
    return pred > peak / 2.0


def degeneration_iou(pred, gt, return_flag=False):
    """IoU of the pixels above half the prediction maximum against the GT mask.

    The flag is False, and the score 0, when the prediction is all zero,
    constant (it localises nothing) or the binarised set is empty.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.max() <= 0 or pred.max() == pred.min():
        return (0.0, False) if return_flag else 0.0
    mask = half_max_mask(pred)
    if not mask.any():
        return (0.0, False) if return_flag else 0.0
    v = iou(mask, gt)
    return (v, True) if return_flag else v


def threshold_sweep(pred, targets, thresholds, match_distance=3.0):
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    pred = np.asarray(pred, dtype=float)
    rows = []
    for tau in thresholds:
        pd, fa = pd_fa(pred > tau, targets, match_distance)
        rows.append((tau, pd, fa))
    return rows


def score_prediction(epoch, pred, gt, targets, match_distance=3.0):
    """MetricRecord of a probability map under half-max binarisation."""
    mask = half_max_mask(pred) if np.max(pred) > 0 else np.zeros(np.shape(pred), bool)
    pd, fa, flags = pd_fa(mask, targets, match_distance, return_flags=True)
    return MetricRecord(epoch, iou(mask, gt), pixel_accuracy(mask, gt), pd, fa,
                        int(mask.sum()), flags)
