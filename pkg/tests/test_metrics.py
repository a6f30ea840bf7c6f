import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from labelevo import metrics as M

masks = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda s: st.tuples(arrays(np.bool_, s), arrays(np.bool_, s)))


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[0, :3] = True
    assert M.iou(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, 3] = True
    assert M.iou(a, b) == 0.0
    x = np.zeros(8, bool)
    y = np.zeros(8, bool)
    x[[0, 1, 2, 3]] = True
    y[[2, 3, 4, 5]] = True
    assert M.iou(x, y) == pytest.approx(1 / 3, abs=1e-15)
    assert M.iou(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


def test_pixel_accuracy_examples():
    gt = np.zeros((4, 4), bool)
    gt[:2, :2] = True
    assert M.pixel_accuracy(np.ones_like(gt), gt) == 1.0
    half = np.zeros_like(gt)
    half[0, :2] = True
    assert M.pixel_accuracy(half, gt) == 0.5
    with pytest.raises(ValueError):
        M.pixel_accuracy(gt, np.zeros_like(gt))


def test_over_expanded_label_high_pa_low_iou():
    gt = np.zeros((64, 64), bool)
    gt[30:34, 30:34] = True
    label = np.zeros_like(gt)
    label[10:60, 10:60] = True
    assert M.pixel_accuracy(label, gt) > 0.9
    assert M.iou(label, gt) < 0.01


def test_pd_fa_examples():
    gt = np.zeros((256, 256), bool)
    gt[10:13, 10:13] = True
    gt[100:103, 100:103] = True
    targets = [(11.0, 11.0), (101.0, 101.0)]
    assert M.pd_fa(gt, targets) == (1.0, 0.0)
    one = gt.copy()
    one[100:103, 100:103] = False
    assert M.pd_fa(one, targets) == (0.5, 0.0)
    spur = gt.copy()
    spur[200, 200:205] = True
    pd, fa = M.pd_fa(spur, targets)
    assert pd == 1.0 and fa == 5 / 65536


def test_pd_fa_distance_limit_and_one_to_one():
    pred = np.zeros((20, 20), bool)
    pred[5, 5] = True
    assert M.pd_fa(pred, [(5.0, 9.0)])[0] == 0.0
    assert M.pd_fa(pred, [(5.0, 8.0)])[0] == 1.0
    # one component, two nearby targets: only one may match
    assert M.pd_fa(pred, [(5.0, 6.0), (6.0, 5.0)])[0] == 0.5


def test_degeneration_iou_examples():
    gt = np.zeros((8, 8), bool)
    gt[2:5, 2:5] = True
    assert M.degeneration_iou(gt.astype(float), gt) == 1.0
    soft = np.where(gt, 0.9, 0.4)
    assert M.degeneration_iou(soft, gt) == 1.0
    assert M.degeneration_iou(np.full((8, 8), 0.3), gt, return_flag=True) == (0.0, False)
    assert M.degeneration_iou(np.zeros((8, 8)), gt, return_flag=True) == (0.0, False)


def test_threshold_sweep_examples():
    rng = np.random.default_rng(0)
    pred = rng.uniform(size=(16, 16))
    rows = M.threshold_sweep(pred, [(8.0, 8.0)], [0.0, 2.0])
    assert rows[0][2] == max(r[2] for r in rows)
    assert rows[1][1:] == (0.0, 0.0)
    with pytest.raises(ValueError):
        M.threshold_sweep(pred, [(1.0, 1.0)], [0.5, 0.1])


def test_score_prediction_record():
    gt = np.zeros((8, 8), bool)
    gt[2:5, 2:5] = True
    rec = M.score_prediction(3, np.where(gt, 0.8, 0.1), gt, [(3.0, 3.0)])
    assert (rec.epoch, rec.iou, rec.pa, rec.pd, rec.fa, rec.pos_area) == (3, 1.0, 1.0, 1.0, 0.0, 9)
    assert rec.detected == [True]


# ---------------------------------------------------------------- properties

@given(masks)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(ab):
    a, b = ab
    assert M.iou(a, b) == M.iou(b, a)
    assert M.iou(a, a) == 1.0
    assert 0 <= M.iou(a, b) <= 1


@given(masks)
@settings(max_examples=200, deadline=None)
def test_pa_bounded(ab):
    a, b = ab
    if b.any():
        assert 0 <= M.pixel_accuracy(a, b) <= 1


@st.composite
def pred_and_targets(draw):
    h, w = draw(st.integers(4, 16)), draw(st.integers(4, 16))
    pred = draw(arrays(np.bool_, (h, w)))
    n = draw(st.integers(1, 5))
    targets = [(draw(st.floats(0, h - 1)), draw(st.floats(0, w - 1))) for _ in range(n)]
    return pred, targets


@given(pred_and_targets())
@settings(max_examples=200, deadline=None)
def test_pd_fa_bounds_and_matching(pt):
    pred, targets = pt
    pd, fa, flags = M.pd_fa(pred, targets, return_flags=True)
    from labelevo.regions import connected_components
    ncomp = len(connected_components(pred))
    assert 0 <= pd <= 1 and 0 <= fa <= 1
    assert sum(flags) <= min(ncomp, len(targets))


@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_degeneration_iou_scale_free(pred, s):
    gt = np.zeros((10, 10), bool)
    gt[3:6, 3:6] = True
    # a power of two keeps the scaled comparison exact
    s = 2.0 ** round(np.log2(s))
    assert M.degeneration_iou(pred, gt) == M.degeneration_iou(pred * s, gt)


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
       st.lists(st.floats(0, 1), min_size=2, max_size=8))
@settings(max_examples=100, deadline=None)
def test_sweep_positive_area_non_increasing(pred, taus):
    taus = sorted(taus)
    rows = M.threshold_sweep(pred, [(6.0, 6.0)], taus)
    assert [r[0] for r in rows] == taus
    areas = [(pred > t).sum() for t in taus]
    assert all(a >= b for a, b in zip(areas, areas[1:]))
    assert all(fa <= a / pred.size for (_, _, fa), a in zip(rows, areas))


def test_fa_can_rise_when_a_matched_blob_splits():
    # at tau=0 the whole frame is one component matched to the target; at
    # tau=0.5 only the far corner pixel survives and it is a false alarm
    pred = np.full((12, 12), 0.5)
    pred[0, 0] = 1.0
    (_, _, fa0), (_, _, fa1) = M.threshold_sweep(pred, [(6.0, 6.0)], [0.0, 0.5])
    assert fa0 == 0.0 and fa1 == 1 / 144


def test_fa_non_increasing_for_isolated_blobs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pred = np.zeros((32, 32))
        for r, c in rng.integers(2, 30, size=(4, 2)):
            pred[r - 1:r + 2, c - 1:c + 2] = np.maximum(pred[r - 1:r + 2, c - 1:c + 2],
                                                        rng.uniform(0.2, 1.0))
        rows = M.threshold_sweep(pred, [(5.0, 5.0)], np.linspace(0, 1, 11))
        fas = [r[2] for r in rows[1:]]
        assert all(a >= b for a, b in zip(fas, fas[1:]))
