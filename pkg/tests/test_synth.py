import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labelevo import synth as S


def scene(targets, background="flat", params=None, h=32, w=32, seed=0):
    return S.SceneSpec(h, w, background, params if params is not None else {"level": 0.0},
                       targets, seed)


def test_gaussian_center_and_edge():
    st_ = S.gaussian_target(7, 200.0)
    k = st_.half
    assert st_.values[k, k] == 200.0
    assert st_.values[k, k + 7] == pytest.approx(200.0 * np.exp(-2), rel=1e-12)
    assert st_.values[k, k + 7] / 200.0 == pytest.approx(0.1353, abs=1e-4)
    assert st_.mask.sum() == st_.values.astype(bool).sum()


def test_gaussian_radius13_peak500_mask():
    st_ = S.gaussian_target(13, 500.0)
    yy, xx = np.mgrid[-13:14, -13:14]
    assert np.array_equal(st_.mask, yy ** 2 + xx ** 2 <= 169)
    assert st_.values.max() == 500.0


def test_gaussian_rejects_bad_args():
    with pytest.raises(ValueError):
        S.gaussian_target(0.5, 1.0)
    with pytest.raises(ValueError):
        S.gaussian_target(3, 0.0)


def test_disk_radius3_has_29_pixels():
    brute = sum(1 for r in range(-3, 4) for c in range(-3, 4) if r * r + c * c <= 9)
    assert S.shape_target("disk", 1.0, radius=3).mask.sum() == brute == 29


def test_cross_arm0_is_single_pixel():
    st_ = S.shape_target("cross", 1.0, arm=0)
    assert st_.mask.shape == (1, 1) and st_.mask.sum() == 1


def test_user_mask_passthrough():
    m = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]], bool)
    assert np.array_equal(S.shape_target("user_mask", 5.0, mask=m).mask, m)
    with pytest.raises(ValueError):
        S.shape_target("user_mask", 5.0, mask=np.zeros((3, 3)))


def test_ellipse_support():
    st_ = S.shape_target("ellipse", 1.0, axes=(4, 2))
    assert st_.mask[st_.half, :].sum() == 9
    assert st_.mask[:, st_.half].sum() == 5


def test_flat_zero_background_reproduces_stamp():
    stamp = {"kind": "gaussian", "radius": 3, "peak": 512.0}
    img, gt, recs = S.compose_scene(scene([{"stamp": stamp, "position": [10, 12]}]))
    ref = S.make_stamp(stamp)
    assert np.array_equal(img[7:14, 9:16], ref.values / S.FULL_SCALE)
    assert img.sum() == pytest.approx(ref.values.sum() / S.FULL_SCALE)
    assert recs[0].centroid == (10.0, 12.0)


def test_two_targets_areas_add():
    t = {"kind": "disk", "radius": 2, "peak": 100.0}
    img, gt, recs = S.compose_scene(scene([{"stamp": t, "position": [5, 5]},
                                           {"stamp": t, "position": [20, 20]}]))
    assert len(recs) == 2
    assert gt.sum() == recs[0].area + recs[1].area


def test_overlap_and_out_of_frame_rejected():
    t = {"kind": "disk", "radius": 3, "peak": 100.0}
    with pytest.raises(ValueError, match="overlap"):
        S.compose_scene(scene([{"stamp": t, "position": [10, 10]},
                               {"stamp": t, "position": [12, 12]}]))
    with pytest.raises(ValueError, match="frame"):
        S.compose_scene(scene([{"stamp": t, "position": [1, 10]}]))


def test_clutter_brighter_than_target_gives_low_scr():
    t = {"kind": "gaussian", "radius": 3, "peak": 20.0}
    spec = scene([{"stamp": t, "position": [32, 32]}], "clutter",
                 {"level": 100.0, "amplitude": 400.0, "blobs": 12, "sigma": 5.0}, 64, 64, seed=3)
    img, _, recs = S.compose_scene(spec)
    value, finite = S.scr(img, recs[0])
    assert finite and value < 1


def test_scr_examples():
    t = {"kind": "disk", "radius": 2, "peak": 100.0}
    img, _, recs = S.compose_scene(scene([{"stamp": t, "position": [16, 16]}]))
    assert S.scr(img, recs[0]) == (float("inf"), False)
    rec = recs[0]
    # hand-built frame: target mean 0.5, background mean 0.1 with std 0.2
    own = np.zeros((32, 32), bool)
    own[rec.pixels[:, 0], rec.pixels[:, 1]] = True
    frame = np.zeros((32, 32))
    frame[own] = 0.5
    window = np.zeros_like(own)
    window[6:27, 6:27] = True
    bg = np.argwhere(window & ~own)
    frame[tuple(bg.T)] = np.where(np.arange(len(bg)) % 2 == 0, -0.1, 0.3)
    if len(bg) % 2:
        frame[tuple(bg[-1])] = 0.1
    v, ok = S.scr(frame, rec)
    sd = frame[window & ~own].std()
    assert ok and v == pytest.approx(abs(0.5 - frame[window & ~own].mean()) / sd, rel=1e-12)
    assert v == pytest.approx(2.0, rel=1e-2)
    assert S.scr(frame + 0.25, rec)[0] == pytest.approx(v, rel=1e-9)


def disk_scene():
    t = {"kind": "disk", "radius": 4, "peak": 100.0}
    return S.compose_scene(scene([{"stamp": t, "position": [15, 15]}]))


def test_centroid_point_label_on_disk():
    _, gt, recs = disk_scene()
    lab = S.point_label(gt, recs[0], S.PointLabelSpec("centroid"))
    assert lab[15, 15] == 1.0 and lab.sum() == 1.0


def test_offset_zero_equals_centroid():
    _, gt, recs = disk_scene()
    a = S.point_label(gt, recs[0], S.PointLabelSpec("centroid"))
    b = S.point_label(gt, recs[0], S.PointLabelSpec("offset", delta=0))
    assert np.array_equal(a, b)


def test_offset_distance_and_frame_check():
    _, gt, recs = disk_scene()
    lab = S.point_label(gt, recs[0], S.PointLabelSpec("offset", delta=3, seed=4))
    r, c = np.argwhere(lab > 0)[0]
    assert round(np.hypot(r - 15, c - 15)) in (2, 3, 4)
    with pytest.raises(ValueError):
        S.point_label(gt, recs[0], S.PointLabelSpec("offset", delta=40))


def test_k_points_exhaustion_and_limit():
    _, gt, recs = disk_scene()
    area = recs[0].area
    lab = S.point_label(gt, recs[0], S.PointLabelSpec("k_points", k=area))
    assert np.array_equal(lab > 0, gt)
    with pytest.raises(ValueError):
        S.point_label(gt, recs[0], S.PointLabelSpec("k_points", k=area + 1))


def test_pgm_round_trip_and_sidecar(tmp_path):
    t = {"kind": "gaussian", "radius": 3, "peak": 300.0}
    spec = scene([{"stamp": t, "position": [10, 10]}], "gaussian_noise", {"level": 100.0, "sigma": 10.0})
    img, gt, _ = S.compose_scene(spec)
    stem = str(tmp_path / "s")
    S.dump_scene(stem, spec, img, gt)
    assert np.abs(S.read_pgm(stem + ".pgm") - img).max() <= 0.5 / 65535 + 1e-12
    assert np.array_equal(S.read_pgm(stem + "_gt.pgm") > 0.5, gt)
    again = S.compose_scene(S.load_scene_spec(stem + ".json"))[0]
    assert np.array_equal(again, img)


# ---------------------------------------------------------------- properties

@given(st.floats(1, 15), st.floats(1, 1000))
@settings(max_examples=100, deadline=None)
def test_gaussian_radially_non_increasing(radius, peak):
    s = S.gaussian_target(radius, peak)
    k = s.half
    yy, xx = np.mgrid[-k:k + 1, -k:k + 1]
    d = np.hypot(yy, xx)
    order = np.argsort(d, axis=None, kind="stable")
    vals, dist = s.values.reshape(-1)[order], d.reshape(-1)[order]
    for i in range(1, len(vals)):
        if dist[i] > dist[i - 1]:
            assert vals[i] <= vals[i - 1] + 1e-12 or vals[i - 1] == 0
    assert (s.values >= 0).all()


@st.composite
def scene_specs(draw):
    h = draw(st.integers(24, 48))
    w = draw(st.integers(24, 48))
    kind = draw(st.sampled_from(["gaussian", "disk", "cross"]))
    stamp = {"kind": kind, "peak": draw(st.floats(1, 1024))}
    if kind == "cross":
        stamp.update(arm=draw(st.integers(0, 4)), width=1)
    else:
        stamp["radius"] = draw(st.integers(1, 5))
    half = S.make_stamp(stamp).half
    r = draw(st.integers(half, h - half - 1))
    c = draw(st.integers(half, w - half - 1))
    bg = draw(st.sampled_from(["flat", "gaussian_noise", "clutter"]))
    params = {"level": draw(st.floats(0, 1024)), "sigma": draw(st.floats(0, 200)),
              "amplitude": draw(st.floats(0, 800))}
    return S.SceneSpec(h, w, bg, params, [{"stamp": stamp, "position": [r, c]}],
                       draw(st.integers(0, 2 ** 32 - 1)))


@given(scene_specs())
@settings(max_examples=80, deadline=None)
def test_scene_in_unit_range_and_reproducible(spec):
    a, gt, recs = S.compose_scene(spec)
    b, _, _ = S.compose_scene(spec)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


@given(scene_specs(), st.sampled_from(["centroid", "coarse", "k_points"]),
       st.integers(1, 4), st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_point_labels_inside_mask(spec, mode, k, seed):
    _, gt, recs = S.compose_scene(spec)
    k = min(k, recs[0].area)
    lab = S.point_label(gt, recs[0], S.PointLabelSpec(mode, k=k, seed=seed))
    pos = lab > 0.5
    assert pos.sum() == (k if mode == "k_points" else 1)
    if mode != "centroid" or spec.targets[0]["stamp"]["kind"] != "cross":
        assert (pos <= gt).all()
