"""Synthetic infrared-like scenes with extended small targets and point labels.

Intensities are specified on a raw 0-1024 scale and divided by ``FULL_SCALE``
when a scene is composed, so an image always lies in [0, 1].
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .regions import centroid

FULL_SCALE = 1024.0

SHAPES = ("gaussian", "disk", "ellipse", "cross", "user_mask")
BACKGROUNDS = ("flat", "gaussian_noise", "clutter", "user_image")
POINT_MODES = ("centroid", "coarse", "offset", "k_points")


@dataclass
class TargetStamp:
    values: np.ndarray  # raw-scale intensities, odd square grid
    mask: np.ndarray
    radius: float
    peak: float
    kind: str

    @property
    def half(self):
        return self.values.shape[0] // 2


@dataclass
class TargetRecord:
    id: int
    pixels: np.ndarray
    area: int
    centroid: tuple


def _grid(half):
    r = np.arange(-half, half + 1)
    return np.meshgrid(r, r, indexing="ij")


def gaussian_target(radius, peak):
    """peak * exp(-d^2 / (2 sigma^2)) with sigma = radius / 2, cut at d > radius."""
    if radius < 1 or peak <= 0:
        raise ValueError("gaussian_target needs radius >= 1 and peak > 0")
    half = int(np.ceil(radius))
    yy, xx = _grid(half)
    d2 = yy ** 2 + xx ** 2
    sigma = radius / 2.0
    mask = d2 <= radius ** 2
    values = np.where(mask, peak * np.exp(-d2 / (2 * sigma ** 2)), 0.0)
    return TargetStamp(values, mask, float(radius), float(peak), "gaussian")


def shape_target(kind, peak, radius=3, axes=None, angle=0.0, arm=0, width=1, mask=None):
    """Flat-intensity target whose support is the requested shape."""
    if kind == "gaussian":
        return gaussian_target(radius, peak)
    if kind == "disk":
        half = int(np.ceil(radius))
        yy, xx = _grid(half)
        support = yy ** 2 + xx ** 2 <= radius ** 2
        extent = radius
    elif kind == "ellipse":
        a, b = axes if axes is not None else (radius, radius / 2)
        half = int(np.ceil(max(a, b)))
        yy, xx = _grid(half)
        ca, sa = np.cos(angle), np.sin(angle)
        u = xx * ca + yy * sa
        v = -xx * sa + yy * ca
        support = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        extent = max(a, b)
    elif kind == "cross":
        half = int(arm)
        yy, xx = _grid(half)
        hw = (width - 1) // 2
        support = (np.abs(yy) <= hw) | (np.abs(xx) <= hw)
        extent = arm
    elif kind == "user_mask":
        support = np.asarray(mask, dtype=bool)
        if support.ndim != 2:
            raise ValueError("user mask must be 2-D")
        n = max(support.shape)
        n += 1 - n % 2
        padded = np.zeros((n, n), dtype=bool)
        padded[:support.shape[0], :support.shape[1]] = support
        support = padded
        extent = n // 2
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    if not support.any():
        raise ValueError(f"{kind} target has empty support")
    return TargetStamp(np.where(support, float(peak), 0.0), support, float(extent), float(peak), kind)


def make_stamp(desc):
    """Stamp from a plain dict, e.g. ``{"kind": "gaussian", "radius": 7, "peak": 200}``."""
    desc = dict(desc)
    kind = desc.pop("kind", "gaussian")
    peak = desc.pop("peak")
    if kind == "gaussian":
        return gaussian_target(desc.get("radius", 3), peak)
    if "mask" in desc:
        desc["mask"] = np.asarray(desc["mask"], dtype=bool)
    return shape_target(kind, peak, **desc)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    background: str = "gaussian_noise"
    background_params: dict = field(default_factory=dict)
    targets: list = field(default_factory=list)  # [{"stamp": {...}, "position": [r, c]}]
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, default=_np_default)


def _np_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def make_background(spec, rng):
    h, w = spec.height, spec.width
    p = dict(spec.background_params)
    kind = spec.background
    level = p.get("level", 100.0)
    if kind == "flat":
        return np.full((h, w), float(level))
    if kind == "gaussian_noise":
        return level + p.get("sigma", 10.0) * rng.standard_normal((h, w))
    if kind == "clutter":
        bg = np.full((h, w), float(level))
        yy, xx = np.mgrid[0:h, 0:w]
        lo, hi = p.get("blob_sigma", (2.0, 5.0))
        amp = p.get("amplitude", 100.0)
        for _ in range(int(p.get("blobs", 6))):
            r, c = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(lo, hi)
            a = amp * rng.uniform(0.3, 1.0)
            bg += a * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * s * s))
        return bg + p.get("sigma", 5.0) * rng.standard_normal((h, w))
    if kind == "user_image":
        img = np.asarray(p["image"], dtype=float)
        if img.shape != (h, w):
            raise ValueError(f"user background is {img.shape}, scene is {(h, w)}")
        return img
    raise ValueError(f"unknown background kind {kind!r}")


def compose_scene(spec):
    """Image in [0,1], union GT mask and one TargetRecord per stamp."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    raw = make_background(spec, rng).astype(float)
    gt = np.zeros((h, w), dtype=bool)
    records = []
    for tid, t in enumerate(spec.targets, start=1):
        stamp = t["stamp"] if isinstance(t["stamp"], TargetStamp) else make_stamp(t["stamp"])
        r, c = (int(v) for v in t["position"])
        k = stamp.half
        if r - k < 0 or c - k < 0 or r + k >= h or c + k >= w:
            raise ValueError(f"target {tid} at {(r, c)} with half-size {k} leaves the frame")
        sl = (slice(r - k, r + k + 1), slice(c - k, c + k + 1))
        if (gt[sl] & stamp.mask).any():
            raise ValueError(f"target {tid} overlaps an earlier target")
        raw[sl] += stamp.values
        gt[sl] |= stamp.mask
        own = np.zeros((h, w), dtype=bool)
        own[sl] = stamp.mask
        px = np.argwhere(own)
        records.append(TargetRecord(tid, px, len(px), centroid(px)))
    image = np.clip(raw / FULL_SCALE, 0.0, 1.0)
    return image, gt, records


def scr(image, record, half_width=10):
    """Local signal-to-clutter ratio; returns (value, finite_flag)."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    cr, cc = (int(round(x)) for x in record.centroid)
    rs, re = max(cr - half_width, 0), min(cr + half_width + 1, h)
    cs, ce = max(cc - half_width, 0), min(cc + half_width + 1, w)
    own = np.zeros((h, w), dtype=bool)
    own[record.pixels[:, 0], record.pixels[:, 1]] = True
    window = np.zeros((h, w), dtype=bool)
    window[rs:re, cs:ce] = True
    bg = image[window & ~own]
    mu_t = image[own].mean()
    sd = bg.std()
    # relative floor so float noise from a constant offset does not count
    if bg.size == 0 or sd <= 1e-12 * max(1.0, abs(bg.mean())):
        return float("inf"), False
    return abs(mu_t - bg.mean()) / sd, True


@dataclass
class PointLabelSpec:
    mode: str = "centroid"
    delta: float = 0.0
    k: int = 1
    seed: int = 0


def point_label(gt_mask, record, spec, rng=None):
    """Single-target point label as a float map with 1 at the labelled pixels."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    h, w = gt_mask.shape
    pixels = np.asarray(record.pixels) if record is not None else np.argwhere(gt_mask)
    if len(pixels) == 0:
        raise ValueError("point_label: empty target mask")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    cr, cc = centroid(pixels)
    label = np.zeros((h, w))
    if spec.mode == "centroid":
        label[int(np.floor(cr + 0.5)), int(np.floor(cc + 0.5))] = 1.0
    elif spec.mode == "coarse":
        r, c = pixels[rng.integers(len(pixels))]
        label[r, c] = 1.0
    elif spec.mode == "offset":
        dist = int(round(spec.delta))
        theta = rng.uniform(0, 2 * np.pi) if dist else 0.0
        r = int(np.floor(cr + 0.5)) + int(round(dist * np.sin(theta)))
        c = int(np.floor(cc + 0.5)) + int(round(dist * np.cos(theta)))
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"offset point {(r, c)} leaves the frame")
        label[r, c] = 1.0
    elif spec.mode == "k_points":
        if spec.k > len(pixels) or spec.k < 1:
            raise ValueError(f"k_points: K={spec.k} but target has {len(pixels)} pixels")
        sel = pixels[rng.choice(len(pixels), spec.k, replace=False)]
        label[sel[:, 0], sel[:, 1]] = 1.0
    else:
        raise ValueError(f"unknown point-label mode {spec.mode!r}")
    return label


def point_labels(gt_mask, records, spec):
    """Union of per-target point labels, one rng stream shared in target order."""
    rng = np.random.default_rng(spec.seed)
    out = np.zeros(np.shape(gt_mask))
    for rec in records:
        out = np.maximum(out, point_label(gt_mask, rec, spec, rng))
    return out


# ---------------------------------------------------------------- scene dumps

def write_pgm(path, image, maxval=65535):
    """Binary 16-bit PGM of an image in [0, 1]."""
    q = np.round(np.clip(np.asarray(image, dtype=float), 0, 1) * maxval).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dt = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return data.astype(float) / maxval


def dump_scene(stem, spec, image, gt):
    """``stem.pgm``, ``stem_gt.pgm`` and a ``stem.json`` sidecar for regeneration."""
    write_pgm(f"{stem}.pgm", image)
    write_pgm(f"{stem}_gt.pgm", gt.astype(float))
    with open(f"{stem}.json", "w") as fh:
        fh.write(spec.to_json())


def load_scene_spec(path):
    with open(path) as fh:
        return SceneSpec(**json.load(fh))
