"""Binary-image helpers: thresholding, connected components, centroids, crops."""
from dataclasses import dataclass

import numpy as np

_OFFSETS = {
    4: ((-1, 0), (0, -1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1)),
}


@dataclass
class Component:
    id: int
    pixels: np.ndarray  # (n, 2) row/col pairs in raster order
    area: int
    centroid: tuple


@dataclass
class ComponentMap:
    labels: np.ndarray
    components: list

    def __len__(self):
        return len(self.components)

    def mask(self, cid):
        return self.labels == cid


def positive_pixels(values, tau=0.5):
    """Strict ``values > tau``."""
    return np.asarray(values) > tau


def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def connected_components(binary, connectivity=8):
    """Two-pass union-find labelling; ids are 1..n in raster order of first pixel."""
    if connectivity not in _OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    prov = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    offsets = _OFFSETS[connectivity]
    rows, cols = np.nonzero(binary)
    for r, c in zip(rows.tolist(), cols.tolist()):
        linked = []
        for dr, dc in offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr and 0 <= cc < w and prov[rr, cc]:
                linked.append(prov[rr, cc])
        if not linked:
            parent.append(len(parent))
            prov[r, c] = len(parent) - 1
            continue
        root = min(_find(parent, int(x)) for x in linked)
        for x in linked:
            rx = _find(parent, int(x))
            if rx != root:
                parent[rx] = root
        prov[r, c] = root
    # relabel roots contiguously in raster order
    final = np.zeros(len(parent), dtype=np.int64)
    labels = np.zeros((h, w), dtype=np.int64)
    next_id = 1
    for r, c in zip(rows.tolist(), cols.tolist()):
        root = _find(parent, int(prov[r, c]))
        if not final[root]:
            final[root] = next_id
            next_id += 1
        labels[r, c] = final[root]
    comps = []
    if next_id > 1:
        flat = labels[rows, cols]
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, next_id + 1))
        for cid in range(1, next_id):
            sel = order[bounds[cid - 1]:bounds[cid]]
            px = np.stack([rows[sel], cols[sel]], axis=1)
            comps.append(Component(cid, px, len(sel), centroid(px)))
    return ComponentMap(labels, comps)


def centroid(pixels):
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pixels) == 0:
        raise ValueError("centroid of an empty pixel set")
    return float(pixels[:, 0].mean()), float(pixels[:, 1].mean())


def crop_neighborhood(values, center, d):
    """d x d patch centred on the rounded ``center``, zero outside the frame.

    Returns the patch and the frame coordinates of its top-left cell.
    """
    if d < 3 or d % 2 == 0:
        raise ValueError(f"crop size must be odd and >= 3, got {d}")
    values = np.asarray(values)
    h, w = values.shape
    cr, cc = (int(np.floor(x + 0.5)) for x in center)
    r0, c0 = cr - d // 2, cc - d // 2
    patch = np.zeros((d, d), dtype=values.dtype)
    rs, re = max(r0, 0), min(r0 + d, h)
    cs, ce = max(c0, 0), min(c0 + d, w)
    if rs < re and cs < ce:
        patch[rs - r0:re - r0, cs - c0:ce - c0] = values[rs:re, cs:ce]
    return patch, (r0, c0)


def paste_neighborhood(values, patch, origin):
    """Write the in-frame part of ``patch`` back into a copy of ``values``."""
    out = np.array(values, copy=True)
    h, w = out.shape
    d0, d1 = patch.shape
    r0, c0 = origin
    rs, re = max(r0, 0), min(r0 + d0, h)
    cs, ce = max(c0, 0), min(c0 + d1, w)
    if rs < re and cs < ce:
        out[rs:re, cs:ce] = patch[rs - r0:re - r0, cs - c0:ce - c0]
    return out
