"""SLIC superpixels, color-space region clustering, and target-region masks.

The SLIC here follows the classic recipe: cluster centers seeded on a regular
grid at spacing s = sqrt(H*W / S_target), perturbed to the lowest-gradient
pixel in a 3x3 neighborhood, then iterated with localized assignment inside
2s x 2s windows under the distance

    D = sqrt(d_lab^2 + (d_xy / s)^2 * m^2)

followed by center updates and a connectivity pass that absorbs fragments
smaller than (H*W/S)/4 into their largest adjacent superpixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .clustering import kmeans_assign, kmeans_fit

_XYZ_FROM_LINEAR_RGB = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def rgb_to_lab(image):
    """8-bit sRGB -> CIELAB under the D65 white point (L in [0, 100])."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected u8 image [H, W, 3], got {image.dtype} {image.shape}")
    srgb = image.astype(np.float64) / 255.0
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _XYZ_FROM_LINEAR_RGB.T
    t = xyz / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray        # [H, W] int32, values in [0, num_superpixels)
    num_superpixels: int
    mean_lab: np.ndarray      # [S, 3]
    mean_xy: np.ndarray       # [S, 2] as (x, y) pixel coordinates
    pixel_counts: np.ndarray  # [S]
    lab_image: np.ndarray     # [H, W, 3]; kept so stats can be recomputed after merges


@dataclass(frozen=True)
class RegionClustering:
    region_of_superpixel: np.ndarray  # [S] int, values in [0, num_regions)
    num_regions: int


@dataclass(frozen=True)
class TargetRegionSet:
    is_target: np.ndarray  # bool [R]
    ratio: np.ndarray      # float [R] in [0, 1]
    threshold: float


def map_from_labels(labels, lab):
    s = int(labels.max()) + 1
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=s)
    assert (counts > 0).all(), "superpixel labels must be gap-free"
    mean_lab = np.empty((s, 3))
    for c in range(3):
        mean_lab[:, c] = np.bincount(flat, weights=lab[..., c].ravel(), minlength=s) / counts
    ys, xs = np.indices(labels.shape)
    mean_xy = np.stack(
        [
            np.bincount(flat, weights=xs.ravel(), minlength=s) / counts,
            np.bincount(flat, weights=ys.ravel(), minlength=s) / counts,
        ],
        axis=1,
    )
    return SuperpixelMap(
        labels=labels.astype(np.int32),
        num_superpixels=s,
        mean_lab=mean_lab,
        mean_xy=mean_xy,
        pixel_counts=counts,
        lab_image=lab,
    )


def _seed_centers(lab, s_target):
    """Grid seeds at spacing ~s, shifted to the lowest-gradient 3x3 pixel."""
    h, w = lab.shape[:2]
    s = math.sqrt(h * w / s_target)
    n_x = max(1, round(w / s))
    n_y = max(1, round(s_target / n_x))
    # block centers in pixel-center coordinates, so ties split blocks evenly
    ys = (np.arange(n_y) + 0.5) * h / n_y - 0.5
    xs = (np.arange(n_x) + 0.5) * w / n_x - 0.5

    # squared gradient magnitude, edge pixels clamped
    up = np.roll(lab, 1, axis=0)
    down = np.roll(lab, -1, axis=0)
    left = np.roll(lab, 1, axis=1)
    right = np.roll(lab, -1, axis=1)
    grad = ((down - up) ** 2).sum(axis=2) + ((right - left) ** 2).sum(axis=2)
    grad[0, :] = grad[-1, :] = np.inf
    grad[:, 0] = grad[:, -1] = np.inf
    if h <= 2 or w <= 2:
        grad[:] = 0.0

    centers = []
    for cy in ys:
        for cx in xs:
            py, px = min(int(cy), h - 1), min(int(cx), w - 1)
            y0, y1 = max(0, py - 1), min(h, py + 2)
            x0, x1 = max(0, px - 1), min(w, px + 2)
            window = grad[y0:y1, x0:x1]
            best = window.min()
            if grad[py, px] > best:
                dy, dx = np.unravel_index(int(np.argmin(window)), window.shape)
                py, px = y0 + dy, x0 + dx
            centers.append((float(py), float(px)))
    pos = np.array(centers)  # [K, 2] as (y, x)
    color = lab[pos[:, 0].astype(int), pos[:, 1].astype(int)]
    return pos, color, s


def _spatial_voronoi(shape, pos):
    h, w = shape
    ys, xs = np.indices((h, w))
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    for k in range(pos.shape[0]):
        d2 = (ys - pos[k, 0]) ** 2 + (xs - pos[k, 1]) ** 2
        closer = d2 < best
        best[closer] = d2[closer]
        labels[closer] = k
    return labels


def slic_segment(lab, s_target, compactness=10.0, iters=10):
    """Segment a CIELAB image into ~s_target superpixels.

    iters=0 returns the pure grid partition (spatial Voronoi of the seeds).
    Connectivity is enforced before returning, so every final label is one
    4-connected component.
    """
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError(f"expected lab image [H, W, 3], got shape {lab.shape}")
    h, w = lab.shape[:2]
    if not 1 <= s_target <= h * w:
        raise ValueError(f"s_target must be in [1, {h * w}], got {s_target}")
    if iters < 0:
        raise ValueError("iters must be >= 0")

    pos, color, s = _seed_centers(lab, s_target)
    k = pos.shape[0]
    labels = _spatial_voronoi((h, w), pos)

    ys, xs = np.indices((h, w))
    win = int(math.ceil(s))
    m2_over_s2 = (compactness / s) ** 2
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        new_labels = np.full((h, w), -1, dtype=np.int64)
        for j in range(k):
            cy, cx = pos[j]
            y0, y1 = max(0, int(cy) - win), min(h, int(cy) + win + 1)
            x0, x1 = max(0, int(cx) - win), min(w, int(cx) + win + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            patch = lab[y0:y1, x0:x1]
            d_lab2 = ((patch - color[j]) ** 2).sum(axis=2)
            d_xy2 = (ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2
            d2 = d_lab2 + d_xy2 * m2_over_s2
            closer = d2 < best[y0:y1, x0:x1]  # strict: ties keep the lower index
            best[y0:y1, x0:x1][closer] = d2[closer]
            new_labels[y0:y1, x0:x1][closer] = j
        orphan = new_labels < 0
        if orphan.any():
            new_labels[orphan] = _spatial_voronoi((h, w), pos)[orphan]
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                pos[j] = (ys[members].mean(), xs[members].mean())
                color[j] = lab[members].mean(axis=0)

    # labels may skip indices if a center lost all pixels; compact them
    labels = _compact_labels(labels)
    return enforce_connectivity(map_from_labels(labels, lab))


def _compact_labels(labels):
    used, inverse = np.unique(labels, return_inverse=True)
    # relabel in order of first appearance in raster scan
    first = {}
    flat = labels.ravel()
    for idx, v in enumerate(flat):
        if v not in first:
            first[v] = idx
            if len(first) == used.size:
                break
    rank = sorted(first, key=first.get)
    remap = {v: i for i, v in enumerate(rank)}
    lut = np.array([remap[v] for v in used])
    return lut[inverse].reshape(labels.shape).astype(np.int64)


def enforce_connectivity(spx):
    """Merge components smaller than (H*W/S)/4 into their largest neighbor.

    Every connected component of every label is considered; small ones are
    absorbed (union-find, largest adjacent first, deterministic tie-breaks)
    and the survivors are relabeled compactly in raster order of first pixel.
    """
    labels = np.asarray(spx.labels)
    h, w = labels.shape
    min_size = (h * w / spx.num_superpixels) / 4.0

    comp = np.full((h, w), -1, dtype=np.int64)
    ncomp = 0
    for value in range(int(labels.max()) + 1):
        mask = labels == value
        if not mask.any():
            continue
        cc, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
        comp[mask] = cc[mask] - 1 + ncomp
        ncomp += n

    flat = comp.ravel()
    sizes = np.bincount(flat, minlength=ncomp).astype(np.int64)
    first_px = np.full(ncomp, -1, dtype=np.int64)
    seen = np.zeros(ncomp, dtype=bool)
    for idx, c in enumerate(flat):
        if not seen[c]:
            seen[c] = True
            first_px[c] = idx

    # component adjacency from 4-neighbor pixel pairs
    adj = [set() for _ in range(ncomp)]
    horiz = comp[:, :-1] != comp[:, 1:]
    for a, b in zip(comp[:, :-1][horiz], comp[:, 1:][horiz]):
        adj[a].add(int(b))
        adj[b].add(int(a))
    vert = comp[:-1, :] != comp[1:, :]
    for a, b in zip(comp[:-1, :][vert], comp[1:, :][vert]):
        adj[a].add(int(b))
        adj[b].add(int(a))

    parent = list(range(ncomp))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    root_adj = {i: set(adj[i]) for i in range(ncomp)}
    root_size = sizes.copy()

    def union(small, big):
        parent[small] = big
        root_size[big] += root_size[small]
        merged = (root_adj.pop(small) | root_adj[big]) - {small, big}
        root_adj[big] = merged
        for n in merged:
            nset = root_adj.get(n)
            if nset is not None:
                nset.discard(small)
                nset.add(big)

    order = sorted(range(ncomp), key=lambda c: (sizes[c], first_px[c]))
    changed = True
    while changed:
        changed = False
        for c in order:
            r = find(c)
            if r != c or root_size[r] >= min_size or not root_adj[r]:
                continue
            # deterministic target: largest neighbor, then earliest raster pixel
            target = min(
                (find(n) for n in root_adj[r]),
                key=lambda t: (-root_size[t], first_px[t]),
            )
            if target == r:
                continue
            union(r, target)
            changed = True

    roots = np.array([find(c) for c in range(ncomp)], dtype=np.int64)
    root_first = np.full(ncomp, np.iinfo(np.int64).max, dtype=np.int64)
    for c in range(ncomp):
        r = roots[c]
        root_first[r] = min(root_first[r], first_px[c])
    final_roots = np.unique(roots)
    rank = final_roots[np.argsort(root_first[final_roots], kind="stable")]
    new_id = np.empty(ncomp, dtype=np.int64)
    for i, r in enumerate(rank):
        new_id[r] = i
    new_labels = new_id[roots[flat]].reshape(h, w)
    return map_from_labels(new_labels, spx.lab_image)


def cluster_superpixels(spx, r, seed=0):
    """Group superpixels into <= r regions by k-means on their mean Lab color.

    Region ids are compacted to the non-empty clusters (first-occurrence
    order) so every region is guaranteed non-empty even when mean colors
    are heavily duplicated.
    """
    if r > spx.num_superpixels:
        raise ValueError(f"r={r} exceeds superpixel count {spx.num_superpixels}")
    model = kmeans_fit(spx.mean_lab, r, seed=seed)
    raw = kmeans_assign(model, spx.mean_lab)
    remap = {}
    region = np.empty_like(raw)
    for i, v in enumerate(raw):
        if v not in remap:
            remap[v] = len(remap)
        region[i] = remap[v]
    return RegionClustering(region_of_superpixel=region, num_regions=len(remap))


def upsample_nearest(cam, shape):
    """Nearest-neighbor resize of a [h, w] map to [H, W] (threshold-exact)."""
    h, w = cam.shape
    hh, ww = shape
    iy = (np.arange(hh) * h) // hh
    ix = (np.arange(ww) * w) // ww
    return cam[iy[:, None], ix[None, :]]


def select_target_regions(clustering, spx, cam, high_conf_thresh=0.5, ratio_thresh=0.6, mode="mass"):
    """Score each region by its share of high-confidence activation.

    ratio[r] = sum of cam over the region's pixels with cam >= high_conf_thresh
               / max(total cam over the region, 1e-8)
    With mode="count" the ratio uses pixel counts instead of activation mass.
    A region is a target iff its ratio strictly exceeds ratio_thresh.
    """
    if mode not in ("mass", "count"):
        raise ValueError(f"unknown ratio mode {mode!r}")
    cam = np.asarray(cam, dtype=np.float64)
    cam_up = upsample_nearest(cam, spx.labels.shape)
    region_px = clustering.region_of_superpixel[spx.labels]
    nreg = clustering.num_regions
    high = cam_up >= high_conf_thresh
    if mode == "mass":
        num = np.bincount(region_px.ravel(), weights=(cam_up * high).ravel(), minlength=nreg)
        den = np.bincount(region_px.ravel(), weights=cam_up.ravel(), minlength=nreg)
    else:
        num = np.bincount(region_px.ravel(), weights=high.ravel().astype(np.float64), minlength=nreg)
        den = np.bincount(region_px.ravel(), minlength=nreg).astype(np.float64)
    ratio = num / np.maximum(den, 1e-8)
    return TargetRegionSet(is_target=ratio > ratio_thresh, ratio=ratio, threshold=ratio_thresh)


def regions_to_patch_mask(clustering, target_set, spx, patch_grid):
    """Project target regions onto the patch grid: a patch is a target iff
    more than half of its pixels fall in some target region."""
    h, w = patch_grid
    hh, ww = spx.labels.shape
    target_px = target_set.is_target[clustering.region_of_superpixel[spx.labels]]
    py = (np.arange(hh) * h) // hh
    px = (np.arange(ww) * w) // ww
    pid = (py[:, None] * w + px[None, :]).ravel()
    total = np.bincount(pid, minlength=h * w)
    hit = np.bincount(pid, weights=target_px.ravel().astype(np.float64), minlength=h * w)
    return hit > 0.5 * total
