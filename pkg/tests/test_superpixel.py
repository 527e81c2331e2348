import numpy as np
import pytest
from scipy import ndimage

from oracles import boundary_recall, brute_force_two_partition, mondrian_image, reference_srgb_to_lab
from ssr import superpixel as sp


def test_lab_white_black():
    white = sp.rgb_to_lab(np.full((1, 1, 3), 255, dtype=np.uint8))[0, 0]
    assert white[0] == pytest.approx(100.0, abs=1e-3)
    assert abs(white[1]) < 0.5 and abs(white[2]) < 0.5
    black = sp.rgb_to_lab(np.zeros((1, 1, 3), dtype=np.uint8))[0, 0]
    np.testing.assert_allclose(black, [0.0, 0.0, 0.0], atol=1e-9)


def test_lab_mid_gray_reference():
    got = sp.rgb_to_lab(np.full((1, 1, 3), 119, dtype=np.uint8))[0, 0]
    ref = reference_srgb_to_lab((119, 119, 119))
    np.testing.assert_allclose(got, ref, atol=1e-9)
    assert 40 < got[0] < 60
    assert abs(got[1]) < 0.5 and abs(got[2]) < 0.5


def test_lab_matches_skimage():
    from skimage import color

    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (12, 9, 3), dtype=np.uint8)
    np.testing.assert_allclose(sp.rgb_to_lab(img), color.rgb2lab(img), atol=0.05)


def test_lab_rejects_non_u8():
    with pytest.raises(ValueError):
        sp.rgb_to_lab(np.zeros((4, 4, 3), dtype=np.float32))


def test_slic_uniform_grid_partition():
    lab = sp.rgb_to_lab(np.full((64, 64, 3), 128, dtype=np.uint8))
    m = sp.slic_segment(lab, 4, compactness=10.0, iters=10)
    assert m.num_superpixels == 4
    assert all(abs(c - 1024) <= 64 for c in m.pixel_counts)


def test_slic_zero_iters_is_grid_voronoi():
    lab = sp.rgb_to_lab(np.full((64, 64, 3), 128, dtype=np.uint8))
    m = sp.slic_segment(lab, 4, compactness=10.0, iters=0)
    expected = (np.arange(64)[:, None] // 32) * 2 + (np.arange(64)[None, :] // 32)
    assert np.array_equal(m.labels, expected)


def test_slic_two_color_boundary_recall():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    img[:, 32:] = 255
    m = sp.slic_segment(sp.rgb_to_lab(img), 4, compactness=1.0, iters=10)
    gt = (np.arange(64)[None, :] >= 32).astype(np.int64) * np.ones((64, 1), dtype=np.int64)
    assert boundary_recall(gt, m.labels, tol=1) == 1.0


def test_slic_partition_and_locality():
    img = mondrian_image(seed=5)
    m = sp.slic_segment(sp.rgb_to_lab(img), 32, compactness=10.0, iters=10)
    # partition: gap-free labels, counts sum to H*W
    assert m.labels.min() == 0
    assert m.labels.max() == m.num_superpixels - 1
    assert m.pixel_counts.sum() == 64 * 64
    assert (np.bincount(m.labels.ravel(), minlength=m.num_superpixels) == m.pixel_counts).all()
    # 2s Chebyshev locality w.r.t. each superpixel's centroid
    s = np.sqrt(64 * 64 / 32)
    ys, xs = np.indices(m.labels.shape)
    for k in range(m.num_superpixels):
        members = m.labels == k
        cx, cy = m.mean_xy[k]
        cheb = np.maximum(np.abs(ys[members] - cy), np.abs(xs[members] - cx)).max()
        assert cheb <= 2 * s


def test_slic_invalid_arguments():
    lab = sp.rgb_to_lab(np.zeros((8, 8, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        sp.slic_segment(lab, 0)
    with pytest.raises(ValueError):
        sp.slic_segment(lab, 65)


def _map_from(labels, shade=None):
    h, w = labels.shape
    lab = np.zeros((h, w, 3))
    lab[..., 0] = 50.0 if shade is None else shade[labels]
    return sp.map_from_labels(labels.astype(np.int64), lab)


def test_enforce_connectivity_idempotent():
    labels = (np.arange(16)[:, None] // 8) * np.ones((1, 16), dtype=np.int64)
    m = _map_from(labels.astype(np.int64))
    m2 = sp.enforce_connectivity(m)
    assert np.array_equal(m2.labels, m.labels)
    m3 = sp.enforce_connectivity(m2)
    assert np.array_equal(m3.labels, m2.labels)


def test_enforce_connectivity_absorbs_orphan():
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[:, 8:] = 1
    labels[3, 3] = 1  # 1-pixel orphan of label 1 inside label 0
    m = _map_from(labels)
    fixed = sp.enforce_connectivity(m)
    assert fixed.num_superpixels == 2
    assert fixed.labels[3, 3] == fixed.labels[3, 2]
    for k in range(fixed.num_superpixels):
        _, ncomp = ndimage.label(fixed.labels == k, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        assert ncomp == 1


def test_enforce_connectivity_splits_disconnected_large_components():
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[:, 8:] = 1
    labels[:, :2] = 1  # label 1 appears in two big, disconnected stripes
    m = _map_from(labels)
    fixed = sp.enforce_connectivity(m)
    assert fixed.num_superpixels == 3
    assert fixed.pixel_counts.sum() == 16 * 16


def test_slic_output_components_connected():
    img = mondrian_image(seed=2)
    m = sp.slic_segment(sp.rgb_to_lab(img), 24, compactness=10.0, iters=10)
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for k in range(m.num_superpixels):
        _, ncomp = ndimage.label(m.labels == k, structure=cross)
        assert ncomp == 1


def test_cluster_superpixels_two_colors():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[:, 16:] = 255
    m = sp.slic_segment(sp.rgb_to_lab(img), 8, compactness=1.0, iters=10)
    clustering = sp.cluster_superpixels(m, 2, seed=0)
    # the 2-region split must equal the brute-force optimum on mean colors
    best, (side_a, _) = brute_force_two_partition(m.mean_lab)
    want = np.zeros(m.num_superpixels, dtype=np.int64)
    want[side_a] = 0
    want[[i for i in range(m.num_superpixels) if i not in side_a]] = 1
    got = clustering.region_of_superpixel
    same = (got == want).all() or (got == 1 - want).all()
    assert same
    # and it coincides with the color split
    dark = m.mean_lab[:, 0] < 50
    assert len({tuple(got[dark]), tuple(got[~dark])}) == 2


def test_cluster_superpixels_identity_and_determinism():
    img = mondrian_image(seed=1)
    m = sp.slic_segment(sp.rgb_to_lab(img), 16, compactness=10.0, iters=5)
    full = sp.cluster_superpixels(m, m.num_superpixels, seed=0)
    assert full.num_regions == m.num_superpixels or full.num_regions == len(
        np.unique(m.mean_lab.round(9), axis=0)
    )
    a = sp.cluster_superpixels(m, 4, seed=3)
    b = sp.cluster_superpixels(m, 4, seed=3)
    assert np.array_equal(a.region_of_superpixel, b.region_of_superpixel)
    with pytest.raises(ValueError):
        sp.cluster_superpixels(m, m.num_superpixels + 1, seed=0)


def test_cluster_superpixels_regions_nonempty_with_duplicates():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[:, 16:] = 255
    m = sp.slic_segment(sp.rgb_to_lab(img), 8, compactness=1.0, iters=10)
    clustering = sp.cluster_superpixels(m, min(8, m.num_superpixels), seed=0)
    counts = np.bincount(clustering.region_of_superpixel, minlength=clustering.num_regions)
    assert (counts > 0).all()


def _tiny_region_setup(cam_vals):
    """One superpixel per pixel on a 1x2 image, both in one region."""
    labels = np.array([[0, 1]], dtype=np.int64)
    m = _map_from(labels)
    clustering = sp.RegionClustering(region_of_superpixel=np.array([0, 0]), num_regions=1)
    cam = np.array([cam_vals], dtype=np.float64)
    return clustering, m, cam


def test_select_target_regions_examples():
    clustering, m, cam = _tiny_region_setup([0.9, 0.9])
    ts = sp.select_target_regions(clustering, m, cam, 0.5, 0.6)
    assert ts.ratio[0] == pytest.approx(1.0)
    assert ts.is_target[0]

    clustering, m, cam = _tiny_region_setup([0.0, 0.0])
    ts = sp.select_target_regions(clustering, m, cam, 0.5, 0.6)
    assert ts.ratio[0] == 0.0
    assert not ts.is_target[0]

    clustering, m, cam = _tiny_region_setup([0.8, 0.2])
    ts = sp.select_target_regions(clustering, m, cam, 0.5, 0.6)
    assert ts.ratio[0] == pytest.approx(0.8 / (0.8 + 0.2))


def test_select_target_regions_count_mode():
    clustering, m, cam = _tiny_region_setup([0.8, 0.2])
    ts = sp.select_target_regions(clustering, m, cam, 0.5, 0.4, mode="count")
    assert ts.ratio[0] == pytest.approx(0.5)
    assert ts.is_target[0]
    with pytest.raises(ValueError):
        sp.select_target_regions(clustering, m, cam, 0.5, 0.4, mode="bogus")


def test_select_target_regions_monotone_in_cam():
    rng = np.random.default_rng(4)
    img = mondrian_image(seed=4)
    m = sp.slic_segment(sp.rgb_to_lab(img), 16, compactness=10.0, iters=5)
    clustering = sp.cluster_superpixels(m, 4, seed=0)
    cam = rng.uniform(0, 1, (8, 8))
    low = sp.select_target_regions(clustering, m, cam, 0.5, 0.6)
    # raising every value above the confidence threshold can only increase ratios
    high = sp.select_target_regions(clustering, m, np.minimum(cam + 0.5, 1.0), 0.5, 0.6)
    assert (high.ratio >= low.ratio - 1e-12).all()


def test_regions_to_patch_mask_degenerate():
    img = mondrian_image(seed=6)
    m = sp.slic_segment(sp.rgb_to_lab(img), 16, compactness=10.0, iters=5)
    clustering = sp.cluster_superpixels(m, 4, seed=0)
    all_on = sp.TargetRegionSet(np.ones(4, dtype=bool), np.ones(4), 0.6)
    all_off = sp.TargetRegionSet(np.zeros(4, dtype=bool), np.zeros(4), 0.6)
    assert sp.regions_to_patch_mask(clustering, all_on, m, (8, 8)).all()
    assert not sp.regions_to_patch_mask(clustering, all_off, m, (8, 8)).any()


def test_regions_to_patch_mask_majority():
    # 16x16 image, one patch (16x16): 60% of pixels in target region 0
    labels = np.zeros((16, 16), dtype=np.int64)
    labels[:, 10:] = 1  # 96 pixels of 256 in superpixel 1
    m = _map_from(labels)
    clustering = sp.RegionClustering(region_of_superpixel=np.array([0, 1]), num_regions=2)
    targets = sp.TargetRegionSet(np.array([True, False]), np.array([1.0, 0.0]), 0.6)
    assert sp.regions_to_patch_mask(clustering, targets, m, (1, 1))[0]
    flipped = sp.TargetRegionSet(np.array([False, True]), np.array([0.0, 1.0]), 0.6)
    assert not sp.regions_to_patch_mask(clustering, flipped, m, (1, 1))[0]


def test_upsample_nearest_preserves_thresholded_sets():
    rng = np.random.default_rng(0)
    cam = rng.uniform(0, 1, (8, 8))
    up = sp.upsample_nearest(cam, (64, 64))
    assert set(np.unique(up)) <= set(np.unique(cam))
    assert (up >= 0.5).sum() == (cam >= 0.5).sum() * 64
