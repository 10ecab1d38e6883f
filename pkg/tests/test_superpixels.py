import numpy as np
import pytest
from scipy import ndimage

from fuzzyseg.superpixels import (
    SlicConfig,
    default_k,
    load_superpixels,
    save_superpixels,
    slic,
)

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def assert_connected_partition(sp):
    for lab in range(sp.num_superpixels):
        _, n = ndimage.label(sp.labels == lab, structure=FOUR)
        assert n == 1, f"superpixel {lab} split into {n} components"


def test_constant_image_four_tiles():
    img = np.full((8, 8), 0.5)
    sp = slic(img, SlicConfig(k=4, compactness=10.0))
    assert sp.num_superpixels == 4
    assert_connected_partition(sp)
    sizes = np.bincount(sp.labels.ravel())
    assert sizes.max() <= 2 * sizes.min()


def test_k_one_single_superpixel():
    img = np.random.default_rng(0).random((6, 7))
    sp = slic(img, SlicConfig(k=1))
    assert sp.num_superpixels == 1
    assert (sp.labels == 0).all()


def test_k_exceeding_pixels_rejected():
    with pytest.raises(ValueError, match="exceeds pixel count"):
        slic(np.zeros((2, 2)), SlicConfig(k=5))


def test_two_tone_vertical_split_boundary_recall():
    img = np.zeros((12, 12))
    img[:, 6:] = 1.0
    sp = slic(img, SlicConfig(k=2, compactness=0.5))
    # boundary recall: every gt edge pixel pair (j=5, j=6) should cross a
    # superpixel boundary
    crossing = sp.labels[:, 5] != sp.labels[:, 6]
    assert crossing.mean() >= 0.9
    assert_connected_partition(sp)


def test_deterministic():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16))
    cfg = SlicConfig(k=9, compactness=5.0)
    a = slic(img, cfg)
    b = slic(img, cfg)
    assert np.array_equal(a.labels, b.labels)


def test_partition_and_connectivity_on_noisy_image():
    rng = np.random.default_rng(4)
    img = rng.random((20, 20, 3))
    sp = slic(img, SlicConfig(k=12, compactness=8.0))
    assert sp.labels.shape == (20, 20)
    assert_connected_partition(sp)


def test_follows_color_regions_low_compactness():
    img = np.zeros((16, 16))
    img[:8] = 0.9
    sp = slic(img, SlicConfig(k=4, compactness=0.2))
    # no superpixel should straddle the horizontal color edge
    top = set(np.unique(sp.labels[:8]))
    bottom = set(np.unique(sp.labels[8:]))
    assert not (top & bottom)


def test_default_k_scales_by_area():
    assert default_k(64, 64) == 200
    assert default_k(32, 32) == 50
    assert default_k(2, 2) == 1


def test_save_load_round_trip(tmp_path):
    img = np.random.default_rng(5).random((10, 10))
    sp = slic(img, SlicConfig(k=4))
    path = tmp_path / "sp.pft"
    save_superpixels(path, sp)
    back = load_superpixels(path, 10, 10)
    assert np.array_equal(back.labels, sp.labels)


def test_load_reindexes_gaps(tmp_path):
    from fuzzyseg.grids import write_pft

    labels = np.array([[0.0, 2.0], [0.0, 2.0]])
    path = tmp_path / "gap.pft"
    write_pft(path, labels)
    sp = load_superpixels(path, 2, 2)
    assert sp.labels.tolist() == [[0, 1], [0, 1]]


def test_load_rejects_dim_mismatch(tmp_path):
    from fuzzyseg.grids import write_pft

    path = tmp_path / "bad.pft"
    write_pft(path, np.zeros((2, 2)))
    with pytest.raises(ValueError, match="expected"):
        load_superpixels(path, 3, 3)


def test_load_rejects_fractional(tmp_path):
    from fuzzyseg.grids import write_pft

    path = tmp_path / "frac.pft"
    write_pft(path, np.full((2, 2), 0.5))
    with pytest.raises(ValueError, match="non-integer"):
        load_superpixels(path, 2, 2)
