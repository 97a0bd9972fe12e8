import numpy as np
import pytest

from layerseg import tensor as T
from layerseg.compositor import composite
from layerseg.scenes import (
    BackgroundSpec,
    CategorySpec,
    SceneError,
    SceneSpec,
    crop_and_resize,
    extract_hoc_patches,
    foreground_spec,
    histogram_overlap,
    hoc_spec,
    hoc_window,
    make_foreground_dataset,
    rasterize,
    sample_scene,
)


def test_single_disk_area():
    spec = SceneSpec(64, (CategorySpec("d", "disk", (12.0, 12.0)),), pose_rule="centered", center_jitter=0.0)
    s = sample_scene(spec, 0)
    assert abs(s.masks[0].sum() - np.pi * 144) / (np.pi * 144) < 0.05


def test_shapes_rasterize():
    for shape in ("disk", "square", "triangle"):
        m = rasterize(shape, 16, 16, 6, 32, 32)
        assert m[16, 16] == 1 and m[0, 0] == 0
    assert rasterize("square", 16, 16, 3, 32, 32).sum() == 49
    with pytest.raises(ValueError):
        CategorySpec("x", "hexagon")


def test_layers_recomposite_exactly():
    spec = SceneSpec(32, tuple(CategorySpec(f"c{i}", "square", (3.0, 6.0)) for i in range(4)))
    s = sample_scene(spec, 5)
    with T.precision(64):
        again = composite(s.layer_stack()).data
    np.testing.assert_array_equal(again, s.image)


def test_same_seed_bit_exact():
    spec = foreground_spec(64)
    a, b = sample_scene(spec, 42), sample_scene(spec, 42)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.masks, b.masks)


def test_disjoint_instances_visible_equals_full():
    spec = SceneSpec(64, (CategorySpec("a", "disk", (5.0, 6.0)), CategorySpec("b", "disk", (5.0, 6.0))), pose_rule="non_overlap")
    s = sample_scene(spec, 1)
    np.testing.assert_array_equal(s.visible, s.masks)


def test_overlap_lower_visible_excludes_upper():
    spec = SceneSpec(32, (CategorySpec("a", "square", (8.0, 8.0)), CategorySpec("b", "square", (8.0, 8.0))), pose_rule="centered", center_jitter=2.0)
    s = sample_scene(spec, 3)
    assert np.all(s.visible[0][s.masks[1] > 0] == 0)
    assert np.all(s.visible[0] * s.visible[1] == 0)


def test_non_overlap_impossible_fails():
    spec = SceneSpec(16, tuple(CategorySpec(f"c{i}", "disk", (6.0, 6.0)) for i in range(10)), pose_rule="non_overlap", max_tries=50)
    with pytest.raises(SceneError):
        sample_scene(spec, 0)


def test_appearance_independence():
    cats = (CategorySpec("a", "disk", (4.0, 5.0)), CategorySpec("b", "disk", (4.0, 5.0)))
    spec = SceneSpec(16, cats, BackgroundSpec(), pose_rule="free")
    rng = np.random.default_rng(0)
    # 1000 scenes leave the sample correlation with sigma ~0.032, too close to the bound;
    # 10000 scenes bring it to ~0.01 so a pass or fail reflects real dependence
    colors = np.array([[a.mean(axis=(1, 2)) for a in sample_scene(spec, rng).appearances] for _ in range(10000)])
    for c in range(3):
        assert abs(np.corrcoef(colors[:, 0, c], colors[:, 1, c])[0, 1]) < 0.05
    assert abs(np.corrcoef(colors[:, 0].mean(1), colors[:, 1].mean(1))[0, 1]) < 0.05


def test_crop_and_resize_identity_and_range():
    img = np.random.default_rng(0).uniform(size=(3, 7, 9))
    np.testing.assert_allclose(crop_and_resize(img, (0, 0, 9, 7), (7, 9)), img, atol=1e-12)
    out = crop_and_resize(img, (1, 2, 6, 7), 13)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        crop_and_resize(img, (2, 2, 2, 5), 4)
    with pytest.raises(ValueError):
        crop_and_resize(img, (0, 0, 10, 7), 4)


def test_checkerboard_upsample_bilinear():
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = crop_and_resize(board, (0, 0, 2, 2), 4)[0]
    # output centers sample the source at -0.25, 0.25, 0.75, 1.25, clamped to the border
    pos = np.clip((np.arange(4) + 0.5) / 2 - 0.5, 0, 1)
    y, x = np.meshgrid(pos, pos, indexing="ij")
    np.testing.assert_allclose(out, x * (1 - y) + y * (1 - x), atol=1e-12)


def test_hoc_patches_counts_and_flips():
    img = np.random.default_rng(0).uniform(size=(3, 80, 80))
    assert extract_hoc_patches(img, 30, "both", 5, 0).shape == (20, 3, 64, 64)
    assert extract_hoc_patches(img, 30, "h", 5, 0).shape == (10, 3, 64, 64)
    whole = extract_hoc_patches(img[:, :64, :64], 64, "none", 3, 0)
    for p in whole:
        np.testing.assert_array_equal(p, img[:, :64, :64])
    with pytest.raises(ValueError):
        extract_hoc_patches(img, 81, "none", 1, 0)


def test_hoc_window():
    assert hoc_window(22) == 33


def test_hoc_spec_background_hidden():
    s = sample_scene(hoc_spec(96, 120), 0)
    coverage = 1.0 - np.prod(1.0 - s.masks, axis=0)
    assert coverage.mean() > 0.9


def test_foreground_dataset():
    ds = make_foreground_dataset(foreground_spec(64), 20, 0, 10)
    assert ds.images.shape == (20, 3, 64, 64) and ds.masks.shape == (20, 1, 64, 64)
    assert np.all(ds.masks.reshape(20, -1).sum(axis=1) > 0)
    assert ds.backgrounds.shape == (10, 3, 64, 64)
    train, test = ds.split(15)
    assert len(train) == 15 and len(test) == 5


def test_foreground_background_textures_overlap():
    rng = np.random.default_rng(0)
    fg_pix, bg_pix = [], []
    for overlap in (True, False):
        ds = make_foreground_dataset(foreground_spec(64, overlap=overlap), 30, rng, 1)
        m = ds.masks[:, 0] > 0.5
        fg = np.stack([ds.images[:, c][m] for c in range(3)])
        bg = np.stack([ds.images[:, c][~m] for c in range(3)])
        fg_pix.append(fg)
        bg_pix.append(bg)
    with_overlap = histogram_overlap(fg_pix[0], bg_pix[0])
    without = histogram_overlap(fg_pix[1], bg_pix[1])
    assert with_overlap > 0.2
    assert with_overlap > without
