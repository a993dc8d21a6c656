import itertools
import warnings

import numpy as np
import pytest

from conftest import checker_texture
from seqcloak.gamut import InkLimitGamut, LutGamut, read_lut, rgb_to_cmyk, write_lut
from seqcloak.texture_param import (InvalidInputError, LockedPalette, UvTexture, build_texture_params,
                                    extract_control_points, kmeans, kmeans_fit, load_params, lock_palette,
                                    params_from_dict, params_to_dict, save_params)


def best_partition_inertia(x, k):
    """Exhaustive minimum inertia over all labelings (tiny inputs only)."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) != k:
            continue
        s = sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in range(k))
        best = min(best, s)
    return best


def test_kmeans_corners():
    x = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    res = kmeans_fit(x, 4, seed=0)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, x))


def test_kmeans_two_groups():
    x = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]])
    c, _ = kmeans(x, 2, seed=3)
    assert sorted(c[:, 0].round(12)) == [0.05, 10.05]


def test_kmeans_n_equals_k():
    x = np.random.default_rng(0).random((5, 3))
    res = kmeans_fit(x, 5, seed=1)
    assert sorted(res.labels) == list(range(5))
    assert res.inertia == 0.0


def test_kmeans_too_few_samples():
    with pytest.raises(InvalidInputError, match="k=3"):
        kmeans(np.zeros((2, 2)), 3, seed=0)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_matches_exhaustive_on_separated_data(seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [5, 5], [0, 5]])
    x = np.vstack([c + 0.3 * rng.standard_normal((3, 2)) for c in centers])
    res = kmeans_fit(x, 3, seed=seed)
    assert res.inertia == pytest.approx(best_partition_inertia(x, 3), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_lloyd_fixed_point_and_monotone(seed):
    x = np.random.default_rng(seed).random((60, 3))
    res = kmeans_fit(x, 4, seed=seed)
    d = ((x[:, None] - res.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(res.labels, d.argmin(1))
    for c in range(4):
        np.testing.assert_allclose(res.centroids[c], x[res.labels == c].mean(0), atol=1e-12)
    assert all(b <= a + 1e-12 for a, b in zip(res.inertia_history, res.inertia_history[1:]))


def test_kmeans_deterministic():
    x = np.random.default_rng(1).random((50, 3))
    a, b = kmeans_fit(x, 3, seed=7), kmeans_fit(x, 3, seed=7)
    assert np.array_equal(a.centroids, b.centroids)


def test_ink_limit_examples():
    g = InkLimitGamut(3.0)
    np.testing.assert_array_equal(g(np.array([255.0, 255, 255])), [255, 255, 255])
    np.testing.assert_allclose(g(np.array([255.0, 0, 0])), [255, 0, 0], atol=1e-9)
    assert rgb_to_cmyk(np.array([255.0, 0, 0])).sum() == 2.0


def test_ink_limit_enforced():
    g = InkLimitGamut(1.5)
    rgb = np.random.default_rng(0).uniform(0, 255, (2000, 3))
    ink = rgb_to_cmyk(g(rgb)).sum(-1)
    assert ink.max() <= 1.5 + 1e-9


def test_lock_idempotent_and_distinct():
    raw = np.random.default_rng(2).uniform(0, 255, (6, 3))
    p1 = lock_palette(raw)
    p2 = lock_palette(p1.colors)
    assert np.abs(p1.colors - p2.colors).max() <= 1
    assert len(np.unique(p1.colors, axis=0)) == 6


def test_lock_nudges_duplicates():
    p = lock_palette(np.array([[10.0, 10, 10], [10, 10, 10]]))
    assert not np.array_equal(p.colors[0], p.colors[1])


def test_palette_validation():
    with pytest.raises(InvalidInputError):
        LockedPalette(np.array([[1, 2, 3], [1, 2, 3]]), "x")
    with pytest.raises(InvalidInputError):
        LockedPalette(np.zeros((33, 3)) + np.arange(33)[:, None], "x")


def test_lut_roundtrip(tmp_path):
    lut = LutGamut.identity(5)
    write_lut(tmp_path / "g.lut", lut.table)
    back = read_lut(tmp_path / "g.lut")
    rgb = np.random.default_rng(0).uniform(0, 255, (50, 3))
    np.testing.assert_allclose(back(rgb), rgb, atol=1e-9)


def test_texture_validation():
    with pytest.raises(InvalidInputError):
        UvTexture(np.zeros((4, 4, 3), np.uint8), np.ones((4, 4), bool))
    with pytest.raises(InvalidInputError):
        UvTexture(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), bool))
    with pytest.raises(InvalidInputError):
        UvTexture(np.zeros((8, 8, 3), np.uint8), np.ones((8, 8), bool), "scarf")


def test_single_color_one_point_at_mask_centroid():
    mask = np.zeros((10, 10), bool)
    mask[2:6, 3:9] = True
    tex = UvTexture(np.full((10, 10, 3), 90, np.uint8), mask)
    pal = lock_palette(np.array([[90.0, 90, 90]]))
    pts = extract_control_points(tex, pal, 1, seed=0).points
    np.testing.assert_allclose(pts[0, 0], [0.6, 0.4], atol=1e-12)


def test_midpoint_padding():
    mask = np.zeros((8, 8), bool)
    mask[1, 1] = mask[6, 6] = True
    tex = UvTexture(np.full((8, 8, 3), 50, np.uint8), mask)
    pal = lock_palette(np.array([[50.0, 50, 50]]))
    pts = extract_control_points(tex, pal, 3, seed=0).points[0]
    a, b = sorted(map(tuple, pts[:2]))
    np.testing.assert_allclose(pts[2], (np.array(a) + np.array(b)) / 2)


def test_checkerboard_points_on_pixel_centers():
    h = w = 8
    yy, xx = np.mgrid[0:h, 0:w]
    lab = (yy + xx) % 2
    cols = np.array([[255, 255, 255], [0, 0, 0]], np.uint8)
    tex = UvTexture(cols[lab], np.ones((h, w), bool))
    pal = lock_palette(cols.astype(float))
    pts = extract_control_points(tex, pal, 32, seed=0).points
    centers = {(round((x + 0.5) / w, 9), round((y + 0.5) / h, 9)) for y in range(h) for x in range(w)}
    for c in range(2):
        got = {tuple(np.round(p, 9)) for p in pts[c]}
        assert len(got) == 32 and got <= centers


def test_empty_cluster_warns():
    tex = UvTexture(np.full((8, 8, 3), 200, np.uint8), np.ones((8, 8), bool))
    pal = lock_palette(np.array([[200.0, 200, 200], [0, 0, 0]]))
    with pytest.warns(UserWarning, match="no pixels"):
        cps = extract_control_points(tex, pal, 4, seed=0)
    assert cps.empty_clusters == (1,)
    assert np.all((cps.points >= 0) & (cps.points <= 1))


def test_point_count_contract():
    params = build_texture_params(checker_texture(16, 16), k=2, p_max=4, seed=0)
    assert params.control_points.points.shape == (2, 4, 2)


def test_params_roundtrip(tmp_path):
    params = build_texture_params(checker_texture(16, 16), k=3, p_max=5, seed=1)
    back = params_from_dict(params_to_dict(params))
    np.testing.assert_array_equal(back.control_points.points, params.control_points.points)
    np.testing.assert_array_equal(back.palette.colors, params.palette.colors)
    np.testing.assert_array_equal(back.mask, params.mask)
    save_params(tmp_path / "p.json", {"upper": params})
    again = load_params(tmp_path / "p.json")["upper"]
    np.testing.assert_array_equal(again.control_points.points, params.control_points.points)


def test_build_deterministic():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = build_texture_params(checker_texture(16, 16), k=3, p_max=6, seed=4)
        b = build_texture_params(checker_texture(16, 16), k=3, p_max=6, seed=4)
    np.testing.assert_array_equal(a.control_points.points, b.control_points.points)
