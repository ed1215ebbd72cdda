from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqua.baseline import (
    Histogram,
    build_histogram,
    gaussian_filter,
    gaussian_kernel,
    otsu_bin,
    otsu_segment,
    otsu_threshold,
    sar_threshold,
)
from aqua.errors import BadKernel, DegenerateHistogram
from aqua.metrics import ConfusionCounts, confusion, metrics
from aqua.raster import Raster, normalize_sar, tile_scene
from aqua.synth import DEFAULT_BAND_STATS, SceneSpec, generate_scene


def between_class_scores(counts):
    """w0 * w1 * (mu0 - mu1)^2 for every split point, from the definitions, in exact rationals."""
    counts = [Fraction(int(c)) for c in counts]
    total = sum(counts)
    mass = sum(j * c for j, c in enumerate(counts))
    scores = []
    n0 = m0 = Fraction(0)
    for k, c in enumerate(counts):
        n0 += c
        m0 += k * c
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            scores.append(Fraction(0))
            continue
        mu0, mu1 = m0 / n0, (mass - m0) / n1
        scores.append((n0 / total) * (n1 / total) * (mu0 - mu1) ** 2)
    return scores


def exhaustive_otsu(counts):
    scores = between_class_scores(counts)
    return scores.index(max(scores))  # first index: smallest threshold wins ties


def naive_filter(img, valid, kernel):
    h, w = img.shape
    r = kernel.shape[0] // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            num = den = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    if valid[ii, jj]:
                        num += kernel[di + r, dj + r] * img[ii, jj]
                        den += kernel[di + r, dj + r]
            out[i, j] = num / den if den > 0 else 0.0
    return out


# ------------------------------------------------------------------ otsu


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        counts = rng.integers(0, 50, 256) * (rng.random(256) < rng.uniform(0.05, 1.0))
        if np.count_nonzero(counts) < 2:
            continue
        assert otsu_bin(Histogram(counts)) == exhaustive_otsu(counts)


def test_otsu_tie_breaks_to_smallest_threshold():
    counts = np.zeros(256, int)
    counts[[10, 200]] = 5
    # every split between the spikes scores the same
    assert exhaustive_otsu(counts) == 10
    assert otsu_bin(Histogram(counts)) == 10
    t = otsu_threshold(Histogram(counts))
    assert 10 / 256 < t <= 200 / 256


def test_otsu_two_level_image():
    img = np.full(1000, 0.8)
    img[:600] = 0.2
    t = otsu_threshold(build_histogram(img))
    assert 0.2 < t <= 0.8
    assert (img[:600] <= t).all() and (img[600:] > t).all()


@given(st.lists(st.integers(0, 1000), min_size=256, max_size=256), st.integers(1, 1000))
@settings(max_examples=60, deadline=None)
def test_otsu_scale_invariant(counts, c):
    if sum(1 for x in counts if x) < 2:
        return
    h = Histogram(np.array(counts))
    assert otsu_bin(Histogram(np.array(counts) * c)) == otsu_bin(h)
    assert otsu_bin(Histogram(np.array(counts) * 0.37)) == otsu_bin(h)


@given(st.lists(st.integers(0, 30), min_size=256, max_size=256))
@settings(max_examples=40, deadline=None)
def test_otsu_score_dominates_every_candidate(counts):
    if sum(1 for x in counts if x) < 2:
        return
    k = otsu_bin(Histogram(np.array(counts)))
    scores = between_class_scores(counts)
    assert all(scores[k] >= s for s in scores)


def test_otsu_degenerate_histogram():
    counts = np.zeros(256, int)
    counts[77] = 12
    with pytest.warns(DegenerateHistogram):
        assert otsu_threshold(Histogram(counts)) == 78 / 256


def test_histogram_bins_are_right_closed():
    h = build_histogram(np.array([0.0, 1 / 256, 1 / 256 + 1e-9, 1.0]))
    assert h.bins[0] == 2 and h.bins[1] == 1 and h.bins[255] == 1
    assert h.total == 4


# -------------------------------------------------------------- gaussian


def test_kernel_normalized_and_validated():
    k = gaussian_kernel(5, 1.0)
    assert k.shape == (5, 5) and k.sum() == pytest.approx(1.0)
    with pytest.raises(BadKernel):
        gaussian_kernel(4, 1.0)
    with pytest.raises(BadKernel):
        gaussian_kernel(5, 0.0)


def test_filter_preserves_constant():
    r = Raster(np.full((16, 16), 0.37), np.ones((16, 16), bool))
    np.testing.assert_allclose(gaussian_filter(r).data, 0.37, atol=1e-6)


def test_filter_impulse_response():
    img = np.zeros((11, 11))
    img[5, 5] = 1.0
    out = gaussian_filter(Raster(img, np.ones((11, 11), bool))).data[0]
    k = gaussian_kernel(5, 1.0)
    assert out[5, 5] == pytest.approx(k[2, 2], abs=1e-7)
    np.testing.assert_allclose(out[3:8, 3:8], k, atol=1e-7)


def test_filter_matches_naive_convolution():
    rng = np.random.default_rng(4)
    img = rng.random((64, 64))
    valid = np.ones((64, 64), bool)
    out = gaussian_filter(Raster(img, valid)).data[0]
    np.testing.assert_allclose(out, naive_filter(img, valid, gaussian_kernel(5, 1.0)), atol=1e-6)


def test_filter_renormalizes_around_invalid_pixels():
    rng = np.random.default_rng(5)
    img = rng.random((24, 24))
    valid = rng.random((24, 24)) > 0.2
    img[~valid] = np.nan
    out = gaussian_filter(Raster(img, valid), 3, 0.8).data[0]
    np.testing.assert_allclose(out, naive_filter(np.nan_to_num(img), valid, gaussian_kernel(3, 0.8)), atol=1e-6)


def test_filter_mean_drift_is_only_a_border_effect():
    # replicated edges keep the DC level but weight border pixels unevenly
    rng = np.random.default_rng(6)
    img = rng.random((64, 64))
    out = gaussian_filter(Raster(img, np.ones((64, 64), bool))).data[0]
    assert abs(out[8:-8, 8:-8].mean() - img[8:-8, 8:-8].mean()) < 2e-3
    assert abs(out.mean() - img.mean()) < 2e-3


# ----------------------------------------------------------- segmentation


def two_level_stats():
    stats = {c: dict(v) for c, v in DEFAULT_BAND_STATS.items()}
    stats["vegetation"]["sar_db"] = stats["soil"]["sar_db"]
    return stats


@pytest.mark.parametrize("use_filter", [False, True])
def test_noise_free_sar_is_segmented_exactly(use_filter):
    s = generate_scene(SceneSpec(seed=21, width=64, height=64, noise_free=True, band_stats=two_level_stats()))
    sar = normalize_sar(s.sar)
    mask = otsu_segment(sar, use_filter=False)
    assert mask == s.truth
    if use_filter:
        # smoothing blurs the shoreline but the interior stays exact
        from scipy import ndimage

        core = ndimage.binary_erosion(s.truth.values, iterations=3) | ~ndimage.binary_dilation(
            s.truth.values, iterations=3
        )
        fm = otsu_segment(sar, use_filter=True).values
        np.testing.assert_array_equal(fm[core], s.truth.values[core])


def test_filter_helps_on_speckle():
    pooled = {False: ConfusionCounts(), True: ConfusionCounts()}
    for seed in range(100):
        s = generate_scene(SceneSpec(seed=1000 + seed, width=64, height=64, water_cover_target=0.3, speckle_looks=4))
        sar = normalize_sar(s.sar)
        for f in pooled:
            pooled[f] = pooled[f] + confusion(otsu_segment(sar, f), s.truth)
    assert metrics(pooled[True]).iou >= metrics(pooled[False]).iou


def test_all_land_tile_still_gets_split():
    s = generate_scene(SceneSpec(seed=31, width=64, height=64, water_cover_target=0.0))
    mask = otsu_segment(normalize_sar(s.sar), use_filter=True)
    # no water exists, yet Otsu always picks a threshold inside the data
    assert 0 < mask.values.sum() < mask.values.size


def test_per_scene_threshold_pools_tiles():
    s = generate_scene(SceneSpec(seed=41, width=128, height=128))
    sar = normalize_sar(s.sar)
    tiles = [t.sar for t in tile_scene(s.optical, sar, 64)]
    pooled = sar_threshold(tiles)
    assert pooled == sar_threshold(sar)
    m = otsu_segment(tiles[0], threshold=pooled)
    np.testing.assert_array_equal(m.values, (tiles[0].data[0] <= pooled).astype(np.uint8))
