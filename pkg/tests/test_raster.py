import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqua.errors import AllInvalid, BadMagic, DegenerateRange, EmptyInput, ShapeMismatch, TruncatedFile, UnsupportedVersion
from aqua.raster import (
    Raster,
    TilePair,
    WaterMask,
    decode_tile,
    encode_tile,
    load_pair,
    normalize_sar,
    read_manifest,
    read_tile,
    split_dataset,
    tile_nbytes,
    tile_scene,
    write_manifest,
    write_mask,
    write_tile,
)


def percentile_oracle(values, q):
    """Linear interpolation between sorted order statistics, written out by hand."""
    v = sorted(float(x) for x in values)
    pos = q / 100.0 * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def scene(h, w, seed=0):
    rng = np.random.default_rng(seed)
    optical = Raster(rng.uniform(0.01, 0.3, (2, h, w)), np.ones((h, w), bool), band_names=("green", "nir"))
    sar = Raster(rng.normal(-15, 3, (h, w)), np.ones((h, w), bool))
    return optical, sar


def pair(tile_id="t", **kw):
    opt, sar = scene(8, 8)
    return TilePair(opt, sar, tile_id, **kw)


# ------------------------------------------------------------ data model


def test_raster_rejects_nan_at_valid_pixel():
    with pytest.raises(Exception):
        Raster(np.array([[np.nan, 1.0]]), np.array([[True, True]]))
    r = Raster(np.array([[np.nan, 1.0]]), np.array([[False, True]]))
    assert r.bands == 1 and r.width == 2 and r.height == 1


def test_raster_shape_checks():
    with pytest.raises(ShapeMismatch):
        Raster(np.zeros((2, 3)), np.ones((3, 2), bool))
    with pytest.raises(ShapeMismatch):
        Raster(np.zeros((2, 3, 3)), np.ones((3, 3), bool), band_names=("a",))


def test_raster_is_immutable():
    r = Raster(np.zeros((4, 4)), np.ones((4, 4), bool))
    with pytest.raises(ValueError):
        r.data[0, 0, 0] = 1.0


def test_watermask_binary_only():
    assert WaterMask(np.array([[True, False]])).values.dtype == np.uint8
    with pytest.raises(Exception):
        WaterMask(np.array([[0, 2]]))


def test_tilepair_requires_coregistration():
    opt, _ = scene(8, 8)
    _, sar = scene(8, 4)
    with pytest.raises(ShapeMismatch):
        TilePair(opt, sar, "x")


# --------------------------------------------------------- normalize_sar


def test_normalize_uniform_is_near_identity():
    vals = np.linspace(0, 1, 100).reshape(10, 10)
    out = normalize_sar(Raster(vals, np.ones((10, 10), bool))).data[0]
    lo, hi = percentile_oracle(vals.ravel(), 1), percentile_oracle(vals.ravel(), 99)
    expected = (np.clip(vals, lo, hi) - lo) / (hi - lo)
    np.testing.assert_allclose(out, expected, atol=1e-6)
    # interior values only move by the stretch of the clipped tails
    assert np.abs(out - vals).max() < 0.011


def test_normalize_constant_is_degenerate():
    r = Raster(np.full((4, 4), 5.0), np.ones((4, 4), bool))
    with pytest.warns(DegenerateRange):
        out = normalize_sar(r)
    assert (out.data == 0).all()
    assert "degenerate_range" in out.flags


def test_normalize_db_extremes_against_sorting_oracle():
    vals = np.array([-30.0] * 98 + [-60.0, 0.0])
    np.random.default_rng(3).shuffle(vals)
    r = Raster(vals.reshape(10, 10), np.ones((10, 10), bool))
    out = normalize_sar(r).data[0].ravel()
    lo, hi = percentile_oracle(vals, 1), percentile_oracle(vals, 99)
    assert lo == pytest.approx(-30.3) and hi == pytest.approx(-29.7)
    assert out[vals == -60.0][0] == 0.0
    assert out[vals == 0.0][0] == 1.0
    np.testing.assert_allclose(out[vals == -30.0], 0.5, atol=1e-6)


def test_normalize_ignores_invalid_pixels():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(16, 16))
    valid = rng.random((16, 16)) > 0.3
    data[~valid] = 1e6
    out = normalize_sar(Raster(data, valid))
    assert out.data[0][valid].min() >= 0 and out.data[0][valid].max() <= 1
    np.testing.assert_array_equal(out.data[0][~valid], np.float32(1e6))
    np.testing.assert_array_equal(out.valid, valid)
    lo = percentile_oracle(data[valid], 1)
    hi = percentile_oracle(data[valid], 99)
    np.testing.assert_allclose(out.data[0][valid], (np.clip(data[valid], lo, hi) - lo) / (hi - lo), atol=1e-6)


def test_normalize_all_invalid():
    with pytest.raises(AllInvalid):
        normalize_sar(Raster(np.zeros((3, 3)), np.zeros((3, 3), bool)))


@given(st.integers(0, 2**31), st.integers(2, 40))
@settings(max_examples=40, deadline=None)
def test_normalize_idempotent_on_saturated_rasters(seed, n_tail):
    # already-normalized rasters whose 0/1 tails hold more than the 1% clip mass
    rng = np.random.default_rng(seed)
    vals = rng.random(400)
    vals[:n_tail + 4] = 0.0
    vals[-(n_tail + 4):] = 1.0
    r = Raster(vals.reshape(20, 20), np.ones((20, 20), bool))
    once = normalize_sar(r)
    twice = normalize_sar(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


# ------------------------------------------------------------ tile_scene


def test_tile_counts():
    assert len(tile_scene(*scene(128, 128), 64)) == 4
    assert len(tile_scene(*scene(130, 130), 64)) == 4


def test_tile_validity_filter():
    opt, sar = scene(128, 128)
    valid = np.ones((128, 128), bool)
    valid[5, 7] = False
    sar = Raster(sar.data, valid)
    tiles = tile_scene(opt, sar, 64)
    assert len(tiles) == 3
    assert all(t.tile_id != "tile_r000_c000" for t in tiles)


def test_tile_cloud_filter():
    assert tile_scene(*scene(128, 128), 64, cloud_fraction=0.02) == []
    assert len(tile_scene(*scene(128, 128), 64, cloud_fraction=0.01)) == 4


def test_tile_shape_mismatch():
    opt, _ = scene(128, 128)
    _, sar = scene(128, 64)
    with pytest.raises(ShapeMismatch):
        tile_scene(opt, sar, 64)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 7), st.sampled_from([8, 16]))
@settings(max_examples=25, deadline=None)
def test_tiles_reassemble_cropped_scene(rows, cols, extra, size):
    h, w = rows * size + extra, cols * size + extra
    opt, sar = scene(h, w, seed=rows * 10 + cols)
    truth = WaterMask(np.random.default_rng(extra).random((h, w)) > 0.5)
    tiles = tile_scene(opt, sar, size, masks={"truth": truth})
    assert len(tiles) == rows * cols
    grid = np.concatenate(
        [np.concatenate([t.sar.data for t in tiles[r * cols : (r + 1) * cols]], axis=2) for r in range(rows)], axis=1
    )
    np.testing.assert_array_equal(grid, sar.data[:, : rows * size, : cols * size])
    mgrid = np.block([[t.masks["truth"].values for t in tiles[r * cols : (r + 1) * cols]] for r in range(rows)])
    np.testing.assert_array_equal(mgrid, truth.values[: rows * size, : cols * size])


# ---------------------------------------------------------- split_dataset


def test_split_exact_cut_and_determinism():
    tiles = [pair(f"t{i}") for i in range(10)]
    a = split_dataset(tiles, 0.8, 7)
    b = split_dataset(tiles, 0.8, 7)
    assert sum(t.split == "train" for t in a) == 8
    assert [t.split for t in a] == [t.split for t in b]
    assert [t.tile_id for t in a] == [t.tile_id for t in tiles]


def test_split_of_45500_tiles():
    opt, sar = scene(2, 2)
    tiles = [TilePair(opt, sar, f"t{i}") for i in range(45_500)]
    out = split_dataset(tiles, 0.8, 0)
    n_tr = sum(t.split == "train" for t in out)
    assert (n_tr, len(out) - n_tr) == (36_400, 9_100)


@given(st.integers(1, 300), st.floats(0.01, 0.99))
def test_split_train_count_rounds(n, frac):
    from aqua.raster import n_train

    assert n_train(n, frac) == int(np.floor(frac * n + 0.5))


def test_split_errors():
    with pytest.raises(EmptyInput):
        split_dataset([], 0.8, 0)
    with pytest.raises(Exception):
        split_dataset([pair()], 1.0, 0)


# ------------------------------------------------------------- tile files


def test_tile_file_size(tmp_path):
    r = Raster(np.zeros((64, 64)), np.ones((64, 64), bool))
    write_tile(r, tmp_path / "a.dqt")
    assert (tmp_path / "a.dqt").stat().st_size == 16 + 4 * 64 * 64 + 64 * 64 == tile_nbytes(1, 64, 64)


def test_tile_header_layout():
    r = Raster(np.arange(6, dtype=np.float32).reshape(2, 3), np.array([[1, 0, 1], [1, 1, 1]], bool))
    buf = encode_tile(r)
    assert buf[:4] == b"DAQT" and buf[4] == 1 and buf[5] == 1
    assert int.from_bytes(buf[6:8], "little") == 3 and int.from_bytes(buf[8:10], "little") == 2
    assert buf[10:16] == bytes(6)
    assert np.frombuffer(buf[16:40], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert list(buf[40:]) == [1, 0, 1, 1, 1, 1]


def test_tile_round_trip_with_nan_at_invalid(tmp_path):
    data = np.random.default_rng(0).normal(size=(3, 5, 7)).astype(np.float32)
    valid = np.ones((5, 7), bool)
    valid[2, 3] = False
    data[:, 2, 3] = np.nan
    r = Raster(data, valid)
    write_tile(r, tmp_path / "x.dqt")
    back = read_tile(tmp_path / "x.dqt")
    assert back.data.tobytes() == r.data.tobytes()
    np.testing.assert_array_equal(back.valid, valid)


def test_tile_errors():
    buf = encode_tile(Raster(np.zeros((4, 4)), np.ones((4, 4), bool)))
    with pytest.raises(BadMagic):
        decode_tile(b"XXXX" + buf[4:])
    with pytest.raises(UnsupportedVersion):
        decode_tile(buf[:4] + bytes([2]) + buf[5:])
    with pytest.raises(TruncatedFile):
        decode_tile(buf[:-1])
    with pytest.raises(TruncatedFile):
        decode_tile(buf[:10])


def test_manifest_round_trip(tmp_path):
    opt, sar = scene(8, 8)
    write_tile(opt, tmp_path / "o.dqt")
    write_tile(sar, tmp_path / "s.dqt")
    write_mask(WaterMask(np.eye(8, dtype=bool)), tmp_path / "m.dqt")
    entry = {
        "tile_id": "a",
        "site": "s",
        "date": "2020-06-23",
        "cloud_fraction": 0.0,
        "split": "train",
        "optical_path": "o.dqt",
        "sar_path": "s.dqt",
        "truth_path": "m.dqt",
    }
    write_manifest(tmp_path / "m.json", [entry])
    doc = read_manifest(tmp_path / "m.json")
    assert doc["manifest_version"] == 1
    p = load_pair(doc["tiles"][0], tmp_path, ("truth",))
    assert p.optical == opt and p.masks["truth"] == WaterMask(np.eye(8, dtype=bool))
    bad = dict(entry)
    del bad["sar_path"]
    write_manifest(tmp_path / "bad.json", [bad])
    with pytest.raises(Exception):
        read_manifest(tmp_path / "bad.json")

