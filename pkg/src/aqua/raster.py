"""Raster data model, SAR normalization, tiling, splitting and tile I/O.

Everything downstream passes images around as :class:`Raster` (float32
bands plus an explicit validity grid) and binary :class:`WaterMask`.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    AllInvalid,
    AquaError,
    BadMagic,
    DegenerateRange,
    EmptyInput,
    MissingBand,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)

TILE_MAGIC = b"DAQT"
TILE_VERSION = 1
_HEADER = struct.Struct("<4sBBHH6x")  # 16 bytes

MANIFEST_VERSION = 1
MANIFEST_KEYS = ("tile_id", "site", "date", "cloud_fraction", "split", "optical_path", "sar_path")
SPLITS = ("train", "val", "test")

# Scenes cloudier than this contribute no tiles.
MAX_CLOUD_FRACTION = 0.01


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """Band-major float32 image with a per-pixel validity grid.

    ``data`` has shape ``(bands, height, width)``; ``valid`` has shape
    ``(height, width)``. Values at invalid pixels are carried but never
    interpreted.
    """

    data: np.ndarray
    valid: np.ndarray
    pixel_size_m: float = 10.0
    band_names: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] < 1:
            raise ShapeMismatch(f"raster data must be (bands, h, w), got {data.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != data.shape[1:]:
            raise ShapeMismatch(f"valid grid {valid.shape} does not match data {data.shape[1:]}")
        if self.band_names and len(self.band_names) != data.shape[0]:
            raise ShapeMismatch(f"{len(self.band_names)} band names for {data.shape[0]} bands")
        if not np.isfinite(data[:, valid]).all():
            raise AquaError("non-finite value at a valid pixel")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "band_names", tuple(self.band_names))
        object.__setattr__(self, "flags", tuple(self.flags))

    @classmethod
    def from_array(cls, array, valid=None, **kwargs) -> "Raster":
        """Wrap a 2-D or (bands, h, w) array; by default a pixel is valid if finite in every band."""
        array = np.asarray(array, dtype=np.float32)
        if valid is None:
            valid = np.isfinite(array.reshape(-1, *array.shape[-2:])).all(axis=0)
        return cls(array, valid, **kwargs)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def band(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            if name_or_index not in self.band_names:
                raise MissingBand(f"band {name_or_index!r} not in {self.band_names}")
            name_or_index = self.band_names.index(name_or_index)
        return self.data[name_or_index]

    def crop(self, row: int, col: int, size: int) -> "Raster":
        return replace(
            self,
            data=self.data[:, row : row + size, col : col + size],
            valid=self.valid[row : row + size, col : col + size],
        )

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.valid, other.valid)
            and self.pixel_size_m == other.pixel_size_m
            and self.band_names == other.band_names
        )


@dataclass(frozen=True, eq=False)
class WaterMask:
    """Binary grid, 1 = water, 0 = ground."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {v.shape}")
        if v.dtype != np.uint8:
            if not np.isin(v, (0, 1)).all():
                raise AquaError("mask values must be 0 or 1")
            v = v.astype(np.uint8)
        elif v.size and v.max() > 1:
            raise AquaError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def crop(self, row: int, col: int, size: int) -> "WaterMask":
        return WaterMask(self.values[row : row + size, col : col + size])

    def to_raster(self, pixel_size_m: float = 10.0) -> Raster:
        return Raster(self.values.astype(np.float32), np.ones(self.shape, bool), pixel_size_m)

    @classmethod
    def from_raster(cls, r: Raster) -> "WaterMask":
        return cls(r.data[0] > 0.5)

    def __eq__(self, other):
        if not isinstance(other, WaterMask):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class TilePair:
    """Co-registered optical and SAR tiles plus acquisition metadata.

    ``masks`` optionally carries reference masks cut from the same window
    (synthetic scenes ship ``truth``, ``open_truth`` and ``vegetated``).
    """

    optical: Raster
    sar: Raster
    tile_id: str
    site: str = ""
    date: str = ""
    cloud_fraction: float = 0.0
    split: str = "train"
    masks: Mapping[str, WaterMask] = field(default_factory=dict)

    def __post_init__(self):
        if self.optical.shape != self.sar.shape or self.optical.pixel_size_m != self.sar.pixel_size_m:
            raise ShapeMismatch("optical and SAR tiles are not co-registered", tile_id=self.tile_id)
        if self.sar.bands != 1:
            raise ShapeMismatch("SAR tile must have exactly one band", tile_id=self.tile_id)
        if self.split not in SPLITS:
            raise AquaError(f"unknown split {self.split!r}", tile_id=self.tile_id)
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise AquaError("cloud_fraction outside [0, 1]", tile_id=self.tile_id)

    @property
    def fully_valid(self) -> bool:
        return bool(self.optical.valid.all() and self.sar.valid.all())


def normalize_sar(r: Raster, low: float = 1.0, high: float = 99.0) -> Raster:
    """Clip a one-band SAR raster to its [low, high] percentiles and min-max scale to [0, 1].

    Percentiles are taken over valid pixels only, with linear interpolation
    between order statistics. Invalid pixels keep their original values.
    If the clip range collapses a zero raster is returned, flagged
    ``degenerate_range``, and a :class:`DegenerateRange` warning is issued.
    """
    if r.bands != 1:
        raise ShapeMismatch(f"normalize_sar expects 1 band, got {r.bands}")
    vals = r.data[0][r.valid].astype(np.float64)
    if vals.size == 0:
        raise AllInvalid("no valid pixels to normalize")
    lo, hi = np.percentile(vals, [low, high], method="linear")
    out = r.data[0].astype(np.float64).copy()
    if not hi > lo:
        warnings.warn(DegenerateRange(f"percentile range collapsed at {lo!r}"), stacklevel=2)
        out[r.valid] = 0.0
        return replace(r, data=out[None].astype(np.float32), flags=r.flags + ("degenerate_range",))
    scaled = (np.clip(out, lo, hi) - lo) / (hi - lo)
    out[r.valid] = scaled[r.valid]
    return replace(r, data=out[None].astype(np.float32))


def tile_windows(height: int, width: int, tile_size: int) -> Iterator[tuple[int, int]]:
    """Top-left corners of non-overlapping full tiles, row-major; remainders dropped."""
    for row in range(0, height - tile_size + 1, tile_size):
        for col in range(0, width - tile_size + 1, tile_size):
            yield row, col


def tile_scene(
    optical: Raster,
    sar: Raster,
    tile_size: int = 64,
    cloud_fraction: float = 0.0,
    *,
    site: str = "",
    date: str = "",
    prefix: str = "tile",
    masks: Mapping[str, WaterMask] | None = None,
) -> list[TilePair]:
    """Cut a co-registered scene into tile pairs.

    A tile survives only if the scene is cloud-free enough and every
    optical and SAR pixel in the window is valid.
    """
    if optical.shape != sar.shape or optical.pixel_size_m != sar.pixel_size_m:
        raise ShapeMismatch(f"optical {optical.shape} vs SAR {sar.shape}")
    masks = dict(masks or {})
    for name, m in masks.items():
        if m.shape != sar.shape:
            raise ShapeMismatch(f"mask {name!r} {m.shape} vs scene {sar.shape}")
    if cloud_fraction > MAX_CLOUD_FRACTION:
        return []
    both_valid = optical.valid & sar.valid
    tiles = []
    for row, col in tile_windows(sar.height, sar.width, tile_size):
        if not both_valid[row : row + tile_size, col : col + tile_size].all():
            continue
        tiles.append(
            TilePair(
                optical=optical.crop(row, col, tile_size),
                sar=sar.crop(row, col, tile_size),
                tile_id=f"{prefix}_r{row // tile_size:03d}_c{col // tile_size:03d}",
                site=site,
                date=date,
                cloud_fraction=cloud_fraction,
                masks={k: m.crop(row, col, tile_size) for k, m in masks.items()},
            )
        )
    return tiles


def n_train(n: int, train_fraction: float) -> int:
    # round half up, so the count never depends on banker's rounding
    return int(np.floor(train_fraction * n + 0.5))


def split_dataset(tiles: Sequence[TilePair], train_fraction: float = 0.8, seed: int = 0) -> list[TilePair]:
    """Seeded shuffle-then-cut into train/val; input order is preserved in the output."""
    if not tiles:
        raise EmptyInput("no tiles to split")
    if not 0.0 < train_fraction < 1.0:
        raise AquaError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(tiles))
    is_train = np.zeros(len(tiles), bool)
    is_train[order[: n_train(len(tiles), train_fraction)]] = True
    return [replace(t, split="train" if flag else "val") for t, flag in zip(tiles, is_train)]


# ---------------------------------------------------------------- tile files


def tile_nbytes(bands: int, width: int, height: int) -> int:
    return _HEADER.size + 4 * bands * width * height + width * height


def encode_tile(r: Raster) -> bytes:
    if r.bands > 255 or r.width > 0xFFFF or r.height > 0xFFFF:
        raise AquaError("raster too large for the tile format")
    header = _HEADER.pack(TILE_MAGIC, TILE_VERSION, r.bands, r.width, r.height)
    return header + r.data.astype("<f4").tobytes() + r.valid.astype(np.uint8).tobytes()


def decode_tile(buf: bytes, pixel_size_m: float = 10.0, band_names: Sequence[str] = ()) -> Raster:
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"{len(buf)} bytes is shorter than the tile header")
    magic, version, bands, width, height = _HEADER.unpack_from(buf)
    if magic != TILE_MAGIC:
        raise BadMagic(f"expected {TILE_MAGIC!r}, found {magic!r}")
    if version != TILE_VERSION:
        raise UnsupportedVersion(f"tile version {version}")
    expected = tile_nbytes(bands, width, height)
    if len(buf) < expected:
        raise TruncatedFile(f"{len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise AquaError(f"{len(buf) - expected} trailing bytes after tile payload")
    npix = width * height
    data = np.frombuffer(buf, "<f4", bands * npix, _HEADER.size).reshape(bands, height, width)
    valid = np.frombuffer(buf, np.uint8, npix, _HEADER.size + 4 * bands * npix).reshape(height, width)
    if valid.max(initial=0) > 1:
        raise AquaError("validity bytes must be 0 or 1")
    return Raster(data.astype(np.float32), valid.astype(bool), pixel_size_m, tuple(band_names))


def write_tile(r: Raster, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tile(r))


def read_tile(path, pixel_size_m: float = 10.0, band_names: Sequence[str] = ()) -> Raster:
    return decode_tile(Path(path).read_bytes(), pixel_size_m, band_names)


def write_mask(mask: WaterMask, path, pixel_size_m: float = 10.0) -> None:
    write_tile(mask.to_raster(pixel_size_m), path)


def read_mask(path) -> WaterMask:
    return WaterMask.from_raster(read_tile(path))


# ------------------------------------------------------------------ manifests


def write_manifest(path, tiles: Sequence[Mapping], **meta) -> None:
    """Write a versioned manifest; keys are sorted so equal content gives equal bytes."""
    doc = {"manifest_version": MANIFEST_VERSION, **meta, "tiles": [dict(t) for t in tiles]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path, required: Sequence[str] = MANIFEST_KEYS) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AquaError(f"cannot read manifest: {exc}", path=str(path)) from exc
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise UnsupportedVersion(f"manifest_version {doc.get('manifest_version')!r}", path=str(path))
    for i, entry in enumerate(doc.get("tiles", [])):
        missing = [k for k in required if k not in entry]
        if missing:
            raise AquaError(f"manifest entry {i} lacks {missing}", path=str(path))
    return doc


def load_pair(entry: Mapping, root, mask_keys: Sequence[str] = ()) -> TilePair:
    """Materialize one manifest entry; extra mask paths are read from ``<key>_path``."""
    root = Path(root)
    px = entry.get("pixel_size_m", 10.0)
    optical = read_tile(root / entry["optical_path"], px, entry.get("optical_bands", ("green", "nir")))
    sar = read_tile(root / entry["sar_path"], px, ("vh",))
    masks = {k: read_mask(root / entry[f"{k}_path"]) for k in mask_keys if f"{k}_path" in entry}
    return TilePair(
        optical=optical,
        sar=sar,
        tile_id=entry["tile_id"],
        site=entry["site"],
        date=entry["date"],
        cloud_fraction=float(entry["cloud_fraction"]),
        split=entry["split"],
        masks=masks,
    )
