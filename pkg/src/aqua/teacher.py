"""Optical water indices and the thresholded teacher masks built from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingBand, UnknownIndex
from .raster import Raster, WaterMask

INDEX_NAMES = ("NDWI", "MNDWI", "AWEI", "HRWI")

# Indices computed as (a - b) / (a + b) over a band pair.
_NORMALIZED_DIFFERENCE = {"NDWI": ("green", "nir"), "MNDWI": ("green", "swir1")}
# Indices computed as sum(w_band * band) + offset; weights come from config presets.
_LINEAR = ("AWEI", "HRWI")


@dataclass(frozen=True)
class IndexSpec:
    name: str = "NDWI"
    threshold: float = 0.0
    coefficients: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.upper())
        if self.name not in INDEX_NAMES:
            raise UnknownIndex(f"unknown index {self.name!r}; expected one of {INDEX_NAMES}")
        if self.name in _LINEAR and not self.coefficients:
            raise UnknownIndex(f"{self.name} needs band coefficients (see the config presets)")


def _band(optical: Raster, name: str) -> np.ndarray:
    if name not in optical.band_names:
        raise MissingBand(f"index needs band {name!r}; raster has {optical.band_names}")
    return optical.data[optical.band_names.index(name)].astype(np.float64)


def normalized_difference(optical: Raster, a: str, b: str, name: str = "nd") -> Raster:
    """(a - b) / (a + b); pixels with a zero denominator become 0 and are marked invalid."""
    x, y = _band(optical, a), _band(optical, b)
    den = x + y
    ok = den != 0
    out = np.zeros_like(den)
    np.divide(x - y, den, out=out, where=ok)
    return Raster(out.astype(np.float32), optical.valid & ok, optical.pixel_size_m, (name,))


def ndwi(optical: Raster) -> Raster:
    """Normalized difference water index, (green - nir) / (green + nir)."""
    return normalized_difference(optical, "green", "nir", "ndwi")


def _linear_index(optical: Raster, coefficients: dict, name: str) -> Raster:
    acc = np.full(optical.shape, float(coefficients.get("offset", 0.0)))
    for band, weight in coefficients.items():
        if band == "offset":
            continue
        acc = acc + float(weight) * _band(optical, band)
    return Raster(acc.astype(np.float32), optical.valid, optical.pixel_size_m, (name,))


def apply_index(optical: Raster, spec: IndexSpec) -> Raster:
    if spec.name in _NORMALIZED_DIFFERENCE:
        a, b = _NORMALIZED_DIFFERENCE[spec.name]
        return normalized_difference(optical, a, b, spec.name.lower())
    if spec.name in _LINEAR:
        return _linear_index(optical, spec.coefficients, spec.name.lower())
    raise UnknownIndex(spec.name)


def teacher_mask(optical: Raster, spec: IndexSpec = IndexSpec()) -> WaterMask:
    """Water where the index is strictly above the threshold; invalid pixels are ground."""
    index = apply_index(optical, spec)
    return WaterMask((index.data[0] > spec.threshold) & index.valid)
