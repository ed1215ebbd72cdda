"""Procedural co-registered optical + SAR scenes with known water masks.

Geometry comes from seeded white noise blurred with a Gaussian and cut at
a quantile, so the water fraction is hit almost exactly. Four surface
classes are painted onto it:

==================  ===============  =====================
class               optical (G, NIR) SAR backscatter
==================  ===============  =====================
open water          G > NIR          low
vegetated water     NIR > G          low (same as open)
soil                NIR >= G         high
vegetation          NIR > G          high
==================  ===============  =====================

Vegetated water is invisible to a water index but not to radar, which is
what lets a radar student outgrow its optical teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InfeasibleSpec
from .raster import Raster, WaterMask

CLASSES = ("soil", "vegetation", "open_water", "vegetated_water")
SOIL, VEGETATION, OPEN_WATER, VEGETATED_WATER = range(4)

# Reflectances (mean, sigma) and VH backscatter in dB (mean, sigma). Chosen so
# the noise-free water index has an unambiguous sign per class.
DEFAULT_BAND_STATS = {
    "open_water": {"green": (0.06, 0.008), "nir": (0.02, 0.004), "sar_db": (-22.0, 0.0)},
    "vegetated_water": {"green": (0.06, 0.008), "nir": (0.22, 0.03), "sar_db": (-22.0, 0.0)},
    "soil": {"green": (0.10, 0.012), "nir": (0.20, 0.03), "sar_db": (-14.0, 0.0)},
    "vegetation": {"green": (0.07, 0.01), "nir": (0.30, 0.04), "sar_db": (-12.0, 0.0)},
}

_MAX_RETRIES = 8
_COVER_TOLERANCE = 0.05


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 320
    height: int = 320
    water_cover_target: float = 0.25
    vegetated_water_fraction: float = 0.0
    speckle_looks: int = 4
    band_stats: dict = field(default_factory=lambda: DEFAULT_BAND_STATS)
    vegetation_fraction: float = 0.5  # share of land painted as vegetation
    feature_scale: float = 12.0  # blur sigma of the water field, pixels
    vegetated_margin: float = 8.0  # vegetated patches stay within this many pixels of shore
    noise_free: bool = False  # class means only, no speckle
    cloud_fraction: float = 0.0
    pixel_size_m: float = 10.0

    def __post_init__(self):
        for name in ("water_cover_target", "vegetated_water_fraction", "vegetation_fraction", "cloud_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleSpec(f"{name} must lie in [0, 1], got {v}")
        if int(self.speckle_looks) < 1:
            raise InfeasibleSpec(f"speckle_looks must be >= 1, got {self.speckle_looks}")
        if self.width < 1 or self.height < 1 or self.feature_scale <= 0 or self.vegetated_margin <= 0:
            raise InfeasibleSpec("scene dimensions, feature_scale and vegetated_margin must be positive")
        missing = [c for c in CLASSES if c not in self.band_stats]
        if missing:
            raise InfeasibleSpec(f"band_stats lacks classes {missing}")
        for c in CLASSES:
            for key in ("green", "nir", "sar_db"):
                mean, sigma = self.band_stats[c][key]
                if not (np.isfinite(mean) and np.isfinite(sigma) and sigma >= 0):
                    raise InfeasibleSpec(f"band_stats[{c!r}][{key!r}] must be finite with sigma >= 0")


@dataclass(frozen=True)
class SynthScene:
    optical: Raster
    sar: Raster  # VH backscatter, dB
    truth: WaterMask
    open_truth: WaterMask
    classes: np.ndarray

    @property
    def vegetated(self) -> WaterMask:
        return WaterMask(self.truth.values & ~self.open_truth.values & 1)


def speckle_field(width: int, height: int, looks: int, seed) -> Raster:
    """Multiplicative multilook speckle: i.i.d. Gamma(shape=L, scale=1/L), mean 1, variance 1/L."""
    if looks < 1:
        raise InfeasibleSpec(f"looks must be >= 1, got {looks}")
    rng = np.random.default_rng(seed)
    noise = rng.gamma(shape=float(looks), scale=1.0 / looks, size=(height, width))
    return Raster(noise.astype(np.float32), np.ones((height, width), bool))


def _smooth_field(rng, shape, sigma):
    z = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (z - z.mean()) / (z.std() + 1e-12)


def _water_geometry(spec: SceneSpec, rng) -> np.ndarray:
    shape = (spec.height, spec.width)
    target = spec.water_cover_target
    if target == 0.0:
        return np.zeros(shape, bool)
    if target == 1.0:
        return np.ones(shape, bool)
    for _ in range(_MAX_RETRIES):
        f = _smooth_field(rng, shape, spec.feature_scale)
        water = f > np.quantile(f, 1.0 - target)
        if abs(water.mean() - target) <= _COVER_TOLERANCE:
            return water
    raise InfeasibleSpec(f"could not reach water cover {target} within {_MAX_RETRIES} draws")


def _vegetated_patches(spec: SceneSpec, water: np.ndarray, rng) -> np.ndarray:
    """Mark exactly round(fraction * water) pixels as vegetated, in patches along the shore.

    Inside the margin band the choice follows a smooth random field, so some
    stretches of shore are vegetated and others are open. Only if the band is
    too small does selection spill inward, nearest to shore first.
    """
    n_water = int(water.sum())
    k = int(round(spec.vegetated_water_fraction * n_water))
    patch = _smooth_field(rng, water.shape, spec.feature_scale / 2)
    if k == 0:
        return np.zeros_like(water)
    dist = ndimage.distance_transform_edt(water)
    in_margin = water & (dist <= spec.vegetated_margin)
    # patch values are standardized, so 1e3 + dist always ranks after the band
    score = np.where(in_margin, patch, np.where(water, 1e3 + dist, np.inf))
    idx = np.argsort(score, axis=None, kind="stable")[:k]
    out = np.zeros(water.size, bool)
    out[idx] = True
    return out.reshape(water.shape)


def generate_scene(spec: SceneSpec) -> SynthScene:
    """Deterministically render one scene from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    water = _water_geometry(spec, rng)
    vegetated = _vegetated_patches(spec, water, rng)
    land_field = _smooth_field(rng, shape, spec.feature_scale)
    is_veg_land = land_field > np.quantile(land_field, 1.0 - spec.vegetation_fraction)

    classes = np.full(shape, SOIL, np.uint8)
    classes[is_veg_land] = VEGETATION
    classes[water] = OPEN_WATER
    classes[vegetated] = VEGETATED_WATER

    stats = [spec.band_stats[c] for c in CLASSES]
    bands = []
    for key in ("green", "nir"):
        mean = np.array([s[key][0] for s in stats])[classes]
        sigma = np.array([s[key][1] for s in stats])[classes]
        z = rng.standard_normal(shape)
        value = mean if spec.noise_free else mean + sigma * z
        bands.append(np.maximum(value, 1e-4))
    optical = Raster(np.stack(bands).astype(np.float32), np.ones(shape, bool), spec.pixel_size_m, ("green", "nir"))

    db_mean = np.array([s["sar_db"][0] for s in stats])[classes]
    db_sigma = np.array([s["sar_db"][1] for s in stats])[classes]
    texture = rng.standard_normal(shape)
    speckle_seed = int(rng.integers(2**63 - 1))
    if spec.noise_free:
        sar_db = db_mean
    else:
        intensity = 10.0 ** ((db_mean + db_sigma * texture) / 10.0)
        intensity = intensity * speckle_field(spec.width, spec.height, spec.speckle_looks, speckle_seed).data[0]
        sar_db = 10.0 * np.log10(intensity)
    sar = Raster(sar_db.astype(np.float32), np.ones(shape, bool), spec.pixel_size_m, ("vh",))

    return SynthScene(
        optical=optical,
        sar=sar,
        truth=WaterMask(water),
        open_truth=WaterMask(water & ~vegetated),
        classes=classes,
    )
