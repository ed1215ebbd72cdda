"""Otsu thresholding of normalized SAR tiles, plain and Gaussian-prefiltered."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import BadKernel, DegenerateHistogram, EmptyInput, ShapeMismatch
from .raster import Raster, WaterMask

N_BINS = 256


@dataclass(frozen=True)
class Histogram:
    """Counts over [0, 1]; bin j holds values in (j/n, (j+1)/n], bin 0 also holds 0."""

    bins: np.ndarray

    @property
    def total(self):
        return self.bins.sum()

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    def edge(self, k: int) -> float:
        """Upper edge of bin ``k``; thresholding at it puts bins 0..k on the low side."""
        return (k + 1) / self.n_bins


def bin_index(values: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.clip(np.ceil(v * n_bins).astype(np.int64) - 1, 0, n_bins - 1)


def build_histogram(values: np.ndarray, n_bins: int = N_BINS) -> Histogram:
    return Histogram(np.bincount(bin_index(values, n_bins).ravel(), minlength=n_bins))


def _exact(c):
    c = c.item() if hasattr(c, "item") else c
    return int(c) if float(c).is_integer() else Fraction(c)


def otsu_bin(h: Histogram) -> int:
    """Index k maximizing between-class variance w0*w1*(mu0 - mu1)**2 when splitting after bin k.

    Scores are compared exactly (integer or rational arithmetic) so ties
    resolve deterministically to the smallest k.
    """
    counts = [_exact(c) for c in h.bins]
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be nonnegative")
    total = sum(counts)
    if total <= 0:
        raise EmptyInput("empty histogram")
    occupied = [j for j, c in enumerate(counts) if c]
    if len(occupied) == 1:
        warnings.warn(DegenerateHistogram(f"all mass in bin {occupied[0]}"), stacklevel=3)
        return occupied[0]
    s_total = sum(j * c for j, c in enumerate(counts))
    # w0*w1*(mu0-mu1)^2 == (S0*N - S*n0)^2 / (N^2 * n0 * n1); N^2 is common to all k
    best_k, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for k, c in enumerate(counts):
        n0 += c
        s0 += k * c
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * total - s_total * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(h: Histogram) -> float:
    return h.edge(otsu_bin(h))


def gaussian_kernel(kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise BadKernel(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if not sigma > 0:
        raise BadKernel(f"sigma must be positive, got {sigma}")
    x = np.arange(kernel_size) - kernel_size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_filter(r: Raster, kernel_size: int = 5, sigma: float = 1.0) -> Raster:
    """Normalized Gaussian smoothing with edge replication.

    Invalid pixels contribute nothing; each output is renormalized by the
    kernel weight that landed on valid pixels.
    """
    if r.bands != 1:
        raise ShapeMismatch(f"gaussian_filter expects 1 band, got {r.bands}")
    kernel = gaussian_kernel(kernel_size, sigma)
    w = r.valid.astype(np.float64)
    x = np.where(r.valid, r.data[0], 0.0).astype(np.float64)
    num = ndimage.correlate(x * w, kernel, mode="nearest")
    den = ndimage.correlate(w, kernel, mode="nearest")
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return Raster(out.astype(np.float32), r.valid, r.pixel_size_m, r.band_names)


def sar_threshold(
    tiles: Raster | Sequence[Raster],
    use_filter: bool = False,
    kernel_size: int = 5,
    sigma: float = 1.0,
    n_bins: int = N_BINS,
) -> float:
    """Otsu threshold over one tile, or pooled over several (per-scene mode)."""
    if isinstance(tiles, Raster):
        tiles = [tiles]
    bins = np.zeros(n_bins, np.int64)
    for t in tiles:
        if use_filter:
            t = gaussian_filter(t, kernel_size, sigma)
        bins += build_histogram(t.data[0][t.valid], n_bins).bins
    return otsu_threshold(Histogram(bins))


def otsu_segment(
    sar: Raster,
    use_filter: bool = False,
    kernel_size: int = 5,
    sigma: float = 1.0,
    threshold: float | None = None,
) -> WaterMask:
    """Water where the (optionally smoothed) backscatter is at or below the Otsu threshold.

    Pass ``threshold`` to reuse one computed elsewhere, e.g. pooled over a scene.
    """
    img = gaussian_filter(sar, kernel_size, sigma) if use_filter else sar
    if threshold is None:
        threshold = sar_threshold(img, use_filter=False)
    return WaterMask((img.data[0] <= threshold) & img.valid)
