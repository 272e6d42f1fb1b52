"""Activation statistics.

Gaussian fitting, outlier-value classification, uniform fake quantization,
and k-bin histogram entropy. All functions are pure and operate on plain
numpy arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadRange,
    DegenerateSigma,
    EmptyValues,
    TooFewSamples,
    UnknownBitwidth,
)

QUANT_BITWIDTHS = (2, 4, 8)
IDENTITY_BITS = 32  # sentinel: no quantization
DEFAULT_BINS = 256


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float  # population standard deviation
    sample_count: int

    @property
    def degenerate(self) -> bool:
        return self.sigma == 0.0


@dataclass(frozen=True)
class OutlierModel:
    """Tail test on the fitted Gaussian.

    A value is an outlier when its normalized density drops to at most
    1 - phi, i.e. when |x - mu| exceeds sigma * sqrt(-2 ln(1 - phi)).
    ``literal_rule`` switches to thresholding the raw (unnormalized)
    density against phi instead, kept for comparison runs.
    """

    fit: GaussianFit
    phi: float
    literal_rule: bool = False

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must be in [0, 1), got {self.phi}")

    def threshold(self) -> float:
        """Distance from the mean beyond which values count as outliers."""
        if self.fit.sigma <= 0.0:
            raise DegenerateSigma("sigma must be positive for classification")
        return self.fit.sigma * math.sqrt(-2.0 * math.log1p(-self.phi))

    def outlier_mask(self, values) -> np.ndarray:
        """Boolean mask of outliers in ``values``."""
        arr = np.asarray(values, dtype=np.float64)
        if self.fit.sigma <= 0.0:
            raise DegenerateSigma("sigma must be positive for classification")
        if self.literal_rule:
            # The raw rule flags values whose density EXCEEDS phi, which
            # selects the bell's center rather than its tails.
            peak = 1.0 / (math.sqrt(2.0 * math.pi) * self.fit.sigma)
            z = (arr - self.fit.mu) / self.fit.sigma
            return peak * np.exp(-0.5 * z * z) > self.phi
        return np.abs(arr - self.fit.mu) > self.threshold()


def fit_gaussian(samples) -> GaussianFit:
    """Sample mean and population standard deviation.

    A zero spread is reported through ``GaussianFit.degenerate`` rather than
    raised, so callers can fall back gracefully.
    """
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size < 2:
        raise TooFewSamples(f"need at least 2 samples, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("samples must be finite")
    mu = float(values.mean())
    sigma = float(np.sqrt(np.mean((values - mu) ** 2)))
    if sigma == 0.0:
        warnings.warn("degenerate Gaussian fit: all samples identical", stacklevel=2)
    return GaussianFit(mu=mu, sigma=sigma, sample_count=int(values.size))


def classify_value(x: float, om: OutlierModel) -> bool:
    """True when ``x`` is an outlier under the model."""
    return bool(om.outlier_mask(np.asarray([x]))[0])


def classify_values(values, om: OutlierModel) -> np.ndarray:
    """Vectorized outlier mask for a pool of values."""
    return om.outlier_mask(values)


def fake_quantize(values, bits: int, value_range: tuple[float, float]):
    """Round values to a uniform ``bits``-bit grid over ``value_range``.

    scale = (hi - lo) / (2^bits - 1); rounding is half away from zero;
    values are clamped to the grid. ``bits == 32`` returns the input
    unchanged.
    """
    if bits == IDENTITY_BITS:
        return np.asarray(values)
    if bits not in QUANT_BITWIDTHS:
        raise UnknownBitwidth(f"cannot fake-quantize to {bits} bits")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise BadRange(f"need lo < hi, got ({lo}, {hi})")
    arr = np.asarray(values)
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels
    q = np.clip(np.floor((arr - lo) / scale + 0.5), 0, levels)
    # divide last so grid points dequantize to their exact representation
    return (q * (hi - lo) / levels + lo).astype(arr.dtype, copy=False)


@dataclass(frozen=True)
class HistogramStats:
    bins: int
    value_range: tuple[float, float]
    counts: tuple[int, ...]
    total: int
    entropy: float  # bits


def histogram_entropy(values, bins: int, value_range: tuple[float, float]) -> HistogramStats:
    """Empirical entropy over ``bins`` uniform bins spanning ``value_range``.

    Values outside the range clamp into the edge bins. A collapsed range
    (lo == hi) degenerates to a single occupied bin with zero entropy,
    which is what a constant feature map produces.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyValues("cannot build a histogram from no values")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if lo > hi:
        raise BadRange(f"need lo <= hi, got ({lo}, {hi})")
    if lo == hi:
        counts = np.zeros(bins, dtype=np.int64)
        counts[0] = arr.size
    else:
        width = (hi - lo) / bins
        idx = np.floor((arr - lo) / width).astype(np.int64)
        np.clip(idx, 0, bins - 1, out=idx)
        counts = np.bincount(idx, minlength=bins)
    probs = counts[counts > 0] / arr.size
    entropy = float(-(probs * np.log2(probs)).sum())
    return HistogramStats(
        bins=bins,
        value_range=(lo, hi),
        counts=tuple(int(c) for c in counts),
        total=int(arr.size),
        entropy=entropy,
    )


def calibration_range(values) -> tuple[float, float]:
    """Min/max range of a pool, widened to (c, c + 1) when it collapses.

    The widened range keeps fake_quantize exact for constant pools: the
    constant lands on grid point zero.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EmptyValues("cannot derive a range from no values")
    lo = float(arr.min())
    hi = float(arr.max())
    if lo == hi:
        hi = lo + 1.0
    return lo, hi
