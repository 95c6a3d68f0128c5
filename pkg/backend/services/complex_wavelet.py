"""Separable complex Daubechies wavelet transform.

Symmetric, length-6 complex Daubechies filters with three vanishing moments.
The filter bank is orthonormal, so synthesis is the adjoint of analysis and
reconstruction is exact up to rounding. The periodic transform runs on a
symmetrically extended image: the margin is wide enough that coefficients
touching the wrap-around never reach the original pixels, so opposite borders
do not mix.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import ConfigError, DimensionMismatchError

logger = logging.getLogger(__name__)

_SQRT15 = np.sqrt(15.0)

LOWPASS = np.array([
    -3 - 1j * _SQRT15,
    5 - 1j * _SQRT15,
    30 + 2j * _SQRT15,
    30 + 2j * _SQRT15,
    5 - 1j * _SQRT15,
    -3 - 1j * _SQRT15,
]) / (32 * np.sqrt(2.0))

HIGHPASS = np.array([(-1) ** k * np.conj(LOWPASS[len(LOWPASS) - 1 - k]) for k in range(len(LOWPASS))])

SUBBANDS = ("LH", "HL", "HH")


@dataclass
class WaveletCoefficients:
    """Multilevel decomposition; ``details[0]`` is the finest level"""

    approximation: np.ndarray
    details: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]
    original_shape: Tuple[int, ...]
    offset: Tuple[int, int] = (0, 0)

    @property
    def levels(self) -> int:
        return len(self.details)

    def bands(self) -> List[np.ndarray]:
        """Detail subbands flattened level by level, then the approximation"""
        return [band for level in self.details for band in level] + [self.approximation]

    def with_bands(self, bands: List[np.ndarray]) -> "WaveletCoefficients":
        details = [tuple(bands[3 * i:3 * i + 3]) for i in range(self.levels)]
        return WaveletCoefficients(
            approximation=bands[-1], details=details, original_shape=self.original_shape,
            offset=self.offset,
        )


def _analyze(x: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Periodic correlation with the conjugated filters, keeping even outputs"""
    x = np.moveaxis(x, axis, 0)
    phases = (x[0::2], x[1::2])
    low = np.zeros(phases[0].shape, dtype=np.complex128)
    high = np.zeros_like(low)
    for k in range(len(LOWPASS)):
        shifted = np.roll(phases[k % 2], -(k // 2), axis=0)
        low += np.conj(LOWPASS[k]) * shifted
        high += np.conj(HIGHPASS[k]) * shifted
    return np.moveaxis(low, 0, axis), np.moveaxis(high, 0, axis)


def _synthesize(low: np.ndarray, high: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of _analyze, assembled from its even and odd output phases"""
    low = np.moveaxis(low, axis, 0)
    high = np.moveaxis(high, axis, 0)
    phases = [np.zeros(low.shape, dtype=np.complex128) for _ in range(2)]
    for j in range(len(LOWPASS) // 2):
        low_j = np.roll(low, j, axis=0)
        high_j = np.roll(high, j, axis=0)
        for parity in (0, 1):
            k = 2 * j + parity
            phases[parity] += LOWPASS[k] * low_j + HIGHPASS[k] * high_j
    out = np.empty((2 * low.shape[0],) + low.shape[1:], dtype=np.complex128)
    out[0::2], out[1::2] = phases
    return np.moveaxis(out, 0, axis)


def analyze_2d(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One separable level over axes (0, 1): (LL, LH, HL, HH)"""
    low, high = _analyze(image, axis=1)
    ll, lh = _analyze(low, axis=0)
    hl, hh = _analyze(high, axis=0)
    return ll, lh, hl, hh


def synthesize_2d(ll: np.ndarray, lh: np.ndarray, hl: np.ndarray, hh: np.ndarray) -> np.ndarray:
    low = _synthesize(ll, lh, axis=0)
    high = _synthesize(hl, hh, axis=0)
    return _synthesize(low, high, axis=1)


def boundary_margin(levels: int) -> int:
    """Symmetric extension per side: twice the analysis reach of ``levels`` levels"""
    return 2 * (len(LOWPASS) - 1) * (2 ** levels - 1)


def cdw_forward(image: np.ndarray, levels: int) -> WaveletCoefficients:
    """Multilevel transform over the first two axes; trailing axes are channels"""
    if levels <= 0:
        raise ConfigError(f"Wavelet levels must be positive, got {levels}")
    image = np.asarray(image, dtype=np.float64)
    block = 2 ** levels
    margin = boundary_margin(levels)
    height, width = image.shape[:2]
    pad = [
        (margin, margin + (-(height + 2 * margin)) % block),
        (margin, margin + (-(width + 2 * margin)) % block),
    ] + [(0, 0)] * (image.ndim - 2)
    image = np.pad(image, pad, mode="symmetric")

    details = []
    approximation = image
    for _ in range(levels):
        approximation, lh, hl, hh = analyze_2d(approximation)
        details.append((lh, hl, hh))
    return WaveletCoefficients(
        approximation=approximation,
        details=details,
        original_shape=(height, width),
        offset=(margin, margin),
    )


def cdw_inverse(coefficients: WaveletCoefficients) -> np.ndarray:
    """Real-valued reconstruction with the extension stripped"""
    image = coefficients.approximation
    for lh, hl, hh in reversed(coefficients.details):
        if lh.shape != image.shape:
            raise DimensionMismatchError(f"Inconsistent subband shapes {image.shape} and {lh.shape}")
        image = synthesize_2d(image, lh, hl, hh)
    height, width = coefficients.original_shape
    top, left = coefficients.offset
    return np.ascontiguousarray(image.real[top:top + height, left:left + width])
