"""Frequency-domain zero padding and the deramp FFT.

DFT convention: ``U[z] = sum_k u[k] exp(-2j*pi*k*z/D)`` with no ``1/D`` factor,
so Parseval reads ``sum |U|^2 = D * sum |u|^2``.
"""
from __future__ import annotations

import numpy as np
import scipy.fft

from .core import ComplexVolume, Domain, IntensityImage


def _require(vol: ComplexVolume, domain: Domain, what: str) -> None:
    if vol.domain != domain:
        raise ValueError(f"{what} needs a {domain.name.lower()}-domain volume, got {vol.domain.name.lower()}")


def zero_pad(vol: ComplexVolume, n: int) -> ComplexVolume:
    _require(vol, Domain.FREQUENCY, "zero_pad")
    if n < 1:
        raise ValueError(f"pad factor must be >= 1, got {n}")
    if n == 1:
        return vol
    out = np.zeros(vol.shape[:2] + (n * vol.nz,), dtype=np.complex128)
    out[..., : vol.nz] = vol.data
    return ComplexVolume(out, domain=Domain.FREQUENCY, lateral_step=vol.lateral_step)


def deramp_fft_array(samples: np.ndarray, length: int | None = None) -> np.ndarray:
    """Forward DFT along the last axis, zero-padding to ``length`` if given."""
    return scipy.fft.fft(samples, n=length, axis=-1, workers=1)


def deramp_fft(vol: ComplexVolume) -> ComplexVolume:
    _require(vol, Domain.FREQUENCY, "deramp_fft")
    return ComplexVolume(deramp_fft_array(vol.data), domain=Domain.SPATIAL,
                         lateral_step=vol.lateral_step)


def mean_magnitude_profile(vol: ComplexVolume) -> np.ndarray:
    """Average of |u(x, y)[z]| over all pixels, as a function of z."""
    _require(vol, Domain.SPATIAL, "mean_magnitude_profile")
    return np.abs(vol.data).reshape(-1, vol.nz).mean(axis=0)


def reference_intensity(vol: ComplexVolume) -> tuple[IntensityImage, int]:
    """Intensity of the z-slice with the largest mean magnitude.

    Ties resolve to the lowest z index (``np.argmax`` semantics).
    """
    z_mean = int(np.argmax(mean_magnitude_profile(vol)))
    sl = vol.data[:, :, z_mean]
    return IntensityImage((sl * np.conj(sl)).real), z_mean
