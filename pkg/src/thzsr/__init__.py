"""Depth and lateral super-resolution for FMCW terahertz imaging.

Modules: :mod:`core` (types and constants), :mod:`io` (THZ3 volumes,
CSV/PNG), :mod:`phantom` (synthetic scenes), :mod:`preprocess` (padding and
deramp FFT), :mod:`solver` (trust-region least squares), :mod:`fitting`
(per-pixel sinc fits and reconstruction), :mod:`deconv` (Lucy-Richardson and
blind TV deconvolution), :mod:`metrics` and :mod:`cli`.
"""
from .core import (
    AcquisitionConfig, ComplexVolume, DepthMap, Domain, FitGrid, IntensityImage, SincFitParams,
    depth_per_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig", "ComplexVolume", "DepthMap", "Domain", "FitGrid", "IntensityImage",
    "SincFitParams", "depth_per_sample", "__version__",
]
