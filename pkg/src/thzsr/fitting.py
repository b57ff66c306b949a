"""Per-pixel modulated-sinc curve fitting along z.

Model for one pixel (z in padded samples)::

    v(z) = A * sinc(sigma * (z - mu)) * exp(-1j * (omega * z - phi))

The pipeline per pixel is: locate the magnitude peak and the fitting window,
fit ``A |sinc|`` to the magnitude, initialise the phase in closed form, then
fit the complex model with ``omega`` held fixed.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    AcquisitionConfig, ComplexVolume, DepthMap, Domain, FitGrid, IntensityImage,
    SincFitParams, DEFAULT_TAU_F, wrap_phase,
)
from .preprocess import deramp_fft_array
from .solver import LeastSquaresProblem, solve

log = logging.getLogger(__name__)

N_PARAMS = 4
MIN_WINDOW = 4 * N_PARAMS
CHUNK_PIXELS = 256
SERIES_LIMIT = 1e-4

_SOLVER_DEFAULTS = dict(max_iter=200, gtol=1e-10, xtol=1e-10, ftol=1e-10)


def sinc_and_derivative(t):
    """Normalised sinc and its derivative, series-expanded near t = 0."""
    t = np.asarray(t, dtype=float)
    pt = np.pi * t
    small = np.abs(pt) < SERIES_LIMIT
    safe_t = np.where(small, 1.0, t)
    safe_pt = np.pi * safe_t
    s_big = np.sin(safe_pt) / safe_pt
    ds_big = (np.cos(safe_pt) - s_big) / safe_t
    pt2 = pt * pt
    s_small = 1.0 - pt2 / 6.0 + pt2 * pt2 / 120.0
    ds_small = np.pi * (-pt / 3.0 + pt * pt2 / 30.0)
    return np.where(small, s_small, s_big), np.where(small, ds_small, ds_big)


def sinc_model(params, z, omega):
    amp, mu, sigma, phi = params
    s, _ = sinc_and_derivative(sigma * (np.asarray(z, float) - mu))
    return amp * s * np.exp(-1j * (omega * np.asarray(z, float) - phi))


# -- residuals and Jacobians ----------------------------------------------

def complex_residual(params, z, data, omega):
    diff = data - sinc_model(params, z, omega)
    return np.concatenate([diff.real, diff.imag])


def complex_jacobian(params, z, data, omega):
    amp, mu, sigma, phi = params
    dz = z - mu
    s, ds = sinc_and_derivative(sigma * dz)
    carrier = np.exp(-1j * (omega * z - phi))
    dv = np.stack([
        s * carrier,
        -amp * sigma * ds * carrier,
        amp * dz * ds * carrier,
        1j * amp * s * carrier,
    ], axis=1)
    return -np.concatenate([dv.real, dv.imag])


def magnitude_residual(params, z, mag):
    amp, mu, sigma = params
    s, _ = sinc_and_derivative(sigma * (z - mu))
    return mag - amp * np.abs(s)


def magnitude_jacobian(params, z, mag):
    amp, mu, sigma = params
    dz = z - mu
    s, ds = sinc_and_derivative(sigma * dz)
    sign = np.sign(s)
    return -np.stack([np.abs(s), -amp * sigma * sign * ds, amp * dz * sign * ds], axis=1)


# -- window ----------------------------------------------------------------

@dataclass(frozen=True)
class FitWindow:
    z_max: int
    tau_f: int
    start: int
    stop: int  # exclusive
    valid: bool = True

    @property
    def length(self) -> int:
        return self.stop - self.start

    @property
    def z(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=float)

    def take(self, signal: np.ndarray) -> np.ndarray:
        return signal[self.start:self.stop]


def locate_window(signal, tau_f: int = DEFAULT_TAU_F) -> FitWindow:
    """Window ``[z_max - tau_f, z_max + tau_f]`` around the magnitude peak.

    The window is clamped to the signal. A window cut below ``MIN_WINDOW``
    samples by clamping, or an all-zero signal, is marked invalid.
    """
    signal = np.asarray(signal)
    if signal.size == 0:
        raise ValueError("empty signal")
    if tau_f < 0:
        raise ValueError("tau_f must be non-negative")
    mag = np.abs(signal)
    z_max = int(np.argmax(mag))
    start = max(z_max - tau_f, 0)
    stop = min(z_max + tau_f + 1, signal.size)
    full = 2 * tau_f + 1
    valid = bool(mag[z_max] > 0) and (stop - start == full or stop - start >= MIN_WINDOW)
    return FitWindow(z_max, tau_f, start, stop, valid)


# -- the three fitting stages ------------------------------------------------

class MagnitudeFit(NamedTuple):
    amplitude: float
    mu: float
    sigma: float
    converged: bool


def fit_magnitude(segment, window: FitWindow, sigma0: float = 1.0 / 9, **solver_opts) -> MagnitudeFit:
    """Fit ``A |sinc(sigma (z - mu))|`` to the window magnitude.

    Starts from the peak magnitude, the peak index and ``sigma0`` (the
    main-lobe width for the padding factor). Falls back to those guesses
    when the solver fails.
    """
    mag = np.abs(np.asarray(segment))
    z = window.z
    x0 = np.array([mag[window.z_max - window.start], float(window.z_max), sigma0])
    prob = LeastSquaresProblem(
        lambda p: magnitude_residual(p, z, mag),
        lambda p: magnitude_jacobian(p, z, mag),
        lower=np.array([0.0, -np.inf, 1e-9]),
        upper=np.array([np.inf, np.inf, 1.0]),
    )
    rep = solve(prob, x0, **{**_SOLVER_DEFAULTS, **solver_opts})
    if not rep.success:
        return MagnitudeFit(*x0, False)
    return MagnitudeFit(float(rep.x[0]), float(rep.x[1]), float(rep.x[2]), True)


def phase_resultant(segment, window: FitWindow, omega: float) -> complex:
    ang = np.angle(np.asarray(segment))
    return complex(np.sum(np.exp(1j * (omega * window.z + ang))))


def init_phase(segment, window: FitWindow, omega: float) -> float:
    """Closed-form phase start: ``atan2(sum sin(wz + arg u), sum cos(wz + arg u))``.

    Returns 0 when the resultant vanishes (< 1e-12).
    """
    res = phase_resultant(segment, window, omega)
    if abs(res) < 1e-12:
        return 0.0
    return float(wrap_phase(np.arctan2(res.imag, res.real)))


def window_rmse(params, segment, window: FitWindow, omega: float) -> float:
    diff = np.asarray(segment) - sinc_model(params, window.z, omega)
    return float(np.sqrt(np.sum(np.abs(diff) ** 2) / window.length))


def fit_complex(segment, window: FitWindow, init, omega: float, **solver_opts) -> SincFitParams:
    """Fit the complex model from ``init = (A_m, mu_m, sigma_m, phi_m)``."""
    data = np.asarray(segment, dtype=complex)
    z = window.z
    x0 = np.asarray(init, dtype=float)
    prob = LeastSquaresProblem(
        lambda p: complex_residual(p, z, data, omega),
        lambda p: complex_jacobian(p, z, data, omega),
        lower=np.array([0.0, -np.inf, 1e-9, -np.inf]),
        upper=np.array([np.inf, np.inf, 1.0, np.inf]),
    )
    rep = solve(prob, x0, **{**_SOLVER_DEFAULTS, **solver_opts})
    x = rep.x if rep.success else x0
    r = complex_residual(x, z, data, omega)
    return SincFitParams(
        amplitude=float(x[0]), mu=float(x[1]), sigma=float(x[2]), phi=float(x[3]),
        rmse=float(np.sqrt(np.sum(r * r) / window.length)),
        converged=bool(rep.success), iterations=rep.iterations,
        z_max=window.z_max, cost=float(0.5 * r @ r),
    )


def invalid_params(z_max: int = -1) -> SincFitParams:
    nan = float("nan")
    return SincFitParams(nan, nan, nan, nan, rmse=nan, converged=False, valid=False, z_max=z_max)


def fit_pixel(signal, omega: float, tau_f: int = DEFAULT_TAU_F, sigma0: float = 1.0 / 9,
              **solver_opts) -> SincFitParams:
    """Full single-pixel pipeline on a spatial-domain profile."""
    window = locate_window(signal, tau_f)
    if not window.valid:
        return invalid_params(window.z_max)
    return fit_segment(window.take(np.asarray(signal)), window, omega, sigma0, **solver_opts)


def fit_segment(segment, window: FitWindow, omega: float, sigma0: float, **solver_opts) -> SincFitParams:
    mag = fit_magnitude(segment, window, sigma0, **solver_opts)
    phi = init_phase(segment, window, omega)
    # The phase start uses angles only, so side lobes (where the sinc is
    # negative) can pull it half a turn away; the sign of the magnitude-fit
    # sinc decides between phi and phi + pi.
    data = np.asarray(segment, dtype=complex)
    starts = [(mag.amplitude, mag.mu, mag.sigma, p) for p in (phi, float(wrap_phase(phi + np.pi)))]
    costs = [np.sum(np.abs(data - sinc_model(x, window.z, omega)) ** 2) for x in starts]
    return fit_complex(segment, window, starts[int(np.argmin(costs))], omega, **solver_opts)


# -- whole volumes -------------------------------------------------------------

def _fit_chunk(segments, windows, omega, sigma0, solver_opts):
    out = []
    for seg, win in zip(segments, windows):
        out.append(fit_segment(seg, win, omega, sigma0, **solver_opts) if win.valid
                   else invalid_params(win.z_max))
    return out


def _default_workers(workers):
    if workers is None:
        return os.cpu_count() or 1
    return max(1, int(workers))


class _Batch(NamedTuple):
    flat: np.ndarray  # flat pixel indices y * nx + x
    segments: list
    windows: list


def _windows_for(profiles: np.ndarray, tau_f: int):
    windows = [locate_window(p, tau_f) for p in profiles]
    segments = [w.take(p).copy() for w, p in zip(windows, profiles)]
    return segments, windows


def _run_batches(batches, grid: FitGrid, nx: int, omega, sigma0, workers, solver_opts):
    workers = _default_workers(workers)
    if workers == 1 or len(batches) == 1:
        results = [_fit_chunk(b.segments, b.windows, omega, sigma0, solver_opts) for b in batches]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_fit_chunk, b.segments, b.windows, omega, sigma0, solver_opts)
                    for b in batches]
            results = [f.result() for f in futs]
    for b, res in zip(batches, results):
        for idx, p in zip(b.flat, res):
            grid[divmod(int(idx), nx)] = p
    return grid


def fit_volume(vol: ComplexVolume, cfg: AcquisitionConfig, tau_f: int = DEFAULT_TAU_F,
               workers: int | None = None, omega: float | None = None, **solver_opts) -> FitGrid:
    """Fit every pixel of a spatial-domain volume.

    Pixels are processed in fixed-size chunks, so results do not depend on
    the worker count.
    """
    if vol.domain != Domain.SPATIAL:
        raise ValueError("fit_volume needs a spatial-domain volume")
    omega = cfg.omega if omega is None else omega
    sigma0 = 1.0 / cfg.pad_factor
    profiles = vol.data.reshape(-1, vol.nz)
    batches = []
    for lo in range(0, profiles.shape[0], CHUNK_PIXELS):
        idx = np.arange(lo, min(lo + CHUNK_PIXELS, profiles.shape[0]))
        segs, wins = _windows_for(profiles[idx], tau_f)
        batches.append(_Batch(idx, segs, wins))
    grid = FitGrid.empty(vol.ny, vol.nx, tau_f)
    return _run_batches(batches, grid, vol.nx, omega, sigma0, workers, solver_opts)


@dataclass
class CurveFitResult:
    grid: FitGrid
    reference: IntensityImage
    z_mean: int
    mean_profile: np.ndarray
    omega: float


def fit_frequency_volume(vol: ComplexVolume, cfg: AcquisitionConfig, tau_f: int = DEFAULT_TAU_F,
                         workers: int | None = None, omega: float | str | None = None,
                         **solver_opts) -> CurveFitResult:
    """Zero-pad, transform and fit a frequency-domain volume chunk by chunk.

    Equivalent to ``fit_volume(deramp_fft(zero_pad(vol)))`` plus
    ``reference_intensity``, without holding the padded spatial volume in
    memory. ``omega="auto"`` estimates the carrier from the brightest pixels.
    """
    if vol.domain != Domain.FREQUENCY:
        raise ValueError("fit_frequency_volume needs a frequency-domain volume")
    D = cfg.pad_factor * vol.nz
    profiles = vol.data.reshape(-1, vol.nz)
    npix = profiles.shape[0]
    mag_sum = np.zeros(D)
    batches = []
    peaks = np.empty(npix)
    for lo in range(0, npix, CHUNK_PIXELS):
        idx = np.arange(lo, min(lo + CHUNK_PIXELS, npix))
        spatial = deramp_fft_array(profiles[idx], D)
        mag = np.abs(spatial)
        mag_sum += mag.sum(axis=0)
        peaks[idx] = mag.max(axis=1)
        segs, wins = _windows_for(spatial, tau_f)
        batches.append(_Batch(idx, segs, wins))
    mean_profile = mag_sum / npix
    z_mean = int(np.argmax(mean_profile))

    if isinstance(omega, str):
        if omega != "auto":
            raise ValueError(f"omega must be a number or 'auto', got {omega!r}")
        order = np.argsort(-peaks, kind="stable")[: max(10, min(64, npix))]
        sample = deramp_fft_array(profiles[np.sort(order)], D)
        omega = estimate_carrier_omega(sample)
        log.info("estimated carrier omega = %.6f rad/sample", omega)
    elif omega is None:
        omega = cfg.omega

    ref = np.empty(npix)
    for lo in range(0, npix, CHUNK_PIXELS):
        sl = deramp_fft_array(profiles[lo:lo + CHUNK_PIXELS], D)[:, z_mean]
        ref[lo:lo + CHUNK_PIXELS] = (sl * np.conj(sl)).real

    grid = FitGrid.empty(vol.ny, vol.nx, tau_f)
    grid = _run_batches(batches, grid, vol.nx, omega, 1.0 / cfg.pad_factor, workers, solver_opts)
    return CurveFitResult(grid, IntensityImage(ref.reshape(vol.ny, vol.nx)), z_mean,
                          mean_profile, float(omega))


# -- reconstruction --------------------------------------------------------

def reconstruct_intensity(grid: FitGrid) -> IntensityImage:
    """``I_v = A^2``; invalid pixels are 0 and excluded by the mask."""
    ok = grid.valid & np.isfinite(grid.amplitude)
    vals = np.where(ok, np.nan_to_num(grid.amplitude) ** 2, 0.0)
    return IntensityImage(vals, mask=ok)


def estimate_reference_zero(grid: FitGrid, region) -> float:
    """Median fitted mu over ``region`` (a ``(slice_y, slice_x)`` tuple or boolean mask)."""
    mu = grid.mu[region]
    ok = grid.valid[region] & np.isfinite(mu)
    if not np.any(ok):
        raise ValueError("reference region has no valid pixels")
    return float(np.median(mu[ok]))


def reconstruct_depth(grid: FitGrid, z0: float, cfg: AcquisitionConfig, method: str = "mu") -> DepthMap:
    """Depth in um: ``(position - z0) / N * delta_d``.

    ``method="mu"`` uses the fitted centre, ``"max"`` the peak sample index.
    """
    if method == "mu":
        pos = grid.mu
    elif method == "max":
        pos = grid.z_max.astype(float)
    else:
        raise ValueError(f"unknown depth method {method!r}")
    valid = grid.valid & np.isfinite(pos)
    return DepthMap((pos - z0) / cfg.pad_factor * cfg.delta_d, valid)


def main_lobe(mag: np.ndarray) -> tuple[int, int]:
    """Contiguous half-maximum span around the peak, as ``[lo, hi)``."""
    k = int(np.argmax(mag))
    half = 0.5 * mag[k]
    lo = k
    while lo > 0 and mag[lo - 1] >= half:
        lo -= 1
    hi = k + 1
    while hi < mag.size and mag[hi] >= half:
        hi += 1
    return lo, hi


def estimate_carrier_omega(profiles) -> float:
    """Median negative phase slope across the half-maximum main lobe.

    ``profiles`` is an ``(n, nz)`` array of spatial-domain pixel signals, or a
    spatial :class:`ComplexVolume` (all pixels used).
    """
    if isinstance(profiles, ComplexVolume):
        profiles = profiles.data.reshape(-1, profiles.nz)
    profiles = np.atleast_2d(np.asarray(profiles))
    slopes = []
    for p in profiles:
        lo, hi = main_lobe(np.abs(p))
        if hi - lo < 2:
            continue
        z = np.arange(lo, hi, dtype=float)
        ph = np.unwrap(np.angle(p[lo:hi]))
        slopes.append(np.polyfit(z, ph, 1)[0])
    if not slopes:
        raise ValueError("no pixel has a main lobe wide enough to estimate a slope")
    return float(-np.median(slopes))
