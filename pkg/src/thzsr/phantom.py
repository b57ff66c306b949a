"""Synthetic FMCW beat-signal volumes for scenes with known ground truth.

Forward model per pixel and frequency bin ``k``::

    u[k] = (h * a_k)(x, y) + noise,   a_k = r(x, y) exp(+2j pi f_k tau(x, y))

with ``tau = 2 (z_ref + depth) / c`` and ``h`` a unit-sum Gaussian applied
laterally to every bin. ``z_ref`` puts the zero plane at one third of the
unambiguous range. With the unnormalised forward DFT used by
:mod:`thzsr.preprocess`, a reflector lands at padded bin ``D * df * tau``
(mod ``D``) so larger depths map to larger bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .core import AcquisitionConfig, ComplexVolume, Domain, DEFAULT_PSF_FWHM_UM

# adjacent-step ground truth of the metal step chart, um
STEPCHART_STEPS_UM = (4009.0, 2987.0, 2006.0, 1004.0, 903.0, 803.0, 703.0,
                      600.0, 472.0, 410.0, 298.0, 208.0, 91.0, 42.0)

METAL = 1.0
SUBSTRATE = 0.2
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class Band:
    """Vertical stripe of constant depth, columns ``[x0, x1)``."""

    x0: int
    x1: int
    depth: float


@dataclass(frozen=True)
class BarGroup:
    """Three-bar group; extents in pixel units (pixel i covers [i, i+1)).

    ``orientation="vertical"`` bars vary along x and measure horizontal
    resolution; ``"horizontal"`` bars vary along y.
    """

    orientation: str
    period_um: float
    x0: float
    x1: float
    y0: float
    y1: float


@dataclass
class SceneSpec:
    nx: int
    ny: int
    reflectivity: np.ndarray
    depth: np.ndarray
    psf_fwhm: float = DEFAULT_PSF_FWHM_UM
    snr_db: float | None = None
    rng_seed: int = 0
    kind: str = "custom"
    bands: list[Band] = field(default_factory=list)
    groups: list[BarGroup] = field(default_factory=list)
    homogeneous_rows: tuple[int, int] | None = None
    homogeneous_cols: tuple[int, int] | None = None

    def __post_init__(self):
        self.reflectivity = np.asarray(self.reflectivity, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        if self.reflectivity.shape != (self.ny, self.nx) or self.depth.shape != (self.ny, self.nx):
            raise ValueError("reflectivity and depth must have shape (ny, nx)")
        if np.any(self.reflectivity < 0) or np.any(self.reflectivity > 1):
            raise ValueError("reflectivity must lie in [0, 1]")
        if not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite")
        if not self.psf_fwhm > 0:
            raise ValueError("psf_fwhm must be positive")

    def with_noise(self, snr_db: float | None, seed: int | None = None) -> "SceneSpec":
        from dataclasses import replace

        return replace(self, snr_db=snr_db, rng_seed=self.rng_seed if seed is None else seed)


# -- scenes -------------------------------------------------------------------

def make_step_scene(cfg: AcquisitionConfig, steps, nx: int = 144, ny: int = 28,
                    psf_fwhm: float = DEFAULT_PSF_FWHM_UM, snr_db: float | None = None,
                    seed: int = 0) -> SceneSpec:
    """Step chart: a zero-reference band followed by one band per step.

    ``steps`` are the depth increments between adjacent bands, so band ``i``
    sits at ``sum(steps[:i])``. Spare columns widen the reference band.
    """
    steps = [float(s) for s in steps]
    if not steps:
        raise ValueError("need at least one step")
    n_bands = len(steps) + 1
    width = nx // n_bands
    if width < 1:
        raise ValueError(f"{n_bands} bands do not fit into nx={nx}")
    ref_width = nx - width * (n_bands - 1)
    edges = [0, ref_width] + [ref_width + width * i for i in range(1, n_bands)]
    levels = np.concatenate([[0.0], np.cumsum(steps)])
    bands = [Band(edges[i], edges[i + 1], float(levels[i])) for i in range(n_bands)]
    depth = np.zeros((ny, nx))
    for b in bands:
        depth[:, b.x0:b.x1] = b.depth
    return SceneSpec(nx, ny, np.ones((ny, nx)), depth, psf_fwhm, snr_db, seed,
                     kind="step", bands=bands)


def _coverage(nx: int, ny: int, rects) -> np.ndarray:
    """Exact area fraction of each pixel covered by axis-aligned rectangles."""
    xs = np.arange(nx, dtype=float)
    ys = np.arange(ny, dtype=float)
    cov = np.zeros((ny, nx))
    for x0, x1, y0, y1 in rects:
        ox = np.clip(np.minimum(xs + 1, x1) - np.maximum(xs, x0), 0, None)
        oy = np.clip(np.minimum(ys + 1, y1) - np.maximum(ys, y0), 0, None)
        cov += np.outer(oy, ox)
    return np.clip(cov, 0.0, 1.0)


def _bar_rects(group: BarGroup, lateral_step: float):
    p = group.period_um / lateral_step
    w = p / 2.0
    rects = []
    for i in range(3):
        if group.orientation == "vertical":
            a = group.x0 + i * p
            rects.append((a, a + w, group.y0, group.y1))
        else:
            a = group.y0 + i * p
            rects.append((group.x0, group.x1, a, a + w))
    return rects


def make_usaf_scene(cfg: AcquisitionConfig, bar_periods, nx: int = 64, ny: int = 64,
                    band_rows: int = 18, tilt_um: float = 150.0, roughness_um: float = 0.0,
                    psf_fwhm: float = DEFAULT_PSF_FWHM_UM, snr_db: float | None = None,
                    seed: int = 0, gap_px: int = 4) -> SceneSpec:
    """Bar chart (metal 1.0 on substrate 0.2) plus a tilted homogeneous metal band.

    For each period a vertical and a horizontal three-bar group is drawn,
    bar width half the period and bar length 2.5 periods, anti-aliased by
    exact area coverage. The band occupies the bottom of the chart; its
    depth ramps linearly along x by ``tilt_um``. ``roughness_um`` adds i.i.d.
    Gaussian height jitter to every pixel (0 keeps the chart flat).
    """
    periods = sorted((float(p) for p in bar_periods), reverse=True)
    for p in periods:
        if p < 2.0 * cfg.lateral_step - 1e-9:
            raise ValueError(f"bar period {p} um is below the sampling limit {2 * cfg.lateral_step} um")
    margin = gap_px
    band_total = band_rows + 2 * margin
    chart_bottom = ny - band_total - margin
    groups: list[BarGroup] = []
    cx, cy, shelf_h = float(margin), float(margin), 0.0
    for p in periods:
        size = 2.5 * p / cfg.lateral_step
        for orient in ("vertical", "horizontal"):
            if cx + size > nx - margin:
                cx, cy, shelf_h = float(margin), cy + shelf_h + gap_px, 0.0
            if cy + size > chart_bottom:
                raise ValueError(f"bar chart does not fit into {nx}x{ny}")
            groups.append(BarGroup(orient, p, cx, cx + size, cy, cy + size))
            cx += size + gap_px
            shelf_h = max(shelf_h, size)

    rects = [r for g in groups for r in _bar_rects(g, cfg.lateral_step)]
    band_y0 = ny - band_total
    rects.append((0.0, float(nx), float(band_y0), float(ny - margin)))
    cov = _coverage(nx, ny, rects)
    refl = SUBSTRATE + (METAL - SUBSTRATE) * cov

    depth = np.zeros((ny, nx))
    ramp = np.linspace(0.0, tilt_um, nx)
    depth[band_y0:ny - margin, :] = ramp[None, :]
    if roughness_um > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        depth += rng.normal(0.0, roughness_um, size=depth.shape)
    rows = (band_y0 + margin, band_y0 + margin + band_rows)
    return SceneSpec(nx, ny, refl, depth, psf_fwhm, snr_db, seed, kind="usaf",
                     groups=groups, homogeneous_rows=rows, homogeneous_cols=(margin, nx - margin))


def make_textured_scene(cfg: AcquisitionConfig, nx: int = 64, ny: int = 64, ripple: float = 0.1,
                        period_px: float = 3.0, base: float = 0.5,
                        psf_fwhm: float = DEFAULT_PSF_FWHM_UM, snr_db: float | None = None,
                        seed: int = 0) -> SceneSpec:
    """Flat board with a weak periodic reflectivity ripple (woven-fibre stand-in)."""
    x = np.arange(nx)
    y = np.arange(ny)
    pattern = 0.5 * (np.sin(2 * np.pi * x / period_px)[None, :] + np.sin(2 * np.pi * y / period_px)[:, None])
    refl = np.clip(base * (1.0 + ripple * pattern), 0.0, 1.0)
    return SceneSpec(nx, ny, refl, np.zeros((ny, nx)), psf_fwhm, snr_db, seed, kind="textured")


# -- forward model -----------------------------------------------------------------

def reference_distance(cfg: AcquisitionConfig) -> float:
    """Stand-off (m) placing depth 0 at bin D/3."""
    return cfg.speed_of_light / (6.0 * cfg.freq_step)


def depth_to_bin(depth_um, cfg: AcquisitionConfig):
    """Padded bin of a noiseless reflector at ``depth_um``."""
    tau = 2.0 * (reference_distance(cfg) + np.asarray(depth_um) * 1e-6) / cfg.speed_of_light
    D = cfg.padded_length
    return np.mod(D * cfg.freq_step * tau, D)


def gaussian_psf_1d(fwhm_px: float) -> np.ndarray:
    sigma = fwhm_px * FWHM_TO_SIGMA
    radius = int(np.ceil(4.0 * sigma))
    if radius == 0:
        return np.ones(1)
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def pixel_rng(seed: int, x: int, y: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(x), int(y)]))


def synthesize(scene: SceneSpec, cfg: AcquisitionConfig, freq_chunk: int = 256) -> ComplexVolume:
    """Frequency-domain beat-signal volume for ``scene``."""
    f = cfg.frequencies()
    tau = 2.0 * (reference_distance(cfg) + scene.depth * 1e-6) / cfg.speed_of_light
    kernel = gaussian_psf_1d(scene.psf_fwhm / cfg.lateral_step)
    out = np.empty((scene.ny, scene.nx, cfg.n_freq), dtype=np.complex128)
    for lo in range(0, cfg.n_freq, freq_chunk):
        fk = f[lo:lo + freq_chunk]
        field_ = scene.reflectivity[..., None] * np.exp(2j * np.pi * tau[..., None] * fk)
        if kernel.size > 1:
            re = convolve1d(convolve1d(field_.real, kernel, axis=0, mode="reflect"),
                            kernel, axis=1, mode="reflect")
            im = convolve1d(convolve1d(field_.imag, kernel, axis=0, mode="reflect"),
                            kernel, axis=1, mode="reflect")
            field_ = re + 1j * im
        out[..., lo:lo + freq_chunk] = field_

    if scene.snr_db is not None and np.isfinite(scene.snr_db):
        std = np.max(np.abs(scene.reflectivity)) * 10.0 ** (-scene.snr_db / 20.0) / np.sqrt(2.0)
        for y in range(scene.ny):
            for x in range(scene.nx):
                w = pixel_rng(scene.rng_seed, x, y).standard_normal(2 * cfg.n_freq)
                out[y, x] += std * (w[: cfg.n_freq] + 1j * w[cfg.n_freq:])
    return ComplexVolume(out, domain=Domain.FREQUENCY, lateral_step=cfg.lateral_step)


def ground_truth_rows(scene: SceneSpec) -> list[dict]:
    rows = []
    for y in range(scene.ny):
        for x in range(scene.nx):
            rows.append({"x": x, "y": y, "depth_um": float(scene.depth[y, x]),
                         "reflectivity": float(scene.reflectivity[y, x])})
    return rows
