"""Evaluation: fit RMSE, depth-step tables, bar-chart contrast/MTF, homogeneity.

Conventions: variances are population variances (1/n); intensity
differences are ``10 log10(max / min)`` because intensities are power
quantities.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import AcquisitionConfig, ComplexVolume, DepthMap, Domain, FitGrid
from .fitting import fit_frequency_volume, fit_volume, sinc_model
from .phantom import BarGroup, SceneSpec

RESOLVABLE_ERROR = 0.10
RESOLUTION_DB = 3.0
TRIM_FRACTION = 0.10

DEPTH_TABLE_COLUMNS = ["depth_gt_um", "depth_max_um", "depth_mu_um",
                       "error_max_pct", "error_mu_pct", "resolvable_max", "resolvable_mu"]
CONTRAST_COLUMNS = ["orientation", "period_um", "line_width_um", "lp_per_mm",
                    "intensity_diff_db", "mtf", "n_sections"]
SWEEP_COLUMNS = ["tau_f", "mean_rmse", "max_rmse", "seconds"]


def _values(img):
    return np.asarray(getattr(img, "values", img), dtype=float)


# -- fit quality ------------------------------------------------------------

def fit_rmse_map(vol: ComplexVolume, grid: FitGrid, cfg: AcquisitionConfig, tau_f: int | None = None,
                 omega: float | None = None):
    """Per-pixel window RMSE between data and fitted model, with mean and max.

    Returns ``(rmse_map, mean, max)``; invalid pixels are NaN and ignored by
    the aggregates.
    """
    if vol.domain != Domain.SPATIAL:
        raise ValueError("fit_rmse_map needs a spatial-domain volume")
    tau_f = grid.tau_f if tau_f is None else tau_f
    omega = cfg.omega if omega is None else omega
    out = np.full(grid.shape, np.nan)
    for y in range(vol.ny):
        for x in range(vol.nx):
            if not grid.valid[y, x]:
                continue
            zm = int(grid.z_max[y, x])
            lo, hi = max(zm - tau_f, 0), min(zm + tau_f + 1, vol.nz)
            z = np.arange(lo, hi, dtype=float)
            p = (grid.amplitude[y, x], grid.mu[y, x], grid.sigma[y, x], grid.phi[y, x])
            diff = vol.data[y, x, lo:hi] - sinc_model(p, z, omega)
            out[y, x] = np.sqrt(np.sum(np.abs(diff) ** 2) / (hi - lo))
    mean, mx = rmse_summary(out)
    return out, mean, mx


def rmse_summary(rmse_map) -> tuple[float, float]:
    vals = np.asarray(rmse_map)[np.isfinite(rmse_map)]
    if vals.size == 0:
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.max())


def window_sweep(vol: ComplexVolume, cfg: AcquisitionConfig, taus, workers=None) -> list[dict]:
    """Fit the volume once per half-width and tabulate mean/max RMSE."""
    rows = []
    for tau in taus:
        t0 = time.perf_counter()
        if vol.domain == Domain.SPATIAL:
            grid = fit_volume(vol, cfg, int(tau), workers=workers)
        else:
            grid = fit_frequency_volume(vol, cfg, int(tau), workers=workers).grid
        mean, mx = rmse_summary(np.where(grid.valid, grid.rmse, np.nan))
        rows.append({"tau_f": int(tau), "mean_rmse": mean, "max_rmse": mx,
                     "seconds": time.perf_counter() - t0})
    return rows


# -- depth -------------------------------------------------------------------

def band_region(band, ny: int, region: int = 10, margin: int = 2):
    """Central ``region x region`` block of a band, shrunk to keep ``margin``
    columns away from its edges."""
    width = band.x1 - band.x0
    nc = max(1, min(region, width - 2 * margin))
    c0 = band.x0 + (width - nc) // 2
    nr = min(region, ny)
    r0 = (ny - nr) // 2
    return slice(r0, r0 + nr), slice(c0, c0 + nc)


def band_means(depth: DepthMap, scene: SceneSpec, region: int = 10) -> np.ndarray:
    out = []
    for b in scene.bands:
        sl = band_region(b, scene.ny, region)
        v = depth.values[sl][depth.valid[sl]]
        out.append(float(v.mean()) if v.size else float("nan"))
    return np.array(out)


def depth_step_table(depth_mu: DepthMap, depth_max: DepthMap, scene: SceneSpec,
                     region: int = 10) -> list[dict]:
    """Adjacent-band depth differences against ground truth.

    Errors are signed ``(measured - gt) / gt`` in percent; a step is
    resolvable when the absolute error is below 10 %.
    """
    if not scene.bands:
        raise ValueError("scene has no step bands")
    m_mu = band_means(depth_mu, scene, region)
    m_max = band_means(depth_max, scene, region)
    gt = np.array([b.depth for b in scene.bands])
    rows = []
    for i in range(len(gt) - 1):
        d_gt = gt[i + 1] - gt[i]
        d_mu = m_mu[i + 1] - m_mu[i]
        d_max = m_max[i + 1] - m_max[i]
        e_mu = (d_mu - d_gt) / d_gt
        e_max = (d_max - d_gt) / d_gt
        rows.append({
            "depth_gt_um": d_gt, "depth_max_um": d_max, "depth_mu_um": d_mu,
            "error_max_pct": 100 * e_max, "error_mu_pct": 100 * e_mu,
            "resolvable_max": bool(abs(e_max) < RESOLVABLE_ERROR),
            "resolvable_mu": bool(abs(e_mu) < RESOLVABLE_ERROR),
        })
    return rows


def smallest_resolvable(rows: list[dict], method: str = "mu") -> float:
    ok = [r["depth_gt_um"] for r in rows if r[f"resolvable_{method}"]]
    return float(min(ok)) if ok else float("nan")


# -- lateral resolution ------------------------------------------------------------

def _group_pixels(g: BarGroup):
    """Row and column indices of pixels whose centres fall inside the group."""
    cols = np.arange(int(np.ceil(g.x0 - 0.5)), int(np.floor(g.x1 - 0.5)) + 1)
    rows = np.arange(int(np.ceil(g.y0 - 0.5)), int(np.floor(g.y1 - 0.5)) + 1)
    return rows, cols


def group_contrast(img, g: BarGroup, trim: float = TRIM_FRACTION) -> dict:
    """Mean intensity difference (dB) and modulation over the cross-sections
    of one bar group, ``trim`` of them discarded at the group's ends."""
    v = _values(img)
    rows, cols = _group_pixels(g)
    patch = v[np.ix_(rows, cols)]
    sections = patch if g.orientation == "vertical" else patch.T
    n = sections.shape[0]
    cut = int(round(0.5 * trim * n))
    if n - 2 * cut >= 1:
        sections = sections[cut:n - cut]
    hi = sections.max(axis=1)
    lo = sections.min(axis=1)
    tiny = 1e-12 * max(float(v.max()), 1e-300)
    db = 10.0 * np.log10(np.maximum(hi, tiny) / np.maximum(lo, tiny))
    with np.errstate(invalid="ignore"):
        mtf = np.where(hi + lo > 0, (hi - lo) / (hi + lo), 0.0)
    return {"orientation": g.orientation, "period_um": g.period_um,
            "line_width_um": g.period_um / 2.0, "lp_per_mm": 1000.0 / g.period_um,
            "intensity_diff_db": float(db.mean()), "mtf": float(mtf.mean()),
            "n_sections": int(sections.shape[0])}


def resolution_from_rows(rows: list[dict], threshold_db: float = RESOLUTION_DB) -> float:
    """Bar period at the ``threshold_db`` crossing, walking coarse to fine.

    Linear interpolation in period between the last group at or above the
    threshold and the first below it; NaN when even the coarsest group fails.
    """
    rows = sorted(rows, key=lambda r: -r["period_um"])
    if not rows or rows[0]["intensity_diff_db"] < threshold_db:
        return float("nan")
    for prev, cur in zip(rows, rows[1:]):
        if cur["intensity_diff_db"] < threshold_db:
            p0, d0 = prev["period_um"], prev["intensity_diff_db"]
            p1, d1 = cur["period_um"], cur["intensity_diff_db"]
            return float(p0 + (threshold_db - d0) * (p1 - p0) / (d1 - d0))
    return float(rows[-1]["period_um"])


@dataclass
class ContrastReport:
    rows: list[dict]
    resolution_um: dict = field(default_factory=dict)

    def mtf(self, orientation: str) -> dict[float, float]:
        return {r["period_um"]: r["mtf"] for r in self.rows if r["orientation"] == orientation}


ORIENTATION_AXIS = {"horizontal": "vertical", "vertical": "horizontal"}


def line_pattern_contrast(img, groups: list[BarGroup]) -> ContrastReport:
    """Per-group contrast plus 3 dB resolution.

    ``resolution_um["horizontal"]`` comes from the vertical-bar groups
    (modulation along x) and ``["vertical"]`` from the horizontal ones.
    """
    rows = [group_contrast(img, g) for g in groups]
    res = {}
    for axis, orient in ORIENTATION_AXIS.items():
        sel = [r for r in rows if r["orientation"] == orient]
        if sel:
            res[axis] = resolution_from_rows(sel)
    return ContrastReport(rows, res)


# -- homogeneity and display -----------------------------------------------------------

def region_variance(img, rows, cols=None) -> np.ndarray:
    """Population variance of every image row in ``rows`` (a ``(start, stop)``
    pair or index sequence), optionally restricted to ``cols``."""
    v = _values(img)
    if isinstance(rows, tuple) and len(rows) == 2:
        rows = range(*rows)
    if cols is None:
        cols = slice(None)
    elif isinstance(cols, tuple) and len(cols) == 2:
        cols = slice(*cols)
    return np.array([np.var(v[r, cols]) for r in rows])


def db_image(img, floor_db: float = -40.0) -> np.ndarray:
    """``10 log10(I / max I)`` clamped below at ``floor_db``."""
    v = _values(img)
    peak = v.max()
    if peak <= 0:
        return np.full(v.shape, float(floor_db))
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(v / peak)
    return np.maximum(out, floor_db)


def region_contrast_db(img, region) -> float:
    """Spread ``10 log10(max / min)`` of the intensities inside ``region``."""
    v = _values(img)[region]
    lo = max(float(v.min()), 1e-12 * float(v.max()))
    return float(10.0 * np.log10(v.max() / lo))
