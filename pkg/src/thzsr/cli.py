"""Command-line interface: ``thzsr synth|fit|deconv|eval|pipeline``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import deconv, fitting, io, metrics, phantom
from .core import (
    AcquisitionConfig, ComplexVolume, DEFAULT_F_END, DEFAULT_F_START, DEFAULT_LATERAL_STEP_UM,
    DEFAULT_N_FREQ, DEFAULT_PAD_FACTOR, DEFAULT_PSF_FWHM_UM, DEFAULT_TAU_F, DepthMap, Domain,
    FitGrid,
)
from .phantom import Band, BarGroup, SceneSpec

log = logging.getLogger("thzsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_USAF_PERIODS = (1837.5, 1575.0, 1312.5, 1181.25, 1050.0, 918.75, 787.5, 692.4)
DEFAULT_SWEEP_TAUS = (5, 9, 13, 20, 28, 36, 45, 60)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- small helpers ----------------------------------------------------------------

def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _int_list(text) -> list[int]:
    return [int(round(v)) for v in _float_list(text)]


def _snr(text) -> float | None:
    if text is None:
        return None
    v = float(text)
    return None if math.isinf(v) and v > 0 else v


def _acq(args, n_freq=None, lateral_step=None) -> AcquisitionConfig:
    dd = getattr(args, "delta_d", None)
    return AcquisitionConfig(
        f_start=args.f_start, f_end=args.f_end,
        n_freq=n_freq or getattr(args, "n_freq", DEFAULT_N_FREQ),
        pad_factor=getattr(args, "pad", DEFAULT_PAD_FACTOR),
        lateral_step=lateral_step or getattr(args, "lateral_step", DEFAULT_LATERAL_STEP_UM),
        depth_resolution_um=None if dd in (None, "auto") else float(dd),
    )


def _add_acq_flags(p, with_pad=False):
    p.add_argument("--f-start", type=float, default=DEFAULT_F_START, help="sweep start (Hz)")
    p.add_argument("--f-end", type=float, default=DEFAULT_F_END, help="sweep end (Hz)")
    if with_pad:
        p.add_argument("--pad", type=int, default=DEFAULT_PAD_FACTOR, help="zero-padding factor N")
        p.add_argument("--delta-d", default="auto",
                       help="depth per unpadded bin in um, or 'auto' for c/2B")


def _save_image(values, prefix: Path, name: str, db: bool = False):
    values = np.asarray(values, dtype=float)
    io.write_image_csv(values, f"{prefix}.{name}.csv")
    shown = np.nan_to_num(values, nan=0.0)
    if np.any(shown < 0):
        shown = shown - shown.min()
    io.write_image_png(shown, f"{prefix}.{name}.png", db=db)


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        if path.suffix.lower() == ".png":
            return io.read_image_png(path).astype(float)
        return io.read_image_csv(path)
    except ValueError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _read_volume(path) -> ComplexVolume:
    if not Path(path).exists():
        raise DataError(f"volume not found: {path}")
    return io.read_volume(path)


# -- scene sidecar ------------------------------------------------------------------

def scene_to_json(scene: SceneSpec) -> dict:
    return {
        "kind": scene.kind, "nx": scene.nx, "ny": scene.ny, "psf_fwhm": scene.psf_fwhm,
        "snr_db": scene.snr_db, "seed": scene.rng_seed,
        "bands": [[b.x0, b.x1, b.depth] for b in scene.bands],
        "groups": [[g.orientation, g.period_um, g.x0, g.x1, g.y0, g.y1] for g in scene.groups],
        "homogeneous_rows": scene.homogeneous_rows, "homogeneous_cols": scene.homogeneous_cols,
    }


def scene_from_json(path) -> SceneSpec:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scene file not found: {path}")
    try:
        d = json.loads(path.read_text())
        nx, ny = int(d["nx"]), int(d["ny"])
        rows = d.get("homogeneous_rows")
        cols = d.get("homogeneous_cols")
        return SceneSpec(
            nx, ny, np.zeros((ny, nx)), np.zeros((ny, nx)), d.get("psf_fwhm", DEFAULT_PSF_FWHM_UM),
            d.get("snr_db"), d.get("seed", 0), kind=d.get("kind", "custom"),
            bands=[Band(int(a), int(b), float(c)) for a, b, c in d.get("bands", [])],
            groups=[BarGroup(o, float(p), *map(float, ext)) for o, p, *ext in d.get("groups", [])],
            homogeneous_rows=tuple(rows) if rows else None,
            homogeneous_cols=tuple(cols) if cols else None,
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed scene file {path}: {exc}") from exc


def _scene_path_for(volume_path) -> Path:
    p = Path(volume_path)
    return p.with_name(p.stem + ".scene.json")


# -- synth --------------------------------------------------------------------

def build_scene(cfg: AcquisitionConfig, kind: str, nx: int, ny: int, snr_db, seed: int,
                steps=None, periods=None, psf_fwhm=DEFAULT_PSF_FWHM_UM, roughness_um=0.0,
                tilt_um=150.0) -> SceneSpec:
    if kind == "step":
        return phantom.make_step_scene(cfg, steps or phantom.STEPCHART_STEPS_UM, nx, ny,
                                       psf_fwhm=psf_fwhm, snr_db=snr_db, seed=seed)
    if kind == "usaf":
        return phantom.make_usaf_scene(cfg, periods or DEFAULT_USAF_PERIODS, nx, ny,
                                       tilt_um=tilt_um, roughness_um=roughness_um,
                                       psf_fwhm=psf_fwhm, snr_db=snr_db, seed=seed)
    if kind == "textured":
        return phantom.make_textured_scene(cfg, nx, ny, psf_fwhm=psf_fwhm, snr_db=snr_db, seed=seed)
    raise UsageError(f"unknown scene {kind!r}")


def write_synth_outputs(scene: SceneSpec, vol: ComplexVolume, out: Path) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_volume(vol, out)
    io.write_table_csv(phantom.ground_truth_rows(scene), out.with_name(out.stem + ".truth.csv"),
                       columns=["x", "y", "depth_um", "reflectivity"])
    _scene_path_for(out).write_text(json.dumps(scene_to_json(scene), indent=1, sort_keys=True))


def cmd_synth(args) -> int:
    cfg = _acq(args)
    try:
        scene = build_scene(cfg, args.scene, args.nx, args.ny, _snr(args.snr_db), args.seed,
                            steps=_float_list(args.steps) if args.steps else None,
                            periods=_float_list(args.periods) if args.periods else None,
                            psf_fwhm=args.psf_fwhm, roughness_um=args.roughness_um,
                            tilt_um=args.tilt_um)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    vol = phantom.synthesize(scene, cfg)
    write_synth_outputs(scene, vol, Path(args.out))
    log.info("synthesised %s scene %dx%dx%d in %.1f s -> %s", scene.kind, scene.nx, scene.ny,
             cfg.n_freq, time.perf_counter() - t0, args.out)
    return EXIT_OK


# -- fit ----------------------------------------------------------------------------

PARAM_COLUMNS = ["x", "y", "amplitude", "mu", "sigma", "phi", "rmse", "cost", "z_max",
                 "iterations", "converged", "valid"]


def grid_rows(grid: FitGrid) -> list[dict]:
    arrays = grid.arrays()
    rows = []
    for y in range(grid.shape[0]):
        for x in range(grid.shape[1]):
            row = {"x": x, "y": y}
            for k in PARAM_COLUMNS[2:]:
                v = arrays[k][y, x]
                row[k] = int(v) if k in ("z_max", "iterations", "converged", "valid") else repr(float(v))
            rows.append(row)
    return rows


def _parse_omega(text):
    if text is None or text == "default":
        return None
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError as exc:
        raise UsageError(f"--omega must be 'auto', 'default' or a number, got {text!r}") from exc


def resolve_z0(grid: FitGrid, z0, scene: SceneSpec | None) -> float:
    if z0 not in (None, "auto"):
        try:
            return float(z0)
        except ValueError as exc:
            raise UsageError(f"--z0 must be 'auto' or a number, got {z0!r}") from exc
    if scene is not None and scene.bands:
        ref = scene.bands[0]
        region = metrics.band_region(ref, scene.ny)
    else:
        region = (slice(None), slice(None))
    try:
        return fitting.estimate_reference_zero(grid, region)
    except ValueError as exc:
        raise NumericalError(str(exc)) from exc


def run_fit(vol: ComplexVolume, cfg: AcquisitionConfig, tau_f: int, omega, workers,
            z0=None, scene: SceneSpec | None = None, prefix: Path | None = None) -> dict:
    t0 = time.perf_counter()
    if vol.domain == Domain.FREQUENCY:
        res = fitting.fit_frequency_volume(vol, cfg, tau_f, workers=workers, omega=omega)
        grid, ref, z_mean, om = res.grid, res.reference, res.z_mean, res.omega
    else:
        from .preprocess import reference_intensity

        if omega == "auto":
            omega = fitting.estimate_carrier_omega(vol)
        om = cfg.omega if omega is None else float(omega)
        grid = fitting.fit_volume(vol, cfg, tau_f, workers=workers, omega=om)
        ref, z_mean = reference_intensity(vol)
    if omega == "auto":
        log.info("estimated carrier omega = %.6f rad/sample (nominal %.6f)", om, cfg.omega)
    n_valid = int(grid.valid.sum())
    if n_valid == 0:
        raise NumericalError("no pixel could be fitted")
    zero = resolve_z0(grid, z0, scene)
    iv = fitting.reconstruct_intensity(grid)
    d_mu = fitting.reconstruct_depth(grid, zero, cfg, "mu")
    d_max = fitting.reconstruct_depth(grid, zero, cfg, "max")
    meta = {"omega": om, "z_mean": z_mean, "z0": zero, "tau_f": tau_f, "pad_factor": cfg.pad_factor,
            "delta_d_um": cfg.delta_d, "valid_pixels": n_valid,
            "converged_pixels": int((grid.converged & grid.valid).sum()),
            "seconds": time.perf_counter() - t0}
    if prefix is not None:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        io.write_table_csv(grid_rows(grid), f"{prefix}.params.csv", columns=PARAM_COLUMNS)
        _save_image(ref.values, prefix, "Iu")
        _save_image(iv.values, prefix, "Iv")
        _save_image(d_mu.values, prefix, "depth_mu")
        _save_image(d_max.values, prefix, "depth_max")
        io.write_table_csv([{"key": k, "value": v} for k, v in meta.items()], f"{prefix}.meta.csv")
    log.info("fitted %d/%d pixels in %.1f s", n_valid, grid.valid.size, meta["seconds"])
    return {"grid": grid, "Iu": ref.values, "Iv": iv.values, "depth_mu": d_mu, "depth_max": d_max,
            "meta": meta}


def cmd_fit(args) -> int:
    vol = _read_volume(args.input)
    cfg = _acq(args, n_freq=vol.nz if vol.domain == Domain.FREQUENCY else None,
               lateral_step=vol.lateral_step)
    if vol.domain == Domain.SPATIAL:
        cfg = cfg.replace(n_freq=vol.nz // cfg.pad_factor) if vol.nz >= 2 * cfg.pad_factor else cfg
    scene_path = Path(args.scene) if args.scene else _scene_path_for(args.input)
    scene = scene_from_json(scene_path) if scene_path.exists() else None
    run_fit(vol, cfg, args.window, _parse_omega(args.omega), args.threads, args.z0, scene,
            Path(args.out_prefix))
    return EXIT_OK


# -- deconv -----------------------------------------------------------------------------

def run_deconv(image: np.ndarray, method: str, lam: float = 2e-3, kernel_size: int = 15,
               kernel=None, iters: int | None = None, sigma_px: float | None = None,
               psf_fwhm: float = DEFAULT_PSF_FWHM_UM, lateral_step: float = DEFAULT_LATERAL_STEP_UM,
               scales: int = 4) -> tuple[np.ndarray, np.ndarray]:
    image = np.nan_to_num(np.asarray(image, dtype=float), nan=0.0)
    if np.any(image < 0):
        raise DataError("intensity image has negative values")
    if method == "tv-blind":
        kw = {} if iters is None else {"final_iters": iters}
        res = deconv.blind_tv_deconvolve(image, lam=lam, kernel_size=kernel_size, scales=scales, **kw)
        out, h = res.image, res.kernel
    elif method == "lr-gauss":
        sigma = deconv.fwhm_to_sigma(psf_fwhm / lateral_step) if sigma_px is None else sigma_px
        h = deconv.gaussian_kernel(kernel_size, max(sigma, 1e-6))
        out = deconv.lucy_richardson(image, h, 50 if iters is None else iters)
    elif method == "lr-kernel":
        if kernel is None:
            raise UsageError("lr-kernel needs --kernel")
        try:
            h = deconv.check_kernel(deconv.normalize_kernel(kernel))
        except ValueError as exc:
            raise DataError(f"bad kernel: {exc}") from exc
        out = deconv.lucy_richardson(image, h, 50 if iters is None else iters)
    else:
        raise UsageError(f"unknown method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{method} produced non-finite values")
    return out, h


def cmd_deconv(args) -> int:
    image = _read_image(args.input)
    kernel = _read_image(args.kernel) if args.kernel else None
    out, h = run_deconv(image, args.method, lam=args.lam, kernel_size=args.kernel_size,
                        kernel=kernel, iters=args.iters, sigma_px=args.sigma_px,
                        psf_fwhm=args.psf_fwhm, lateral_step=args.lateral_step, scales=args.scales)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    _save_image(out, prefix, "image")
    io.write_image_csv(h, f"{prefix}.kernel.csv")
    io.write_image_png(h, f"{prefix}.kernel.png")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------------

def _rows_cols(scene, rows, cols):
    if rows:
        r = tuple(_int_list(rows.replace(":", ",")))
    elif scene is not None and scene.homogeneous_rows:
        r = scene.homogeneous_rows
    else:
        raise UsageError("variance needs --rows or a scene with a homogeneous band")
    if cols:
        c = tuple(_int_list(cols.replace(":", ",")))
    else:
        c = scene.homogeneous_cols if scene is not None else None
    return r, c


def contrast_rows(images: dict, groups) -> tuple[list[dict], list[dict]]:
    rows, summary = [], []
    for label, img in images.items():
        rep = metrics.line_pattern_contrast(img, groups)
        for r in rep.rows:
            rows.append({"arm": label, **r})
        summary.append({"arm": label, **{f"resolution_{k}_um": v for k, v in rep.resolution_um.items()}})
    return rows, summary


def cmd_eval(args) -> int:
    out = Path(args.out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene = scene_from_json(args.scene) if args.scene else None
    task = args.task

    if task == "rmse-sweep":
        if not args.input:
            raise UsageError("rmse-sweep needs --in VOLUME")
        vol = _read_volume(args.input)
        cfg = _acq(args, n_freq=vol.nz if vol.domain == Domain.FREQUENCY else None,
                   lateral_step=vol.lateral_step)
        taus = _int_list(args.taus) if args.taus else list(DEFAULT_SWEEP_TAUS)
        rows = metrics.window_sweep(vol, cfg, taus, workers=args.threads)
        io.write_table_csv(rows, f"{out}.rmse_sweep.csv", columns=metrics.SWEEP_COLUMNS)
        best = min(rows, key=lambda r: r["mean_rmse"])
        log.info("minimum mean RMSE %.4g at tau_f=%d", best["mean_rmse"], best["tau_f"])
        return EXIT_OK

    if task == "depth-table":
        if not (args.fit_prefix and scene):
            raise UsageError("depth-table needs --fit-prefix and --scene")
        d_mu = io.read_image_csv(f"{args.fit_prefix}.depth_mu.csv")
        d_max = io.read_image_csv(f"{args.fit_prefix}.depth_max.csv")
        table = metrics.depth_step_table(DepthMap(d_mu, np.isfinite(d_mu)),
                                         DepthMap(d_max, np.isfinite(d_max)), scene)
        io.write_table_csv(table, f"{out}.depth_table.csv", columns=metrics.DEPTH_TABLE_COLUMNS)
        io.write_image_png(np.nan_to_num(d_mu - np.nanmin(d_mu)), f"{out}.depth_mu.png")
        return EXIT_OK

    images = {}
    for item in args.images or []:
        label, _, path = item.rpartition("=")
        images[label or Path(path).stem] = _read_image(path)
    if not images:
        raise UsageError(f"{task} needs at least one --image")

    if task == "mtf":
        if scene is None or not scene.groups:
            raise UsageError("mtf needs --scene with bar groups")
        rows, summary = contrast_rows(images, scene.groups)
        io.write_table_csv(rows, f"{out}.mtf.csv", columns=["arm"] + metrics.CONTRAST_COLUMNS)
        io.write_table_csv(summary, f"{out}.resolution.csv")
        for label, img in images.items():
            io.write_image_png(img, f"{out}.{label}.db.png", db=True)
    elif task == "variance":
        r, c = _rows_cols(scene, args.rows, args.cols)
        rows = []
        for label, img in images.items():
            for y, v in zip(range(*r), metrics.region_variance(img, r, c)):
                rows.append({"arm": label, "row": y, "variance": v})
        io.write_table_csv(rows, f"{out}.variance.csv", columns=["arm", "row", "variance"])
    elif task == "db":
        rows = []
        for label, img in images.items():
            rows.append({"arm": label, "contrast_db": metrics.region_contrast_db(img, np.s_[:, :]),
                         "min_db": float(metrics.db_image(img, args.floor_db).min())})
            io.write_image_png(img, f"{out}.{label}.db.png", db=True, floor_db=args.floor_db)
        io.write_table_csv(rows, f"{out}.db.csv")
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown task {task!r}")
    return EXIT_OK


# -- pipeline config ---------------------------------------------------------------------

CONFIG_KEYS = {
    # key: (parser, required)
    "scene": (str, True), "nx": (int, True), "ny": (int, True), "snr_db": (_snr, True),
    "seed": (int, True), "pad_factor": (int, True), "tau_f": (int, True),
    "lateral_step": (float, True), "delta_d": (str, True),
    "f_start": (float, False), "f_end": (float, False), "n_freq": (int, False),
    "psf_fwhm": (float, False), "steps": (_float_list, False), "periods": (_float_list, False),
    "roughness_um": (float, False), "tilt_um": (float, False), "omega": (str, False),
    "z0": (str, False), "lambda": (float, False), "kernel_size": (int, False),
    "scales": (int, False), "final_iters": (int, False), "lr_iters": (int, False),
    "arms": (lambda s: [a.strip() for a in s.split(",") if a.strip()], False),
    "sweep_taus": (_int_list, False), "out_dir": (str, False), "threads": (int, False),
}

CONFIG_DEFAULTS = {
    "f_start": DEFAULT_F_START, "f_end": DEFAULT_F_END, "n_freq": DEFAULT_N_FREQ,
    "psf_fwhm": DEFAULT_PSF_FWHM_UM, "steps": None, "periods": None, "roughness_um": 0.0,
    "tilt_um": 150.0, "omega": "default", "z0": "auto", "lambda": 2e-3, "kernel_size": 15,
    "scales": 4, "final_iters": 300, "lr_iters": 50,
    "arms": ["Refer_NoSR", "Reconst_NoSR", "Refer_Xu", "Reconst_Xu", "Refer_LR_G", "Reconst_LR_G",
             "Refer_LR_Xu", "Reconst_LR_Xu"],
    "sweep_taus": [], "out_dir": "thzsr_out", "threads": None,
}

ARMS = {"Refer_NoSR", "Reconst_NoSR", "Refer_Xu", "Reconst_Xu", "Refer_LR_G", "Reconst_LR_G",
        "Refer_LR_Xu", "Reconst_LR_Xu"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(raw: dict[str, str], overrides: dict[str, str] | None = None) -> dict:
    merged = {**raw, **(overrides or {})}
    unknown = sorted(set(merged) - set(CONFIG_KEYS))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    missing = [k for k, (_, req) in CONFIG_KEYS.items() if req and k not in merged]
    if missing:
        raise UsageError(f"missing config key(s): {', '.join(missing)}")
    cfg = dict(CONFIG_DEFAULTS)
    for k, v in merged.items():
        parse = CONFIG_KEYS[k][0]
        try:
            cfg[k] = parse(v) if isinstance(v, str) else v
        except ValueError as exc:
            raise UsageError(f"config key {k}: cannot parse {v!r}") from exc
    bad = sorted(set(cfg["arms"]) - ARMS)
    if bad:
        raise UsageError(f"unknown arm(s): {', '.join(bad)}")
    return cfg


def _acq_from_config(c: dict) -> AcquisitionConfig:
    return AcquisitionConfig(
        f_start=c["f_start"], f_end=c["f_end"], n_freq=c["n_freq"], pad_factor=c["pad_factor"],
        lateral_step=c["lateral_step"],
        depth_resolution_um=None if c["delta_d"] == "auto" else float(c["delta_d"]),
    )


def run_pipeline(c: dict) -> dict:
    """synth -> fit -> deconv arms -> eval, all outputs under ``out_dir``."""
    out = Path(c["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = _acq_from_config(c)
    try:
        scene = build_scene(cfg, c["scene"], c["nx"], c["ny"], c["snr_db"], c["seed"],
                            steps=c["steps"], periods=c["periods"], psf_fwhm=c["psf_fwhm"],
                            roughness_um=c["roughness_um"], tilt_um=c["tilt_um"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    vol = phantom.synthesize(scene, cfg)
    write_synth_outputs(scene, vol, out / "volume.thz3")
    log.info("synth: %.1f s", time.perf_counter() - t0)

    fit = run_fit(vol, cfg, c["tau_f"], _parse_omega(c["omega"]), c["threads"], c["z0"], scene,
                  out / "fit")
    summary = {"fit_seconds": fit["meta"]["seconds"], "omega": fit["meta"]["omega"],
               "z0": fit["meta"]["z0"]}

    sources = {"Refer": fit["Iu"], "Reconst": fit["Iv"]}
    images: dict[str, np.ndarray] = {}
    kernels: dict[str, np.ndarray] = {}
    for arm in c["arms"]:
        src, method = arm.split("_", 1)
        img = sources[src]
        t1 = time.perf_counter()
        if method == "NoSR":
            res = img
        elif method == "Xu":
            res, kernels[src] = run_deconv(img, "tv-blind", lam=c["lambda"], kernel_size=c["kernel_size"],
                                           iters=c["final_iters"], scales=c["scales"])
            io.write_image_csv(kernels[src], out / f"{arm}.kernel.csv")
        elif method == "LR_G":
            res, _ = run_deconv(img, "lr-gauss", kernel_size=c["kernel_size"], iters=c["lr_iters"],
                                psf_fwhm=c["psf_fwhm"], lateral_step=c["lateral_step"])
        else:  # LR_Xu: LR with the sparse kernel of the blind run on the same source
            if src not in kernels:
                _, kernels[src] = run_deconv(img, "tv-blind", lam=c["lambda"],
                                             kernel_size=c["kernel_size"], scales=c["scales"],
                                             iters=c["final_iters"])
            res, _ = run_deconv(img, "lr-kernel", kernel=deconv.extract_kernel(kernels[src]),
                                iters=c["lr_iters"])
        images[arm] = res
        _save_image(res, out / arm, "image")
        summary[f"{arm}_seconds"] = time.perf_counter() - t1

    if scene.bands:
        table = metrics.depth_step_table(fit["depth_mu"], fit["depth_max"], scene)
        io.write_table_csv(table, out / "depth_table.csv", columns=metrics.DEPTH_TABLE_COLUMNS)
        summary["smallest_resolvable_mu_um"] = metrics.smallest_resolvable(table, "mu")
        summary["smallest_resolvable_max_um"] = metrics.smallest_resolvable(table, "max")
    if scene.groups:
        rows, res_rows = contrast_rows(images, scene.groups)
        io.write_table_csv(rows, out / "mtf.csv", columns=["arm"] + metrics.CONTRAST_COLUMNS)
        io.write_table_csv(res_rows, out / "resolution.csv")
    if scene.homogeneous_rows:
        var_rows = []
        for arm, img in images.items():
            v = metrics.region_variance(img, scene.homogeneous_rows, scene.homogeneous_cols)
            var_rows += [{"arm": arm, "row": y, "variance": float(s)}
                         for y, s in zip(range(*scene.homogeneous_rows), v)]
        io.write_table_csv(var_rows, out / "variance.csv", columns=["arm", "row", "variance"])
    if c["sweep_taus"]:
        sweep = metrics.window_sweep(vol, cfg, c["sweep_taus"], workers=c["threads"])
        io.write_table_csv(sweep, out / "rmse_sweep.csv", columns=metrics.SWEEP_COLUMNS)
    io.write_table_csv([{"key": k, "value": v} for k, v in summary.items()], out / "summary.csv")
    return {"images": images, "fit": fit, "scene": scene, "summary": summary}


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_pipeline(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    raw = parse_config_text(path.read_text(), str(path))
    overrides = _parse_overrides(args.set)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    run_pipeline(resolve_config(raw, overrides))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thzsr", description="FMCW THz depth and lateral super-resolution toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesise a phantom volume")
    s.add_argument("--scene", choices=["step", "usaf", "textured"], required=True)
    s.add_argument("--nx", type=int, default=64)
    s.add_argument("--ny", type=int, default=64)
    s.add_argument("--snr-db", default="30", help="noise level in dB, 'inf' for noiseless")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output .thz3 path")
    s.add_argument("--steps", help="comma-separated step heights (um) for --scene step")
    s.add_argument("--periods", help="comma-separated bar periods (um) for --scene usaf")
    s.add_argument("--psf-fwhm", type=float, default=DEFAULT_PSF_FWHM_UM)
    s.add_argument("--roughness-um", type=float, default=0.0)
    s.add_argument("--tilt-um", type=float, default=150.0)
    s.add_argument("--n-freq", type=int, default=DEFAULT_N_FREQ)
    s.add_argument("--lateral-step", type=float, default=DEFAULT_LATERAL_STEP_UM)
    _add_acq_flags(s)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="curve-fit a volume and reconstruct intensity and depth")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--window", type=int, default=DEFAULT_TAU_F, help="half window tau_f")
    f.add_argument("--omega", default="default", help="'default', 'auto' or rad/sample")
    f.add_argument("--z0", default="auto", help="'auto' or padded sample index")
    f.add_argument("--scene", help="scene sidecar (defaults to <volume>.scene.json if present)")
    f.add_argument("--out-prefix", required=True)
    f.add_argument("--threads", type=int, default=None)
    _add_acq_flags(f, with_pad=True)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("deconv", help="lateral deconvolution of an intensity image")
    d.add_argument("--in", dest="input", required=True, help="image CSV or PNG")
    d.add_argument("--method", choices=["tv-blind", "lr-gauss", "lr-kernel"], required=True)
    d.add_argument("--lambda", dest="lam", type=float, default=2e-3)
    d.add_argument("--kernel-size", type=int, default=15)
    d.add_argument("--kernel", help="kernel CSV for lr-kernel")
    d.add_argument("--iters", type=int, default=None)
    d.add_argument("--scales", type=int, default=4)
    d.add_argument("--sigma-px", type=float, default=None, help="Gaussian sigma override (px)")
    d.add_argument("--psf-fwhm", type=float, default=DEFAULT_PSF_FWHM_UM)
    d.add_argument("--lateral-step", type=float, default=DEFAULT_LATERAL_STEP_UM)
    d.add_argument("--out-prefix", required=True)
    d.set_defaults(func=cmd_deconv)

    e = sub.add_parser("eval", help="evaluation tables")
    e.add_argument("--task", choices=["rmse-sweep", "depth-table", "mtf", "variance", "db"],
                   required=True)
    e.add_argument("--in", dest="input", help="volume for rmse-sweep")
    e.add_argument("--image", dest="images", action="append", help="[label=]image path; repeatable")
    e.add_argument("--scene", help="scene sidecar JSON")
    e.add_argument("--fit-prefix", help="prefix used by 'fit' (depth-table)")
    e.add_argument("--taus", help="comma-separated tau_f values (rmse-sweep)")
    e.add_argument("--rows", help="start:stop rows (variance)")
    e.add_argument("--cols", help="start:stop columns (variance)")
    e.add_argument("--floor-db", type=float, default=-40.0)
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--out-prefix", required=True)
    _add_acq_flags(e, with_pad=True)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="synth -> fit -> deconv -> eval from a config file")
    pl.add_argument("--config", required=True)
    pl.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    pl.add_argument("--threads", type=int, default=None)
    pl.add_argument("--out-dir", default=None)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"thzsr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.VolumeFormatError, FileNotFoundError, OSError) as exc:
        print(f"thzsr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"thzsr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"thzsr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
