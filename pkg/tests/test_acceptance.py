"""Acceptance criteria on seeded phantoms and exact oracles.

Each test records one PASS/FAIL line (shown in the terminal summary) and then
asserts the same condition.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    angular_distance, central_difference, grid_search_phase, model_pixel, relative_jacobian_error,
)
from test_preprocess import dirichlet_interpolate
from thzsr import cli, deconv, fitting, io, metrics, phantom
from thzsr.core import AcquisitionConfig, ComplexVolume
from thzsr.fitting import (
    FitWindow, complex_jacobian, complex_residual, fit_pixel, init_phase, magnitude_jacobian,
    magnitude_residual,
)
from thzsr.preprocess import deramp_fft, deramp_fft_array, zero_pad

PRESETS = Path(__file__).resolve().parent.parent / "presets"
CFG = AcquisitionConfig()
OMEGA = CFG.omega


def load_preset(name, out_dir, **overrides):
    raw = cli.parse_config_text((PRESETS / name).read_text(), name)
    ov = {k: str(v) for k, v in overrides.items()}
    ov["out_dir"] = str(out_dir)
    return cli.resolve_config(raw, ov)


# -- 1: depth super-resolution -----------------------------------------------------

@pytest.mark.slow
def test_c1_depth_superresolution(acceptance, tmp_path):
    c = load_preset("stepchart.cfg", tmp_path)
    t0 = time.perf_counter()
    run = cli.run_pipeline(c)
    elapsed = time.perf_counter() - t0
    table = {round(r["depth_gt_um"]): r
             for r in metrics.depth_step_table(run["fit"]["depth_mu"], run["fit"]["depth_max"],
                                               run["scene"])}
    mu91 = table[91]["error_mu_pct"]
    small = [s for s in table if s < 298]
    max_errs = {s: table[s]["error_max_pct"] for s in small}
    ok = abs(mu91) < 10 and all(abs(e) > 10 for e in max_errs.values()) and elapsed < 600
    acceptance(1, ok, f"91 um step: mu error {mu91:+.2f}%; max-method errors "
               + ", ".join(f"{s}:{e:+.1f}%" for s, e in sorted(max_errs.items()))
               + f"; {elapsed:.0f} s")
    assert ok


# -- 2: noiseless exact recovery -------------------------------------------------

def test_c2_noiseless_recovery(acceptance):
    rng = np.random.default_rng(2024)
    n = 1000
    t0 = time.perf_counter()
    worst = np.zeros(4)
    z = np.arange(CFG.padded_length, dtype=float)
    for _ in range(n):
        amp = rng.uniform(0.1, 10.0)
        mu = rng.uniform(1000.0, 11000.0)
        sigma = rng.uniform(0.09, 0.14)
        phi = rng.uniform(-np.pi, np.pi)
        lo = int(mu) - 60
        sig = np.zeros(CFG.padded_length, complex)
        seg = slice(lo, lo + 121)
        sig[seg] = amp * np.sinc(sigma * (z[seg] - mu)) * np.exp(-1j * (OMEGA * z[seg] - phi))
        p = fit_pixel(sig, OMEGA, sigma0=1.0 / CFG.pad_factor)
        err = np.array([abs(p.amplitude - amp) / amp, abs(p.mu - mu),
                        abs(p.sigma - sigma) / sigma, angular_distance(p.phi, phi)])
        worst = np.maximum(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst[0] < 1e-6 and worst[1] < 1e-3 and worst[2] < 1e-6 and worst[3] < 1e-6 and elapsed < 30
    acceptance(2, ok, f"worst rel A {worst[0]:.1e}, mu {worst[1]:.1e} samples, rel sigma "
               f"{worst[2]:.1e}, phi {worst[3]:.1e} rad; {elapsed:.1f} s for {n} pixels")
    assert ok


# -- 3: phase initialisation oracle ------------------------------------------------

def test_c3_phase_init_grid_search(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 121))
        start = int(rng.integers(0, 12000))
        w = FitWindow(start + n // 2, n // 2, start, start + n)
        angles = rng.uniform(-np.pi, np.pi) - OMEGA * w.z + rng.normal(0, 1.0, n)
        seg = rng.uniform(0.05, 3.0, n) * np.exp(1j * angles)
        phi = init_phase(seg, w, OMEGA)
        ref = grid_search_phase(w.z, np.angle(seg), OMEGA)
        worst = max(worst, float(angular_distance(phi, ref)))
    ok = worst < 1e-5
    acceptance(3, ok, f"max |closed form - grid search| = {worst:.2e} rad over 200 windows")
    assert ok


# -- 4: Jacobians ------------------------------------------------------------------

def test_c4_jacobians(acceptance):
    rng = np.random.default_rng(4)
    worst_c = worst_m = 0.0
    near = skipped = 0
    for i in range(100):
        z = np.arange(0, 91, dtype=float) + float(rng.integers(0, 12000))
        amp = rng.uniform(0.1, 5.0)
        sigma = rng.uniform(0.05, 0.3)
        phi = rng.uniform(-np.pi, np.pi)
        # a third of the points put a sample within 1e-4 of mu
        off = rng.uniform(-9e-5, 9e-5) if i % 3 == 0 else rng.uniform(0, 1)
        mu = z[45] + off
        near += abs(off) < 1e-4
        data = model_pixel(1.0, 45.3, 0.11, 0.3, OMEGA, 91)
        p = np.array([amp, mu, sigma, phi])
        Jc = complex_jacobian(p, z, data, OMEGA)
        Jc_fd = central_difference(lambda q: complex_residual(q, z, data, OMEGA), p, h=1e-5,
                                   relative=False)
        worst_c = max(worst_c, relative_jacobian_error(Jc, Jc_fd))
        pm = p[:3]
        # |sinc| has a kink at its zeros: skip points whose difference stencil
        # changes the sign of the sinc somewhere in the window
        signs = [np.sign(np.sinc(sg * (z - m))) for m in (mu - 1e-5, mu, mu + 1e-5)
                 for sg in (sigma - 1e-5, sigma, sigma + 1e-5)]
        if any(np.any(sg != signs[4]) for sg in signs):
            skipped += 1
            continue
        Jm = magnitude_jacobian(pm, z, np.abs(data))
        Jm_fd = central_difference(lambda q: magnitude_residual(q, z, np.abs(data)), pm, h=1e-5,
                                   relative=False)
        worst_m = max(worst_m, relative_jacobian_error(Jm, Jm_fd))
    ok = worst_c < 1e-6 and worst_m < 1e-6
    acceptance(4, ok, f"max relative error complex {worst_c:.1e}, magnitude {worst_m:.1e} "
               f"(100 points, {near} with |z-mu|<1e-4; {skipped} magnitude points on a sinc zero)")
    assert ok


# -- 5: preprocessing identity -------------------------------------------------------

def test_c5_preprocessing_identity(acceptance):
    rng = np.random.default_rng(5)
    u = rng.standard_normal(1400) + 1j * rng.standard_normal(1400)
    padded = deramp_fft_array(u, 9 * 1400)
    bins = rng.choice(9 * 1400, 200, replace=False)
    ref = dirichlet_interpolate(np.fft.fft(u), 9, bins)
    err_d = float(np.max(np.abs(padded[bins] - ref)) / np.max(np.abs(ref)))
    vol = ComplexVolume(rng.standard_normal((3, 4, 1400)) + 1j * rng.standard_normal((3, 4, 1400)))
    spectrum = deramp_fft(zero_pad(vol, 9))
    e_u = np.sum(np.abs(vol.data) ** 2)
    err_p = float(abs(np.sum(np.abs(spectrum.data) ** 2) / spectrum.nz - e_u) / e_u)
    ok = err_d < 1e-9 and err_p < 1e-9
    acceptance(5, ok, f"Dirichlet relative error {err_d:.1e}, Parseval relative error {err_p:.1e}")
    assert ok


# -- 6: Lucy-Richardson invariants --------------------------------------------------------

def test_c6_lr_invariants(acceptance):
    rng = np.random.default_rng(6)
    y = rng.uniform(0.0, 1.0, (48, 48))
    h = deconv.normalize_kernel(rng.uniform(0, 1, (9, 9)))
    flux = y.sum()
    worst_flux, min_val = [0.0], [np.inf]

    def cb(k, x):
        worst_flux[0] = max(worst_flux[0], abs(x.sum() - flux) / flux)
        min_val[0] = min(min_val[0], float(x.min()))

    deconv.lucy_richardson(y, h, iters=100, callback=cb)
    fixed = deconv.lucy_richardson(y, deconv.delta_kernel(9), iters=100)
    err_fp = float(np.max(np.abs(fixed - y)))
    ok = min_val[0] >= 0 and worst_flux[0] < 1e-6 and err_fp < 1e-12
    acceptance(6, ok, f"min value {min_val[0]:.2e}, worst flux drift {worst_flux[0]:.1e}, "
               f"delta-kernel drift {err_fp:.1e}")
    assert ok


# -- 7: blind TV kernel recovery ---------------------------------------------------------------

@pytest.mark.slow
def test_c7_blind_kernel_recovery(acceptance):
    sc = phantom.make_usaf_scene(CFG, [1312.5, 1050.0, 787.5, 692.4], nx=64, ny=64)
    sharp = sc.reflectivity ** 2
    h = deconv.gaussian_kernel(7, 1.0)
    blurred = deconv.blur(sharp, h)
    res = deconv.blind_tv_deconvolve(blurred, kernel_size=7)
    k = deconv.center_kernel(res.kernel)
    rms = float(np.sqrt(np.mean((k - h) ** 2)))
    mono = bool(np.all(np.diff(res.history) <= 0))
    ok = rms < 0.05 and mono
    acceptance(7, ok, f"kernel RMS error {rms:.4f}; objective non-increasing over "
               f"{len(res.history)} accepted finest-level states: {mono}")
    assert ok


# -- 8 and 9: bar chart run -------------------------------------------------------------------

@pytest.fixture(scope="module")
def metalpcb(tmp_path_factory):
    c = load_preset("metalpcb.cfg", tmp_path_factory.mktemp("metalpcb"),
                    arms="Refer_NoSR,Reconst_NoSR,Reconst_Xu,Reconst_LR_G")
    return cli.run_pipeline(c)


@pytest.mark.slow
def test_c8_lateral_resolution(acceptance, metalpcb):
    groups = metalpcb["scene"].groups
    reports = {arm: metrics.line_pattern_contrast(img, groups)
               for arm, img in metalpcb["images"].items()}
    base = reports["Reconst_NoSR"].resolution_um["horizontal"]
    tv = reports["Reconst_Xu"].resolution_um["horizontal"]
    factor = base / tv
    # horizontal resolution is measured on the vertical-bar groups
    tv_mtf = reports["Reconst_Xu"].mtf("vertical")
    lr_mtf = reports["Reconst_LR_G"].mtf("vertical")
    losing = {p: (tv_mtf[p], lr_mtf[p]) for p in tv_mtf if tv_mtf[p] < lr_mtf[p]}
    ok = factor >= 1.5 and not losing
    detail = (f"horizontal 3 dB resolution NoSR {base:.0f} um -> TV-blind {tv:.0f} um "
              f"(factor {factor:.2f}); LR-Gauss {reports['Reconst_LR_G'].resolution_um['horizontal']:.0f} um; "
              + ("TV-blind MTF >= LR-Gauss at all %d periods" % len(tv_mtf) if not losing else
                 "TV-blind below LR-Gauss at " + ", ".join(f"{p:g} um ({a:.3f}<{b:.3f})"
                                                           for p, (a, b) in losing.items())))
    acceptance(8, ok, detail)
    assert ok


@pytest.mark.slow
def test_c9_intensity_homogenisation(acceptance, metalpcb):
    sc = metalpcb["scene"]
    var_u = metrics.region_variance(metalpcb["images"]["Refer_NoSR"], sc.homogeneous_rows,
                                    sc.homogeneous_cols)
    var_v = metrics.region_variance(metalpcb["images"]["Reconst_NoSR"], sc.homogeneous_rows,
                                    sc.homogeneous_cols)
    ok = bool(np.all(var_v < var_u))
    acceptance(9, ok, f"{int(np.sum(var_v < var_u))}/{var_u.size} rows with var(I_v) < var(I_u); "
               f"median ratio {np.median(var_v / var_u):.2e}")
    assert ok


# -- 10: window sweep ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_window_sweep(acceptance, tmp_path):
    c = load_preset("windowsweep.cfg", tmp_path)
    cfg = cli._acq_from_config(c)
    sc = cli.build_scene(cfg, c["scene"], c["nx"], c["ny"], c["snr_db"], c["seed"],
                         periods=c["periods"], roughness_um=c["roughness_um"], tilt_um=c["tilt_um"])
    vol = phantom.synthesize(sc, cfg)
    rows = metrics.window_sweep(vol, cfg, c["sweep_taus"])
    curve = {r["tau_f"]: r["mean_rmse"] for r in rows}
    best = min(curve, key=curve.get)
    region_min = min(curve[t] for t in curve if 36 <= t <= 60)
    rises = all(curve[t] > region_min for t in curve if t <= 13)
    ok = 36 <= best <= 60 and rises
    acceptance(10, ok, "mean RMSE " + ", ".join(f"{t}:{v:.3g}" for t, v in curve.items())
               + f"; minimum at tau_f={best}")
    assert ok


# -- 11: determinism ------------------------------------------------------------------------------

@pytest.mark.slow
def test_c11_determinism(acceptance, tmp_path):
    checks = {}
    # synth: byte-identical files
    for run in ("a", "b"):
        assert cli.main(["synth", "--scene", "usaf", "--nx", "48", "--ny", "48", "--snr-db", "30",
                         "--seed", "7", "--periods", "1050", "--out", str(tmp_path / run / "v.thz3")]) == 0
    checks["synth"] = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                          for f in ("v.thz3", "v.truth.csv", "v.scene.json"))
    vol = io.read_volume(tmp_path / "a" / "v.thz3")
    # fit: worker counts and repeats
    r1 = fitting.fit_frequency_volume(vol, CFG, 45, workers=1)
    r2 = fitting.fit_frequency_volume(vol, CFG, 45, workers=2)
    r3 = fitting.fit_frequency_volume(vol, CFG, 45, workers=1)
    checks["fit"] = (r1.grid.equals(r2.grid) and r1.grid.equals(r3.grid)
                     and np.array_equal(r1.reference.values, r2.reference.values))
    iv = fitting.reconstruct_intensity(r1.grid).values
    # deconvolution: repeated runs
    a = deconv.blind_tv_deconvolve(iv, lam=5e-4)
    b = deconv.blind_tv_deconvolve(iv, lam=5e-4)
    lr_a = deconv.lucy_richardson(iv, a.kernel, 50)
    lr_b = deconv.lucy_richardson(iv, b.kernel, 50)
    checks["deconv"] = (np.array_equal(a.image, b.image) and np.array_equal(a.kernel, b.kernel)
                        and np.array_equal(lr_a, lr_b))
    # CLI pipeline with different thread counts: identical numeric outputs
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"pipe{threads}"
        assert cli.main(["pipeline", "--config", str(PRESETS / "default.cfg"), "--threads", threads,
                         "--out-dir", str(out), "--set", "nx=48", "--set", "ny=48",
                         "--set", "periods=1050", "--set", "arms=Reconst_NoSR,Reconst_Xu"]) == 0
        outs.append(out)
    names = ["fit.params.csv", "fit.Iv.csv", "fit.Iu.csv", "Reconst_Xu.image.csv", "mtf.csv",
             "variance.csv", "volume.thz3"]
    checks["pipeline"] = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    ok = all(checks.values())
    acceptance(11, ok, "bit-identical: " + ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok
