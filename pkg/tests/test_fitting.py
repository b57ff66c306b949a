import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    angular_distance, central_difference, grid_search_phase, model_pixel, relative_jacobian_error,
)
from thzsr.core import AcquisitionConfig, ComplexVolume, Domain, FitGrid, SincFitParams
from thzsr import fitting
from thzsr.fitting import (
    FitWindow, complex_jacobian, complex_residual, estimate_carrier_omega, fit_complex,
    fit_magnitude, fit_pixel, fit_volume, init_phase, locate_window, magnitude_jacobian,
    magnitude_residual, reconstruct_depth, reconstruct_intensity, sinc_and_derivative,
)

OMEGA = np.pi * 1399 / 12600


def _window(z_max, tau, n=None):
    return locate_window(np.where(np.arange(n or z_max + tau + 10) == z_max, 1.0, 0.1), tau)


# -- window -------------------------------------------------------------------

def test_window_centred():
    w = _window(500, 45, 1000)
    assert (w.z_max, w.start, w.stop - 1, w.valid) == (500, 455, 545, True)
    assert w.length == 91


def test_window_clamped_at_start():
    w = _window(10, 45, 1000)
    assert (w.start, w.stop - 1, w.valid) == (0, 55, True)


def test_window_clamped_too_short_is_invalid():
    w = _window(3, 45, 10)
    assert w.length == 10 and not w.valid
    assert fit_pixel(np.where(np.arange(10) == 3, 1.0, 0.1), OMEGA).valid is False


def test_window_all_zero_invalid():
    assert not locate_window(np.zeros(50), 5).valid


def test_window_tie_breaks_low():
    sig = np.zeros(100)
    sig[[30, 60]] = 1.0
    assert locate_window(sig, 5).z_max == 30


# -- sinc ------------------------------------------------------------------

def test_sinc_series_branch_is_continuous():
    t = np.array([-2e-5, -1e-9, 0.0, 1e-9, 3.1e-5, 3.2e-5, 1e-3])
    s, ds = sinc_and_derivative(t)
    assert np.allclose(s, np.sinc(t), rtol=0, atol=1e-15)
    eps = 1e-7
    fd = (np.sinc(t + eps) - np.sinc(t - eps)) / (2 * eps)
    assert np.allclose(ds, fd, atol=1e-7)


# -- Jacobians ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.floats(20, 80), st.floats(0.02, 0.5), st.floats(-np.pi, np.pi),
       st.sampled_from([0.0, 1e-6, 5e-5, 0.5]))
def test_complex_jacobian_matches_fd(amp, mu, sigma, phi, frac):
    z = np.arange(0, 101, dtype=float)
    mu = np.round(mu) + frac  # puts a sample within |z - mu| < 1e-4 for small frac
    data = model_pixel(1.0, 50.3, 0.11, 0.2, OMEGA, 101)
    p = np.array([amp, mu, sigma, phi])
    J = complex_jacobian(p, z, data, OMEGA)
    J_fd = central_difference(lambda q: complex_residual(q, z, data, OMEGA), p)
    assert relative_jacobian_error(J, J_fd) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.floats(20, 80), st.floats(0.02, 0.5), st.sampled_from([0.0, 1e-6, 0.37]))
def test_magnitude_jacobian_matches_fd(amp, mu, sigma, frac):
    z = np.arange(0, 101, dtype=float)
    mu = np.round(mu) + frac
    mag = np.abs(model_pixel(1.0, 50.3, 0.11, 0.0, OMEGA, 101))
    p = np.array([amp, mu, sigma])
    # stay away from sinc zeros, where |sinc| has a kink
    t = sigma * (z - mu)
    dist = np.min(np.abs(t[np.abs(t) > 0.5] - np.round(t[np.abs(t) > 0.5])), initial=1.0)
    if dist < 1e-4:
        return
    J = magnitude_jacobian(p, z, mag)
    J_fd = central_difference(lambda q: magnitude_residual(q, z, mag), p, h=1e-8)
    assert relative_jacobian_error(J, J_fd) < 1e-6


# -- magnitude fit ----------------------------------------------------------------

def _mag_case(amp=2.0, mu=100.25, sigma=1 / 9, n=300, tau=45):
    sig = model_pixel(amp, mu, sigma, 0.0, 0.0, n)
    w = locate_window(sig, tau)
    return sig, w


def test_magnitude_fit_noiseless():
    sig, w = _mag_case()
    m = fit_magnitude(w.take(sig), w)
    assert m.converged
    assert m.amplitude == pytest.approx(2.0, rel=1e-6)
    assert m.sigma == pytest.approx(1 / 9, rel=1e-6)
    assert abs(m.mu - 100.25) < 1e-3


@pytest.mark.parametrize("c", [0.01, 3.0, 1e3])
def test_magnitude_fit_scales(c):
    sig, w = _mag_case()
    a = fit_magnitude(w.take(sig), w)
    b = fit_magnitude(w.take(c * sig), w)
    assert b.amplitude == pytest.approx(c * a.amplitude, rel=1e-6)
    assert b.mu == pytest.approx(a.mu, abs=1e-6)
    assert b.sigma == pytest.approx(a.sigma, rel=1e-6)


@pytest.mark.parametrize("s", [1, 7, 40])
def test_magnitude_fit_translates(s):
    sig, w = _mag_case()
    a = fit_magnitude(w.take(sig), w)
    sig2, w2 = _mag_case(mu=100.25 + s)
    b = fit_magnitude(w2.take(sig2), w2)
    assert b.mu - a.mu == pytest.approx(s, abs=1e-6)


# -- phase initialisation -----------------------------------------------------------

def test_phase_init_exact_carrier():
    z = np.arange(200, 291, dtype=float)
    w = FitWindow(245, 45, 200, 291)
    seg = 0.5 * np.exp(1j * (0.9 - OMEGA * z))
    assert init_phase(seg, w, OMEGA) == pytest.approx(0.9, abs=1e-12)


def test_phase_init_single_point():
    w = FitWindow(7, 0, 7, 8)
    theta = 2.5
    expected = (OMEGA * 7 + theta + np.pi) % (2 * np.pi) - np.pi
    assert init_phase(np.array([np.exp(1j * theta)]), w, OMEGA) == pytest.approx(expected, abs=1e-12)


def test_phase_init_zero_resultant():
    w = FitWindow(0, 1, 0, 2)
    seg = np.array([1.0, np.exp(1j * (np.pi - OMEGA))])
    assert init_phase(seg, w, OMEGA) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_phase_init_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    start = int(rng.integers(0, 5000))
    w = FitWindow(start, n // 2, start, start + n)
    # mostly coherent phases plus spread, so the resultant is well defined
    angles = rng.uniform(-np.pi, np.pi) - OMEGA * w.z + rng.normal(0, 1.2, n)
    seg = rng.uniform(0.1, 2, n) * np.exp(1j * angles)
    phi = init_phase(seg, w, OMEGA)
    ref = grid_search_phase(w.z, np.angle(seg), OMEGA)
    assert angular_distance(phi, ref) < 1e-5


# -- complex fit -------------------------------------------------------------------

def test_complex_fit_typical_pixel():
    truth = (1.5, 4200.6, 0.1111, 0.7)
    sig = model_pixel(*truth, OMEGA, 12600)
    p = fit_pixel(sig, OMEGA)
    assert p.converged and p.valid
    assert p.amplitude == pytest.approx(1.5, rel=1e-6)
    assert p.sigma == pytest.approx(0.1111, rel=1e-6)
    assert abs(p.mu - 4200.6) < 1e-3
    assert angular_distance(p.phi, 0.7) < 1e-6
    assert p.rmse < 1e-8 * 1.5


@pytest.mark.parametrize("theta", [0.3, -2.0, 3.0])
def test_global_phase_rotation(theta):
    sig = model_pixel(1.2, 300.4, 1 / 9, 0.1, OMEGA, 700)
    a = fit_pixel(sig, OMEGA)
    b = fit_pixel(sig * np.exp(1j * theta), OMEGA)
    assert b.amplitude == pytest.approx(a.amplitude, rel=1e-6)
    assert b.mu == pytest.approx(a.mu, abs=1e-6)
    assert b.sigma == pytest.approx(a.sigma, rel=1e-6)
    # the model carries exp(+j phi), so rotating the data by theta moves phi by theta
    assert angular_distance(b.phi, a.phi + theta) < 1e-6


@pytest.mark.parametrize("c", [0.5, 2.0, 40.0])
def test_complex_scaling(c):
    sig = model_pixel(1.0, 250.7, 1 / 9, -1.0, OMEGA, 600)
    a = fit_pixel(sig, OMEGA)
    b = fit_pixel(c * sig, OMEGA)
    assert b.amplitude == pytest.approx(c * a.amplitude, rel=1e-6)
    assert b.mu == pytest.approx(a.mu, abs=1e-6)


def test_index_translation_shifts_mu_only():
    a = fit_pixel(model_pixel(1.0, 250.7, 1 / 9, 0.4, OMEGA, 800), OMEGA)
    s = 17
    # shifting the profile by s samples also advances the carrier by omega*s
    b = fit_pixel(model_pixel(1.0, 250.7 + s, 1 / 9, 0.4 + OMEGA * s, OMEGA, 800), OMEGA)
    assert b.mu - a.mu == pytest.approx(s, abs=1e-6)
    assert b.amplitude == pytest.approx(a.amplitude, rel=1e-6)


def test_complex_fit_never_worse_than_start():
    rng = np.random.default_rng(5)
    for _ in range(20):
        sig = model_pixel(1.0, 300 + rng.uniform(-1, 1), 1 / 9, rng.uniform(-3, 3), OMEGA, 700)
        sig = sig + 0.05 * (rng.standard_normal(700) + 1j * rng.standard_normal(700))
        w = locate_window(sig, 45)
        seg = w.take(sig)
        m = fit_magnitude(seg, w)
        init = (m.amplitude, m.mu, m.sigma, init_phase(seg, w, OMEGA))
        r0 = complex_residual(np.array(init), w.z, seg, OMEGA)
        p = fit_complex(seg, w, init, OMEGA)
        assert p.cost <= 0.5 * r0 @ r0 + 1e-15


# -- volumes ------------------------------------------------------------------------

def _spatial_volume(ny=3, nx=4, nz=600, seed=0):
    rng = np.random.default_rng(seed)
    data = np.empty((ny, nx, nz), complex)
    for y in range(ny):
        for x in range(nx):
            data[y, x] = model_pixel(rng.uniform(0.5, 2), rng.uniform(200, 400), 1 / 9,
                                     rng.uniform(-3, 3), OMEGA, nz)
    data += 0.01 * (rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape))
    return ComplexVolume(data, domain=Domain.SPATIAL)


def test_volume_1x1_equals_pixel_fit():
    sig = model_pixel(1.0, 222.2, 1 / 9, 0.3, OMEGA, 500)
    grid = fit_volume(ComplexVolume(sig[None, None], domain=Domain.SPATIAL), AcquisitionConfig())
    assert grid[0, 0] == fit_pixel(sig, OMEGA)


def test_volume_worker_count_is_irrelevant(monkeypatch):
    monkeypatch.setattr(fitting, "CHUNK_PIXELS", 5)
    vol = _spatial_volume()
    cfg = AcquisitionConfig()
    g1 = fit_volume(vol, cfg, workers=1)
    g3 = fit_volume(vol, cfg, workers=3)
    assert g1.equals(g3)
    assert g1.equals(fit_volume(vol, cfg, workers=1))


def test_volume_rejects_frequency_domain():
    with pytest.raises(ValueError):
        fit_volume(ComplexVolume(np.ones((1, 1, 4))), AcquisitionConfig())


# -- reconstruction ------------------------------------------------------------------

def test_intensity_is_amplitude_squared():
    g = FitGrid.empty(1, 3)
    g[0, 0] = SincFitParams(3.0, 1.0, 0.1, 0.0)
    g[0, 1] = SincFitParams(0.0, 1.0, 0.1, 0.0)
    img = reconstruct_intensity(g)
    assert img.values[0, 0] == 9.0 and img.values[0, 1] == 0.0
    assert img.mask.tolist() == [[True, True, False]]


def test_depth_arithmetic():
    g = FitGrid.empty(1, 1)
    g[0, 0] = SincFitParams(1.0, 109.0, 0.1, 0.0, z_max=110)
    cfg = AcquisitionConfig(depth_resolution_um=1210.0)
    assert reconstruct_depth(g, 100.0, cfg).values[0, 0] == pytest.approx(1210.0)
    assert reconstruct_depth(g, 100.0, cfg, method="max").values[0, 0] == pytest.approx(1210.0 * 10 / 9)
    with pytest.raises(ValueError):
        reconstruct_depth(g, 0.0, cfg, method="centroid")


def test_reference_zero_median():
    g = FitGrid.empty(2, 2)
    for i, mu in enumerate([10.0, 11.0, 12.0, 500.0]):
        g[divmod(i, 2)] = SincFitParams(1.0, mu, 0.1, 0.0)
    assert fitting.estimate_reference_zero(g, (slice(None), slice(None))) == 11.5


# -- carrier estimate ------------------------------------------------------------------

def test_omega_estimate_on_model_signals():
    rng = np.random.default_rng(1)
    profiles = [model_pixel(1.0, rng.uniform(100, 300), 1 / 9, rng.uniform(-3, 3), 0.25, 400)
                for _ in range(8)]
    assert estimate_carrier_omega(np.array(profiles)) == pytest.approx(0.25, abs=1e-3)


def test_omega_estimate_constant_phase():
    prof = np.abs(model_pixel(1.0, 100.0, 1 / 9, 0.0, 0.0, 300)) * np.exp(0.4j)
    assert estimate_carrier_omega(prof) == pytest.approx(0.0, abs=1e-12)
