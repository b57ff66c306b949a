"""Lateral deconvolution: Lucy-Richardson and TV-regularised blind deconvolution.

All convolutions use symmetric (edge-repeating) reflection at the image
border. ``blur`` and ``blur_adjoint`` are exact adjoints of each other, which
both solvers rely on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom
from scipy.signal import convolve2d

log = logging.getLogger(__name__)

LR_FLOOR = 1e-12


# -- kernels -------------------------------------------------------------------

def check_kernel(h, atol: float = 1e-9) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be odd-sized square, got shape {h.shape}")
    if np.any(h < 0):
        raise ValueError("kernel has negative entries")
    if abs(h.sum() - 1.0) > atol:
        raise ValueError(f"kernel sums to {h.sum()}, expected 1")
    return h


def normalize_kernel(h) -> np.ndarray:
    h = np.clip(np.asarray(h, dtype=float), 0.0, None)
    s = h.sum()
    if s <= 0:
        raise ValueError("kernel has no positive mass")
    return h / s


def delta_kernel(size: int) -> np.ndarray:
    h = np.zeros((size, size))
    h[size // 2, size // 2] = 1.0
    return h


def gaussian_kernel(size: int, sigma_px: float) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if sigma_px <= 0:
        raise ValueError("sigma must be positive")
    t = np.arange(size) - size // 2
    with np.errstate(under="ignore"):
        g = np.exp(-0.5 * (t / sigma_px) ** 2)
    h = np.outer(g, g)
    return h / h.sum()


def fwhm_to_sigma(fwhm):
    return fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))


def center_kernel(h: np.ndarray) -> np.ndarray:
    """Shift ``h`` by whole pixels so its centroid is nearest the centre."""
    n = h.shape[0]
    yy, xx = np.mgrid[:n, :n]
    cy = int(np.round((h * yy).sum() / h.sum())) - n // 2
    cx = int(np.round((h * xx).sum() / h.sum())) - n // 2
    out = np.zeros_like(h)
    ys = slice(max(0, -cy), min(n, n - cy))
    xs = slice(max(0, -cx), min(n, n - cx))
    out[ys, xs] = h[max(0, cy):min(n, n + cy), max(0, cx):min(n, n + cx)]
    return normalize_kernel(out)


def resize_kernel(h: np.ndarray, size: int) -> np.ndarray:
    """Resample ``h`` onto an odd ``size`` grid, keeping it centred and normalised."""
    if h.shape[0] == size:
        return h.copy()
    out = zoom(h, size / h.shape[0], order=1)
    if out.shape[0] != size:
        fixed = np.zeros((size, size))
        m = min(size, out.shape[0])
        o_out = (out.shape[0] - m) // 2
        o_fix = (size - m) // 2
        fixed[o_fix:o_fix + m, o_fix:o_fix + m] = out[o_out:o_out + m, o_out:o_out + m]
        out = fixed
    out = np.clip(out, 0.0, None)
    if out.sum() <= 0:
        return delta_kernel(size)
    return center_kernel(out / out.sum())


# -- convolution with symmetric boundary ---------------------------------------

def _fold(a: np.ndarray, n: int, r: int, axis: int) -> np.ndarray:
    """Adjoint of symmetric padding by ``r`` along ``axis``."""
    idx = np.pad(np.arange(n), r, mode="symmetric")
    a = np.moveaxis(a, axis, 0)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, idx, a)
    return np.moveaxis(out, 0, axis)


def blur(img: np.ndarray, h: np.ndarray) -> np.ndarray:
    r = h.shape[0] // 2
    padded = np.pad(img, r, mode="symmetric")
    return convolve2d(padded, h, mode="valid")


def blur_adjoint(img: np.ndarray, h: np.ndarray) -> np.ndarray:
    r = h.shape[0] // 2
    full = convolve2d(img, h[::-1, ::-1], mode="full")
    ny, nx = img.shape
    return _fold(_fold(full, ny, r, 0), nx, r, 1)


def _patches(img: np.ndarray, size: int) -> np.ndarray:
    """Matrix ``P`` with ``blur(img, h).ravel() == P @ h.ravel()``."""
    r = size // 2
    padded = np.pad(img, r, mode="symmetric")
    ny, nx = img.shape
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    # convolution flips the kernel
    return win[:, :, ::-1, ::-1].reshape(ny * nx, size * size)


# -- Lucy-Richardson --------------------------------------------------------------

def lucy_richardson(image, h, iters: int = 50, callback=None) -> np.ndarray:
    """Multiplicative update ``x <- x * H^T(y / Hx)``, starting from ``x = y``."""
    y = np.asarray(getattr(image, "values", image), dtype=float)
    h = check_kernel(h)
    if np.any(y < 0):
        raise ValueError("Lucy-Richardson needs a non-negative image")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    x = y.copy()
    for k in range(iters):
        est = blur(x, h)
        ratio = y / np.maximum(est, LR_FLOOR)
        x = x * blur_adjoint(ratio, h)
        if callback is not None:
            callback(k, x)
    return x


# -- TV blind deconvolution ------------------------------------------------------

def grad(x: np.ndarray) -> np.ndarray:
    """Forward differences with zero flux at the far border, shape (2, ny, nx)."""
    g = np.zeros((2,) + x.shape)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`."""
    py, px = p
    d = np.zeros(py.shape)
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    return d


def tv_norm(x: np.ndarray) -> float:
    g = grad(x)
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def objective(x, h, y, lam) -> float:
    """``||x * h - y||_1 + lam * TV(x)`` (isotropic TV)."""
    return float(np.abs(blur(x, h) - y).sum() + lam * tv_norm(x))


def tv_l1_deconvolve(y, h, lam, iters=200, x0=None) -> np.ndarray:
    """Non-blind step: primal-dual iterations for ``min ||h*x - y||_1 + lam TV(x), x >= 0``."""
    x = (y if x0 is None else x0).astype(float).copy()
    xbar = x.copy()
    p = np.zeros_like(y)
    q = np.zeros((2,) + y.shape)
    # ||K||^2 <= ||H||^2 + ||grad||^2 <= 1 + 8
    tau = sigma = 0.99 / 3.0
    for _ in range(iters):
        p = np.clip(p + sigma * (blur(xbar, h) - y), -1.0, 1.0)
        q = q + sigma * grad(xbar)
        nq = np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2) / lam)
        q = q / nq
        x_new = np.maximum(x - tau * (blur_adjoint(p, h) - div(q)), 0.0)
        xbar = 2.0 * x_new - x
        x = x_new
    return x


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {h >= 0, sum h = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def estimate_kernel(x, y, size, h0=None, iters=200, reg=1e-3) -> np.ndarray:
    """Kernel step: simplex-constrained least squares on image gradients.

    Minimises ``sum_d ||d(x) * h - d(y)||^2 + reg ||h||^2`` over unit-sum,
    non-negative ``h`` by accelerated projected gradient.
    """
    gx, gy = grad(x), grad(y)
    P = np.concatenate([_patches(gx[0], size), _patches(gx[1], size)])
    b = np.concatenate([gy[0].ravel(), gy[1].ravel()])
    A = P.T @ P
    scale = np.trace(A) / A.shape[0] if np.trace(A) > 0 else 1.0
    A = A + reg * scale * np.eye(A.shape[0])
    c = P.T @ b
    L = np.linalg.eigvalsh(A)[-1]
    h = (delta_kernel(size) if h0 is None else h0).ravel().copy()
    z, t = h.copy(), 1.0
    for _ in range(iters):
        h_new = _project_simplex(z - (A @ z - c) / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = h_new + (t - 1.0) / t_new * (h_new - h)
        h, t = h_new, t_new
    return h.reshape(size, size)


@dataclass
class BlindResult:
    image: np.ndarray
    kernel: np.ndarray
    history: list[float] = field(default_factory=list)
    diverged: bool = False
    scale_factor: float = 1.0

    def __iter__(self):
        return iter((self.image, self.kernel))


def prune_kernel(h: np.ndarray, rel_threshold: float = 0.05) -> np.ndarray:
    """Zero entries below ``rel_threshold * max`` and keep only the
    8-connected component holding the peak."""
    from scipy.ndimage import label

    mask = h >= rel_threshold * h.max()
    lab, _ = label(mask, structure=np.ones((3, 3)))
    peak = np.unravel_index(np.argmax(h), h.shape)
    return normalize_kernel(np.where(lab == lab[peak], h, 0.0))


def _odd(n: float) -> int:
    n = max(3, int(round(n)))
    return n if n % 2 else n + 1


def blind_tv_deconvolve(image, lam: float = 2e-3, kernel_size: int = 15, scales: int = 4,
                        inner_iters: int = 30, outer_iters: int = 10,
                        kernel_iters: int = 200, final_iters: int = 300,
                        kernel_lam_boost: float = 8.0) -> BlindResult:
    """Joint estimate of a sharp image and blur kernel minimising
    ``||I_d * h - I||_1 + lam * TV(I_d)``.

    The image is normalised to unit maximum internally, so ``lam`` is
    relative to the peak intensity. Coarse-to-fine over ``scales`` pyramid
    levels; at every level the image and kernel steps alternate
    ``outer_iters`` times. Kernel estimation uses a stronger TV weight
    (``lam * kernel_lam_boost``) so that the latent image keeps only salient
    edges. At the finest level the image and kernel updates of an alternation
    are kept only if they lower the objective, so ``history`` is
    non-increasing; the loop ends when neither helps. ``diverged`` records
    that some full alternation would have raised the objective.
    """
    y_full = np.asarray(getattr(image, "values", image), dtype=float)
    if np.any(y_full < 0):
        raise ValueError("blind deconvolution needs a non-negative image")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd and >= 3")
    peak = y_full.max()
    scale_factor = peak if peak > 0 else 1.0
    y_full = y_full / scale_factor

    h = None
    x = None
    history: list[float] = []
    diverged = False
    for level in range(scales - 1, -1, -1):
        f = 0.5 ** level
        y = zoom(y_full, f, order=1) if level else y_full
        ks = _odd(kernel_size * f) if level else kernel_size
        if ks > min(y.shape) and level:
            continue
        h = gaussian_kernel(ks, max(ks / 6.0, 0.5)) if h is None else resize_kernel(h, ks)
        x = y.copy() if x is None else np.clip(zoom(x, np.array(y.shape) / np.array(x.shape), order=1), 0, None)
        lam_k = lam * kernel_lam_boost
        finest = level == 0
        best = (objective(x, h, y, lam_k), x, h)
        if finest:
            history.append(best[0])
        for _ in range(outer_iters):
            x_new = tv_l1_deconvolve(y, h, lam_k, inner_iters, x0=x)
            h_new = prune_kernel(estimate_kernel(x_new, y, ks, h0=h, iters=kernel_iters))
            if not finest:
                x, h = x_new, h_new
                continue
            # finest level: keep whichever half-steps lower the objective
            prev = history[-1]
            cand = [(objective(x_new, h_new, y, lam_k), x_new, h_new),
                    (objective(x_new, h, y, lam_k), x_new, h),
                    (objective(x, h_new, y, lam_k), x, h_new)]
            if cand[0][0] > prev:
                diverged = True
            obj, bx, bh = min(cand, key=lambda c: c[0])
            if obj >= prev:
                break
            x, h = bx, bh
            history.append(obj)
            if prev - obj <= 1e-4 * prev:
                break
        h = center_kernel(h)

    final = tv_l1_deconvolve(y_full, h, lam, final_iters, x0=x)
    return BlindResult(final * scale_factor, h, history, diverged, scale_factor)


def extract_kernel(result) -> np.ndarray:
    """Kernel from a blind run (or any array), clipped and renormalised."""
    h = result.kernel if isinstance(result, BlindResult) else result
    return normalize_kernel(h)
