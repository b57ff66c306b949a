"""Bounded trust-region least squares for small dense problems.

Each iteration solves the damped Gauss-Newton system
``(J^T J + lam * D^T D) p = -J^T r`` with ``lam`` chosen so the scaled step
``||D p||`` fits the trust radius, projects the trial point onto the box and
accepts it when the actual/predicted reduction ratio is positive. ``D`` holds
Jacobian column norms (MINPACK-style, never decreasing), which keeps the
amplitude and lobe-width parameters of the sinc fits on comparable footing.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class Reason(enum.Enum):
    GRADIENT_TOL = "GradientTol"
    STEP_TOL = "StepTol"
    COST_TOL = "CostTol"
    MAX_ITER = "MaxIter"
    NON_FINITE = "NonFinite"


@dataclass
class LeastSquaresProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    n_params: int | None = None

    def __post_init__(self):
        if self.lower is not None:
            self.lower = np.asarray(self.lower, dtype=float)
        if self.upper is not None:
            self.upper = np.asarray(self.upper, dtype=float)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def bounds(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(n, -np.inf) if self.lower is None else self.lower
        hi = np.full(n, np.inf) if self.upper is None else self.upper
        return lo, hi

    def jac(self, x: np.ndarray, r: np.ndarray | None = None) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x), dtype=float)
        return finite_difference_jacobian(self.residual, x)


@dataclass
class SolverReport:
    x: np.ndarray
    cost: float
    iterations: int
    reason: Reason
    success: bool
    nfev: int = 0
    history: list[float] = field(default_factory=list)


def finite_difference_jacobian(fun, x, step=None) -> np.ndarray:
    """Central differences; ``step`` may be a scalar or per-parameter array."""
    x = np.asarray(x, dtype=float)
    if step is None:
        step = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x))
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * h[i]))
    return np.stack(cols, axis=1)


def _damped_step(u, s, vt, radius):
    """Scaled step of length <= radius from the SVD of the scaled Jacobian.

    Returns (step, hit_boundary).
    """
    # u here is U^T r
    tiny = s[0] * 1e-14 if s.size and s[0] > 0 else 0.0
    good = s > tiny
    if np.all(good):
        p = -vt.T @ (u / s)
        if np.linalg.norm(p) <= radius:
            return p, False

    def step(lam):
        denom = s ** 2 + lam
        return -vt.T @ (s * u / denom)

    gnorm = np.linalg.norm(s * u)
    lo, hi = 0.0, gnorm / radius
    lam = hi if not np.all(good) else max(1e-3 * hi, 0.0)
    # Newton iteration on 1/||p(lam)|| - 1/radius, safeguarded by [lo, hi]
    for _ in range(30):
        denom = s ** 2 + lam
        q = s * u / denom
        pn = np.linalg.norm(q)
        if pn == 0.0:
            break
        if abs(pn - radius) <= 0.05 * radius:
            break
        if pn > radius:
            lo = lam
        else:
            hi = lam
        dpn = -np.sum(q ** 2 / denom) / pn
        phi = 1.0 / pn - 1.0 / radius
        dphi = -dpn / pn ** 2
        lam_new = lam - phi / dphi if dphi != 0 else 0.5 * (lo + hi)
        if not (lo < lam_new < hi):
            lam_new = 0.5 * (lo + hi) if hi > lo else hi
        lam = lam_new
    p = step(lam)
    pn = np.linalg.norm(p)
    if pn > radius and pn > 0:
        p *= radius / pn
    return p, True


def solve(problem: LeastSquaresProblem, x0, max_iter: int = 200, gtol: float = 1e-10,
          xtol: float = 1e-10, ftol: float = 1e-10, initial_radius: float | None = None
          ) -> SolverReport:
    x = np.array(x0, dtype=float)
    n = x.size
    lo, hi = problem.bounds(n)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("x0 lies outside the bounds")

    r = np.asarray(problem.residual(x), dtype=float)
    nfev = 1
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at x0")
    if r.size < n:
        raise ValueError(f"need at least {n} residuals, got {r.size}")
    cost = 0.5 * float(r @ r)
    history = [cost]

    J = problem.jac(x, r)
    if not np.all(np.isfinite(J)):
        return SolverReport(x, cost, 0, Reason.NON_FINITE, False, nfev, history)
    d = np.linalg.norm(J, axis=0)
    d[d == 0] = 1.0
    radius = initial_radius if initial_radius else 100.0 * np.linalg.norm(d * x)
    if radius == 0:
        # x0 at the origin: let the first trial be the full Gauss-Newton step
        p_gn = np.linalg.lstsq(J / d, -r, rcond=None)[0]
        radius = max(1.0, float(np.linalg.norm(p_gn)))

    reason = Reason.MAX_ITER
    it = 0
    while it < max_iter:
        it += 1
        g = J.T @ r
        if cost == 0.0:
            reason = Reason.COST_TOL
            break
        # gradient test on the projected gradient, cosine-normalised
        proj = x - np.clip(x - g, lo, hi)
        cols = np.linalg.norm(J, axis=0)
        rn = np.sqrt(2.0 * cost)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(cols > 0, np.abs(proj) / (cols * rn), 0.0)
        if np.max(cosines) <= gtol:
            reason = Reason.GRADIENT_TOL
            break

        d = np.maximum(d, cols)
        js = J / d
        uu, ss, vt = np.linalg.svd(js, full_matrices=False)
        ur = uu.T @ r

        accepted = False
        while not accepted:
            ps, hit = _damped_step(ur, ss, vt, radius)
            x_new = np.clip(x + ps / d, lo, hi)
            step = x_new - x
            r_new = np.asarray(problem.residual(x_new), dtype=float)
            nfev += 1
            if not np.all(np.isfinite(r_new)):
                return SolverReport(x, cost, it, Reason.NON_FINITE, False, nfev, history)
            cost_new = 0.5 * float(r_new @ r_new)
            js_step = J @ step
            pred = -(g @ step + 0.5 * js_step @ js_step)
            actual = cost - cost_new
            rho = actual / pred if pred > 0 else -1.0
            dstep = np.linalg.norm(d * step)

            if rho < 0.25:
                radius = 0.25 * min(radius, max(dstep, 1e-300))
            elif rho > 0.75 and hit:
                radius *= 2.0

            if rho > 1e-4 and cost_new <= cost:
                accepted = True
                x, r, cost = x_new, r_new, cost_new
                history.append(cost)
                J = problem.jac(x, r)
                if not np.all(np.isfinite(J)):
                    return SolverReport(x, cost, it, Reason.NON_FINITE, False, nfev, history)
                if cost == 0.0 or (abs(actual) <= ftol * history[-2] and pred <= ftol * history[-2]):
                    reason = Reason.COST_TOL
                    return SolverReport(x, cost, it, reason, True, nfev, history)
                if dstep <= xtol * (xtol + np.linalg.norm(d * x)):
                    return SolverReport(x, cost, it, Reason.STEP_TOL, True, nfev, history)
            elif radius <= xtol * (xtol + np.linalg.norm(d * x)) or dstep == 0.0:
                return SolverReport(x, cost, it, Reason.STEP_TOL, True, nfev, history)

    success = reason is not Reason.MAX_ITER
    return SolverReport(x, cost, it, reason, success, nfev, history)
