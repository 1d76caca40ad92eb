"""Damped Gauss-Newton least squares with box constraints and multi-start.

Levenberg-style adaptive damping on the normal equations, numerical Jacobian
by central differences, convergence when the relative step drops below
``step_tol``. Bounded problems are solved in an internal logit/log transform
so the iterates stay strictly inside the box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["FitResult", "FitConvergenceError", "least_squares", "multistart"]


class FitConvergenceError(RuntimeError):
    """Raised when the iteration cap or damping range is exhausted; carries
    the best point seen so far and the residual history."""

    def __init__(self, message: str, best: "FitResult"):
        super().__init__(message)
        self.best = best


@dataclass
class FitResult:
    x: np.ndarray
    cost: float                 # sum of squared residuals
    residual_norm: float
    n_iter: int
    converged: bool
    history: list = field(default_factory=list)  # cost per iteration
    sigma: Optional[np.ndarray] = None           # 1-sigma from the Jacobian

    def as_dict(self) -> dict:
        return {
            "x": [float(v) for v in self.x],
            "cost": float(self.cost),
            "residual_norm": float(self.residual_norm),
            "n_iter": self.n_iter,
            "converged": self.converged,
            "sigma": None if self.sigma is None else
                     [float(s) for s in self.sigma],
        }


def _to_internal(x, lo, hi):
    z = np.empty_like(x)
    for i, (v, a, b) in enumerate(zip(x, lo, hi)):
        if np.isfinite(a) and np.isfinite(b):
            p = (v - a) / (b - a)
            p = min(max(p, 1e-12), 1 - 1e-12)
            z[i] = math.log(p / (1 - p))
        elif np.isfinite(a):
            z[i] = math.log(max(v - a, 1e-300))
        elif np.isfinite(b):
            z[i] = math.log(max(b - v, 1e-300))
        else:
            z[i] = v
    return z


def _from_internal(z, lo, hi):
    x = np.empty_like(z)
    for i, (v, a, b) in enumerate(zip(z, lo, hi)):
        if np.isfinite(a) and np.isfinite(b):
            x[i] = a + (b - a) / (1.0 + math.exp(-v))
        elif np.isfinite(a):
            x[i] = a + math.exp(v)
        elif np.isfinite(b):
            x[i] = b - math.exp(v)
        else:
            x[i] = v
    return x


def least_squares(residual: Callable[[np.ndarray], np.ndarray],
                  x0: Sequence[float],
                  bounds: Optional[Sequence[tuple[float, float]]] = None,
                  step_tol: float = 1e-10, max_iter: int = 200,
                  diff_rel: float = 1e-6,
                  raise_on_cap: bool = False) -> FitResult:
    """Minimize ||residual(x)||^2 from ``x0``.

    ``bounds`` is a per-parameter (lo, hi) sequence; use +-inf for open
    sides. With ``raise_on_cap`` the iteration cap raises
    :class:`FitConvergenceError` instead of returning the best point.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if bounds is None:
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
    else:
        lo = np.array([b[0] for b in bounds], dtype=float)
        hi = np.array([b[1] for b in bounds], dtype=float)
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("x0 violates bounds")

    def res_internal(z):
        return np.asarray(residual(_from_internal(z, lo, hi)), dtype=float)

    z = _to_internal(x0, lo, hi)
    r = res_internal(z)
    if r.ndim != 1:
        raise ValueError("residual must return a 1-D array")
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        jac = _jacobian(res_internal, z, r, diff_rel)
        g = jac.T @ r
        jtj = jac.T @ jac
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(np.maximum(
                    np.diag(jtj), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            z_new = z + step
            try:
                r_new = res_internal(z_new)
                with np.errstate(over="ignore", invalid="ignore"):
                    cost_new = float(r_new @ r_new)
            except (ValueError, ArithmeticError):
                cost_new = math.inf
                r_new = r
            if np.isfinite(cost_new) and cost_new <= cost:
                rel_step = float(np.max(np.abs(step)
                                        / np.maximum(np.abs(z_new), 1.0)))
                z, r, cost = z_new, r_new, cost_new
                lam = max(lam / 3.0, 1e-14)
                accepted = True
                history.append(cost)
                if rel_step < step_tol:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e14:
                break
        if converged:
            break
        if not accepted:
            # damping exhausted: no descent within floating-point resolution
            converged = True
            break

    x = _from_internal(z, lo, hi)
    sigma = _sigma_estimate(residual, x, lo, hi, r, diff_rel)
    result = FitResult(x=x, cost=cost, residual_norm=math.sqrt(cost),
                       n_iter=n_iter, converged=converged, history=history,
                       sigma=sigma)
    if not converged and raise_on_cap:
        raise FitConvergenceError(
            f"no convergence within {max_iter} iterations", result)
    return result


def _jacobian(fun, z, r0, diff_rel):
    n = z.size
    m = r0.size
    jac = np.empty((m, n))
    for j in range(n):
        h = diff_rel * max(abs(z[j]), 1.0)
        zp = z.copy()
        zm = z.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (fun(zp) - fun(zm)) / (2.0 * h)
    return jac


def _sigma_estimate(residual, x, lo, hi, r, diff_rel):
    """1-sigma parameter uncertainties from the Jacobian in the external
    (physical) coordinates; None when the normal matrix is singular."""
    n = x.size
    m = r.size
    if m <= n:
        return None
    jac = np.empty((m, n))
    for j in range(n):
        h = diff_rel * max(abs(x[j]), 1e-30)
        xp = x.copy()
        xm = x.copy()
        xp[j] = min(xp[j] + h, hi[j]) if np.isfinite(hi[j]) else xp[j] + h
        xm[j] = max(xm[j] - h, lo[j]) if np.isfinite(lo[j]) else xm[j] - h
        dx = xp[j] - xm[j]
        if dx == 0:
            return None
        jac[:, j] = (np.asarray(residual(xp)) - np.asarray(residual(xm))) / dx
    try:
        cov = np.linalg.inv(jac.T @ jac) * (float(r @ r) / (m - n))
    except np.linalg.LinAlgError:
        return None
    d = np.diag(cov)
    if np.any(d < 0):
        return None
    return np.sqrt(d)


def multistart(residual: Callable[[np.ndarray], np.ndarray],
               bounds: Sequence[tuple[float, float]],
               n_starts: int = 8, seed: int = 0, log_scale: bool = True,
               x0: Optional[Sequence[float]] = None,
               **kwargs) -> FitResult:
    """Run :func:`least_squares` from ``n_starts`` log-uniform draws inside
    the box (plus ``x0`` when given); best cost wins, ties broken by the
    smaller parameter norm. Deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    starts = []
    if x0 is not None:
        starts.append(np.asarray(x0, dtype=float))
    for _ in range(n_starts):
        if log_scale and np.all(lo > 0):
            draw = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        else:
            draw = rng.uniform(lo, hi)
        starts.append(draw)
    best: Optional[FitResult] = None
    for start in starts:
        try:
            result = least_squares(residual, start, bounds=bounds, **kwargs)
        except (FitConvergenceError, ValueError, ArithmeticError):
            continue
        if best is None or result.cost < best.cost or (
                result.cost == best.cost
                and np.linalg.norm(result.x) < np.linalg.norm(best.x)):
            best = result
    if best is None:
        raise FitConvergenceError("every start failed", FitResult(
            x=np.asarray(starts[0]), cost=math.inf, residual_norm=math.inf,
            n_iter=0, converged=False))
    return best
