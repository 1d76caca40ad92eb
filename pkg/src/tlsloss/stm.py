"""Ensemble-averaged loss of standard-tunneling-model TLSs.

The normalized non-equilibrium loss is an average of the single-passage
absorption kernel over tunneling parameter x = Delta0/(hbar w0) and dipole
orientation y = cos(theta):

    L = 3 * int_0^1 dy y^2 * int_0^1 x dx / sqrt(1 - x^2) * K(x, y)

with sweep rate v = v0 sqrt(1-x^2) y and Rabi frequency W = W0 x y at each
node. The x endpoint singularity is removed by x = sin(u). In the
dissipationless limit K depends only on Lam = pi W^2/(2 v) and the y integral
has a closed form, which reduces the universal curve to a 1-D integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from . import bloch
from .units import ResonatorContext, TlsSpecies, eac_from_photons, rabi_max, \
    xi_reduced_form

__all__ = [
    "StmEnsemble",
    "LossPoint",
    "universal_loss_closed_form",
    "loss_with_relaxation",
    "saturation_loss",
    "standard_loss_surface",
    "KernelTable",
    "default_kernel_table",
]

# s-contours bounding the quadrature panels; s = Lam * xi at y = 1.
_PANEL_CONTOURS = (0.05, 1.0, 20.0)


@dataclass(frozen=True)
class StmEnsemble:
    """Standard-TLS ensemble: species data, intrinsic loss tangent
    tan_delta0 (which absorbs pi rho p^2 / (3 eps)), and quadrature setup."""

    species: TlsSpecies
    tan_delta0: float
    quadrature_order: int = 32  # per-panel order for the closed-form curve
    x_points: int = 10          # per-panel order of the Bloch x-quadrature
    y_points: int = 12
    n_c: Optional[float] = None   # saturation crossover photon number
    n_min: float = 1e-3           # below this the ensemble is unsaturated

    def __post_init__(self) -> None:
        if self.tan_delta0 <= 0:
            raise ValueError("tan_delta0 must be positive")
        if min(self.quadrature_order, self.x_points, self.y_points) < 8:
            raise ValueError("quadrature orders must be >= 8")


@dataclass(frozen=True)
class LossPoint:
    xi: float
    gamma_ratio: float
    normalized_loss: float


def _u_panels(xi: float) -> list[tuple[float, float]]:
    """Split [0, pi/2] at the contours s(u) = sin^2(u)/cos(u) / xi = const,
    so each panel sees a single scale of the kernel."""
    cuts = [0.0]
    for c in _PANEL_CONTOURS:
        cx = c * xi
        w = 0.5 * (-cx + math.sqrt(cx * cx + 4.0))
        w = min(1.0, max(w, 0.0))
        u = math.acos(w)
        if 1e-9 < u < 0.5 * math.pi - 1e-9:
            cuts.append(u)
    cuts.append(0.5 * math.pi)
    cuts = sorted(set(cuts))
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b - a > 1e-12]


@lru_cache(maxsize=64)
def _leggauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ws = np.polynomial.legendre.leggauss(order)
    xs.setflags(write=False)
    ws.setflags(write=False)
    return xs, ws


def _panel_nodes(xi: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ws = _leggauss(order)
    panels = _u_panels(xi)
    a = np.array([p[0] for p in panels])
    b = np.array([p[1] for p in panels])
    us = 0.5 * (b - a)[:, None] * xs[None, :] + 0.5 * (a + b)[:, None]
    wts = 0.5 * (b - a)[:, None] * ws[None, :]
    return us.ravel(), wts.ravel()


def _h_saturable(s: np.ndarray) -> np.ndarray:
    """Closed form of 3 * int_0^1 y^2 K(Lam = s y) dy for the
    dissipationless kernel K = (1 - exp(-Lam))/Lam."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = s < 1e-3
    ss = s[small]
    out[small] = 1.0 - 3.0 * ss / 8.0 + ss * ss / 10.0 - ss ** 3 / 48.0
    sb = s[~small]
    bracket = 0.5 - (1.0 - (1.0 + sb) * np.exp(-sb)) / (sb * sb)
    out[~small] = 3.0 * bracket / sb
    return out


def universal_loss_closed_form(xi: float, order: int = 32) -> float:
    """Normalized dissipationless loss as a universal function of xi.

    Monotone nondecreasing, 0 at xi = 0, and approaching 1 as xi -> inf.
    """
    if xi < 0:
        raise ValueError("xi must be >= 0")
    if xi == 0.0:
        return 0.0
    u, w = _panel_nodes(xi, order)
    sin_u = np.sin(u)
    s = sin_u * sin_u / (np.cos(u) * xi)
    return float(np.sum(w * sin_u * _h_saturable(s)))


def loss_with_relaxation(xi: float, gamma_ratio: float, *,
                         x_points: int = 10, y_points: int = 12,
                         sz0: float = 0.5, rel_tol: float = 1e-8,
                         abs_tol: float = 1e-12,
                         kernel: Optional[Callable] = None) -> float:
    """Normalized loss from the full Bloch dynamics, Eq.-(4)-style.

    ``gamma_ratio`` is Gamma_1m / W_R0; each quadrature node runs a resonant
    passage with Gamma_1 = Gamma_1m x^2 and Gamma_2 = Gamma_1/2. With
    gamma_ratio = 0 this reproduces :func:`universal_loss_closed_form`.
    ``kernel`` overrides the per-node passage kernel (e.g. a
    :class:`KernelTable` lookup) and receives scaled arrays
    (om_t, g1_t, g2_t, sz0).
    """
    if xi <= 0:
        raise ValueError("xi must be positive (the xi = 0 limit is the "
                         "saturated steady state)")
    if gamma_ratio < 0:
        raise ValueError("gamma_ratio must be >= 0")
    v0 = 0.5 * math.pi * xi  # in units of W_R0 = 1
    u, wu = _panel_nodes(xi, x_points)
    y, wy = _leggauss(y_points)
    y = 0.5 * (y + 1.0)
    wy = 0.5 * wy

    sin_u = np.sin(u)
    cos_u = np.cos(u)
    uu, yy = np.meshgrid(sin_u, y, indexing="ij")
    cc = cos_u[:, None]
    v_node = v0 * cc * yy
    om_t = uu * yy / np.sqrt(v_node)
    g1_t = gamma_ratio * uu * uu / np.sqrt(v_node)
    g2_t = 0.5 * g1_t

    if kernel is None:
        k_vals = np.empty_like(om_t)
        for i in range(om_t.shape[0]):
            for j in range(om_t.shape[1]):
                k_vals[i, j] = bloch.passage_kernel(
                    om_t[i, j], g1_t[i, j], g2_t[i, j], sz0, rel_tol, abs_tol)
    else:
        k_vals = kernel(om_t, g1_t, g2_t, sz0)

    integrand = 3.0 * (yy * yy) * uu * k_vals
    return float(np.einsum("i,j,ij->", wu, wy, integrand))


def loss_with_relaxation_batch(xi: np.ndarray, gamma_ratio: np.ndarray,
                               kernel: Callable, x_points: int = 8,
                               y_points: int = 10,
                               sz0: float = 0.5) -> np.ndarray:
    """Vectorized :func:`loss_with_relaxation` for fitting loops.

    All quadrature nodes of all points are evaluated through a single call to
    ``kernel`` (typically a :class:`KernelTable` lookup); per-point panel
    layouts may differ, so node blocks are ragged and reduced with
    ``np.add.reduceat``.
    """
    xi = np.asarray(xi, dtype=float)
    gamma_ratio = np.asarray(gamma_ratio, dtype=float)
    if xi.shape != gamma_ratio.shape:
        raise ValueError("xi and gamma_ratio must align")
    if np.any(xi <= 0) or np.any(gamma_ratio < 0):
        raise ValueError("xi must be positive and gamma_ratio nonnegative")
    y, wy = _leggauss(y_points)
    y = 0.5 * (y + 1.0)
    wy = 0.5 * wy

    u_list, wu_list, offsets = [], [], [0]
    for x in xi.ravel():
        u, wu = _panel_nodes(float(x), x_points)
        u_list.append(u)
        wu_list.append(wu)
        offsets.append(offsets[-1] + u.size)
    u_all = np.concatenate(u_list)
    wu_all = np.concatenate(wu_list)
    v0_all = np.repeat(0.5 * math.pi * xi.ravel(),
                       np.diff(offsets))
    g_all = np.repeat(gamma_ratio.ravel(), np.diff(offsets))

    sin_u = np.sin(u_all)[:, None]
    cos_u = np.cos(u_all)[:, None]
    yy = y[None, :]
    v_node = v0_all[:, None] * cos_u * yy
    sqrt_v = np.sqrt(v_node)
    om_t = sin_u * yy / sqrt_v
    g1_t = g_all[:, None] * sin_u * sin_u / sqrt_v
    k_vals = kernel(om_t, g1_t, 0.5 * g1_t, sz0)
    per_u = (3.0 * sin_u[:, 0] * wu_all) * ((yy * yy * k_vals) @ wy)
    sums = np.add.reduceat(per_u, offsets[:-1])
    return sums.reshape(xi.shape)


def saturation_loss(n: float, tan_delta0: float, n_c: float) -> float:
    """Steady-state saturated loss tan_delta0 / sqrt(1 + n/n_c)."""
    if n < 0:
        raise ValueError("photon number must be >= 0")
    if n_c <= 0:
        raise ValueError("n_c must be positive")
    return tan_delta0 / math.sqrt(1.0 + n / n_c)


def standard_loss_batch(ebdot: np.ndarray, n: np.ndarray, dipole: float,
                        gamma1_max: float, tan_delta0: float,
                        ctx: ResonatorContext, kernel: Callable,
                        n_min: float = 1e-3,
                        n_c: Optional[float] = None,
                        x_points: int = 8, y_points: int = 10) -> np.ndarray:
    """tan_delta1 over aligned (ebdot, n) arrays through a batched kernel.

    Unsaturated rows (n < n_min) return tan_delta0; zero-rate rows use the
    saturation law when ``n_c`` is given and raise otherwise.
    """
    ebdot = np.asarray(ebdot, dtype=float)
    n = np.asarray(n, dtype=float)
    out = np.full(ebdot.shape, tan_delta0)
    zero_rate = (ebdot == 0) & (n >= n_min)
    if np.any(zero_rate):
        if n_c is None:
            raise ValueError("zero-rate rows need the saturation crossover n_c")
        out[zero_rate] = tan_delta0 / np.sqrt(1.0 + n[zero_rate] / n_c)
    act = (n >= n_min) & (ebdot > 0)
    if np.any(act):
        species = TlsSpecies(dipole=dipole, gamma1_max=gamma1_max)
        pref = 2.0 * ctx.permittivity * ctx.volume / (
            math.pi * ctx.omega0 * dipole)
        xi = pref * ebdot[act] / n[act]
        eac1 = eac_from_photons(1.0, ctx)
        om0 = rabi_max(species, eac1) * np.sqrt(n[act])
        f = loss_with_relaxation_batch(xi, gamma1_max / om0, kernel=kernel,
                                       x_points=x_points, y_points=y_points)
        out[act] = tan_delta0 * np.minimum(f, 1.0)
    return out


class KernelTable:
    """Bicubic-spline cache of the passage kernel on a (log W/sqrt(v),
    log Gamma1/sqrt(v)) grid, plus a dedicated gamma = 0 row.

    Queries outside the grid fall back to the same asymptotic formulas the
    direct kernel uses, so the table agrees with
    :func:`tlsloss.bloch.passage_kernel` everywhere.
    """

    def __init__(self, om_lo: float = 1e-3, n_om: int = 56,
                 g_lo: float = 1e-4, n_g: int = 48,
                 rel_tol: float = 1e-8, abs_tol: float = 1e-12):
        from scipy.interpolate import CubicSpline, RectBivariateSpline

        om_hi = math.sqrt(2.0 * bloch.LAMBDA_CAP / math.pi)
        g_hi = bloch.GAMMA_TILDE_CAP
        self.om_lo, self.om_hi = om_lo, om_hi
        self.g_lo, self.g_hi = g_lo, g_hi
        self._sz0 = 0.5
        log_om = np.linspace(math.log10(om_lo), math.log10(om_hi), n_om)
        log_g = np.linspace(math.log10(g_lo), math.log10(g_hi), n_g)
        vals = np.empty((n_om, n_g))
        vals0 = np.empty(n_om)
        for i, lo in enumerate(log_om):
            om = 10.0 ** lo
            vals0[i] = bloch.passage_kernel(om, 0.0, 0.0, self._sz0,
                                            rel_tol, abs_tol)
            for j, lg in enumerate(log_g):
                g1 = 10.0 ** lg
                vals[i, j] = bloch.passage_kernel(om, g1, 0.5 * g1, self._sz0,
                                                  rel_tol, abs_tol)
        self._log_om = log_om
        self._log_g = log_g
        self._spline = RectBivariateSpline(log_om, log_g, vals, kx=3, ky=3)
        self._spline0 = CubicSpline(log_om, vals0)

    def kernel(self, om_t, g1_t, g2_t, sz0: float = 0.5) -> np.ndarray:
        """Vectorized kernel lookup; same signature as the direct kernel
        broadcast over arrays. Assumes the g2 = g1/2 convention the table
        was built with."""
        om_t = np.atleast_1d(np.asarray(om_t, dtype=float))
        g1_t = np.atleast_1d(np.asarray(g1_t, dtype=float))
        om_t, g1_t = np.broadcast_arrays(om_t, g1_t)
        shape = om_t.shape
        om = om_t.ravel().copy()
        g1 = g1_t.ravel().copy()
        out = np.empty(om.size)

        lam = 0.5 * math.pi * om * om
        asym = (lam > bloch.LAMBDA_CAP) | (g1 > self.g_hi)
        if np.any(asym):
            g2 = 0.5 * g1[asym]
            coh = np.where(lam[asym] > 0,
                           2.0 * sz0 * -np.expm1(-lam[asym]) / lam[asym],
                           2.0 * sz0)
            qs = np.zeros_like(coh)
            gg = g1[asym] > 0
            qs[gg] = 2.0 * sz0 * g2[gg] / np.sqrt(
                g2[gg] ** 2 + om[asym][gg] ** 2 * g2[gg] / g1[asym][gg])
            out[asym] = np.minimum(coh + qs, 2.0 * sz0)

        rest = ~asym
        if np.any(rest):
            omr = np.clip(om[rest], self.om_lo, self.om_hi)
            g1r = g1[rest]
            k0 = self._spline0(np.log10(omr))
            kk = np.where(g1r > 0,
                          self._spline.ev(np.log10(omr),
                                          np.log10(np.clip(g1r, self.g_lo,
                                                           self.g_hi))),
                          k0)
            # below the tabulated gamma range, blend linearly toward gamma=0
            tiny = (g1r > 0) & (g1r < self.g_lo)
            if np.any(tiny):
                frac = g1r[tiny] / self.g_lo
                kk[tiny] = k0[tiny] * (1.0 - frac) + kk[tiny] * frac
            out[rest] = kk * (2.0 * sz0)  # table built at sz0 = 1/2
        return out.reshape(shape)

    def validate(self, n_random: int = 20, seed: int = 7,
                 rel_tol: float = 1e-8, abs_tol: float = 1e-12) -> float:
        """Max |table - direct| / max(direct, 1e-3) over random probe points."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_random):
            om = 10.0 ** rng.uniform(math.log10(self.om_lo),
                                     math.log10(self.om_hi))
            g1 = 10.0 ** rng.uniform(math.log10(self.g_lo),
                                     math.log10(self.g_hi))
            direct = bloch.passage_kernel(om, g1, 0.5 * g1, self._sz0,
                                          rel_tol, abs_tol)
            approx = float(self.kernel(om, g1, 0.5 * g1, self._sz0)[0])
            worst = max(worst, abs(approx - direct) / max(direct, 1e-3))
        return worst


_DEFAULT_TABLE: Optional[KernelTable] = None


def default_kernel_table() -> KernelTable:
    """Build (once per process) and return the shared kernel table."""
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = KernelTable()
    return _DEFAULT_TABLE


def standard_loss_surface(ensemble: StmEnsemble, ebdot_grid: Sequence[float],
                          n_grid: Sequence[float], ctx: ResonatorContext,
                          pac_dbm_grid: Optional[Sequence[float]] = None,
                          kernel: Optional[Callable] = None):
    """Standard-TLS loss tangent over an (ebdot, n) grid.

    Returns a :class:`tlsloss.datasets.LossSurface`. Rows at photon numbers
    below ``ensemble.n_min`` use the unsaturated branch tan_delta0; rows at
    ebdot = 0 use the steady-state saturation law (which requires
    ``ensemble.n_c``).
    """
    from .datasets import LossSurface

    ebdot_grid = np.asarray(ebdot_grid, dtype=float)
    n_grid = np.asarray(n_grid, dtype=float)
    if ebdot_grid.size == 0 or n_grid.size == 0:
        raise ValueError("grids must be nonempty")
    if pac_dbm_grid is None:
        pac = np.full(n_grid.shape, np.nan)
    else:
        pac = np.asarray(pac_dbm_grid, dtype=float)
        if pac.shape != n_grid.shape:
            raise ValueError("pac_dbm_grid must align with n_grid")

    rows_pac, rows_eb, rows_n, rows_tan = [], [], [], []
    for j, n in enumerate(n_grid):
        for eb in ebdot_grid:
            rows_pac.append(pac[j])
            rows_eb.append(eb)
            rows_n.append(n)
            rows_tan.append(standard_loss_point(ensemble, eb, n, ctx,
                                                kernel=kernel))
    return LossSurface(pac_dbm=np.array(rows_pac), ebdot=np.array(rows_eb),
                       n_photons=np.array(rows_n),
                       tan_delta=np.array(rows_tan))


def standard_loss_point(ensemble: StmEnsemble, ebdot: float, n: float,
                        ctx: ResonatorContext,
                        kernel: Optional[Callable] = None) -> float:
    """tan_delta1 at one (ebdot, n) point."""
    if ebdot < 0 or n < 0:
        raise ValueError("ebdot and n must be >= 0")
    if n < ensemble.n_min:
        return ensemble.tan_delta0
    if ebdot == 0.0:
        if ensemble.n_c is None:
            raise ValueError("ebdot = 0 rows need the saturation crossover "
                             "n_c on the ensemble")
        return saturation_loss(n, ensemble.tan_delta0, ensemble.n_c)
    xi = xi_reduced_form(ensemble.species, ebdot, n, ctx)
    omega_r0 = rabi_max(ensemble.species, eac_from_photons(n, ctx))
    gamma_ratio = ensemble.species.gamma1_max / omega_r0
    factor = loss_with_relaxation(xi, gamma_ratio,
                                  x_points=ensemble.x_points,
                                  y_points=ensemble.y_points, kernel=kernel)
    return ensemble.tan_delta0 * min(factor, 1.0)
