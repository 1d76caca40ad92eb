"""Independent reference computations for the test suite.

Every oracle here deliberately avoids the code paths it checks: plain
quadrature or Monte Carlo instead of the panelized Gauss-Legendre rules, a
complex-amplitude Schrodinger integration instead of the spin-vector sweep,
and a linear solve of the steady-state Bloch equations instead of closed
forms.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import dblquad, quad, solve_ivp


def mc_universal_loss(xi: float, n_samples: int = 10_000_000,
                      seed: int = 123, batches: int = 10) -> tuple[float, float]:
    """Monte Carlo value of the dissipationless ensemble loss and its
    standard error.

    Samples x through x = sin(U), U ~ Uniform(0, pi/2), which absorbs the
    x/sqrt(1-x^2) weight; the estimator is (3 pi / 2) E[y^2 sin(U) K].
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    count = 0
    per = n_samples // batches
    for _ in range(batches):
        u = rng.uniform(0.0, 0.5 * math.pi, per)
        y = rng.uniform(0.0, 1.0, per)
        lam = np.sin(u) ** 2 * y / (np.cos(u) * xi)
        kernel = np.where(lam > 0.0,
                          -np.expm1(-np.maximum(lam, 1e-300))
                          / np.maximum(lam, 1e-300), 1.0)
        f = 1.5 * math.pi * y * y * np.sin(u) * kernel
        total += float(f.sum())
        total_sq += float((f * f).sum())
        count += per
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return mean, math.sqrt(var / count)


def quad_universal_loss(xi: float) -> float:
    """Adaptive 2-D quadrature of the dissipationless ensemble loss."""

    def integrand(y, u):
        lam = math.sin(u) ** 2 * y / (math.cos(u) * xi)
        kernel = -math.expm1(-lam) / lam if lam > 0 else 1.0
        return 3.0 * y * y * math.sin(u) * kernel

    val, _ = dblquad(integrand, 0.0, 0.5 * math.pi, 0.0, 1.0,
                     epsabs=1e-10, epsrel=1e-10)
    return val


def schrodinger_lz_probability(lam: float, edge_factor: float = 60.0,
                               rtol: float = 1e-11) -> float:
    """Landau-Zener flip probability from the two-level Schrodinger equation
    in complex amplitudes (sweep-scaled units, v = 1)."""
    om = math.sqrt(2.0 * lam / math.pi)
    t_edge = max(edge_factor * om, edge_factor)

    def rhs(t, c):
        a = c[0] + 1j * c[1]
        b = c[2] + 1j * c[3]
        da = -0.5j * (t * a + om * b)
        db = -0.5j * (om * a - t * b)
        return [da.real, da.imag, db.real, db.imag]

    # start in the adiabatic ground state at the left edge
    theta = 0.5 * math.atan2(om, t_edge)
    c0 = [math.cos(theta), 0.0, -math.sin(theta), 0.0]
    sol = solve_ivp(rhs, (-t_edge, t_edge), c0, method="DOP853",
                    rtol=rtol, atol=1e-13)
    a = sol.y[0, -1] + 1j * sol.y[1, -1]
    b = sol.y[2, -1] + 1j * sol.y[3, -1]
    # ground state at the right edge is mostly the second diabatic state
    theta_end = 0.5 * math.atan2(om, t_edge)
    g_amp = -math.sin(theta_end) * a + math.cos(theta_end) * b
    return abs(g_amp) ** 2


def steady_state_bloch(rabi: float, detuning: float, gamma1: float,
                       gamma2: float, sz0: float) -> np.ndarray:
    """Fixed point of the Bloch equations by a dense linear solve."""
    mat = np.array([
        [-gamma2, -detuning, 0.0],
        [detuning, -gamma2, rabi],
        [0.0, -rabi, -gamma1],
    ])
    rhs = np.array([0.0, 0.0, -gamma1 * sz0])
    return np.linalg.solve(mat, rhs)


def quasi_steady_absorption(rabi: float, sweep_rate: float, gamma1: float,
                            gamma2: float, sz0: float = 0.5) -> float:
    """Slow-sweep absorption kernel (2v/(pi W)) int Sy dt from the
    steady-state solution integrated over detuning by quadrature."""
    width = math.sqrt(gamma2 ** 2 + rabi ** 2 * gamma2 / max(gamma1, 1e-300))
    span = 2000.0 * max(width, rabi, gamma1)

    def sy_of(delta):
        return steady_state_bloch(rabi, delta, gamma1, gamma2, sz0)[1]

    val, _ = quad(sy_of, -span, span, epsabs=1e-14, epsrel=1e-10, limit=400)
    return 2.0 * val / (math.pi * rabi) if rabi else 0.0


def dos_exponent_full(e: float, ebdot: float, rho1u: float, e0: float,
                      e_max: float, delta0_min: float, gamma1m_emax: float,
                      eb_max: float) -> float:
    """Exponent of the non-equilibrium DOS enhancement from the full double
    integral over standard-TLS energies and tunneling amplitudes, with the
    phonon-bath scaling Gamma_1m(E') = Gamma_1m(e_max) (E'/e_max)^3."""

    def inner(e_prime):
        x_max = math.log(e_prime / delta0_min)
        if x_max <= 0:
            return 0.0
        rate = (gamma1m_emax * (e_prime / e_max) ** 3
                * (delta0_min / e_prime) ** 2 * eb_max / ebdot)
        val, _ = quad(lambda x: math.exp(-rate * math.exp(2.0 * x)),
                      0.0, x_max, epsabs=1e-13, epsrel=1e-10, limit=200)
        return val

    outer, _ = quad(lambda ep: inner(ep) / (e + ep), delta0_min, e0,
                    epsabs=1e-13, epsrel=1e-9, limit=400)
    return (8.0 * math.pi / 3.0) * rho1u * outer


def dos_exponent_simplified(e: float, ebdot: float, rho1u: float, e0: float,
                            e_max: float, delta0_min: float,
                            gamma1m_emax: float, eb_max: float) -> float:
    """Exponent of the simplified (single-integral) DOS enhancement, written
    directly from its definition with plain quadrature."""
    c = math.log(e_max / delta0_min)
    rate = (gamma1m_emax * (delta0_min / e_max) ** 2 * eb_max / ebdot)
    val, _ = quad(lambda x: math.exp(-rate * math.exp(2.0 * x)), 0.0, c,
                  epsabs=1e-13, epsrel=1e-10, limit=200)
    return (8.0 * math.pi / 3.0) * rho1u * math.log1p(e0 / e) * val
