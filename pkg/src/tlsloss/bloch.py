"""Single-TLS resonant passage: analytic Landau-Zener probability and
numerical integration of the rotating-frame Bloch equations with relaxation.

The spin vector S (|S| <= 1/2) obeys

    dSx/dt = -d(t) Sy - G2 Sx
    dSy/dt = +d(t) Sx + W Sz - G2 Sy
    dSz/dt = -W Sy - G1 (Sz - Sz0)

with detuning d(t) = v (t - t0) and Rabi frequency W. The sign convention is
fixed so that photon absorption gives a positive Sy; with that choice the
exact identity  integral(Sy dt) = 2 Sz0 P_flip / W  holds at G1 = G2 = 0.

The integrator works in sweep-scaled units tau = sqrt(v) t, where the system
depends only on W/sqrt(v) and G/sqrt(v). A smooth cosine taper suppresses the
conditionally convergent coherent ringing at the window edges, and the
truncated quasi-steady Lorentzian wings are restored analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

__all__ = [
    "SweepConfig",
    "BlochTrace",
    "IntegrationError",
    "lz_adiabatic_probability",
    "integrate_bloch_sweep",
    "single_passage_absorption",
    "passage_kernel",
    "steady_state_spin",
    "dump_trace_csv",
]

# Detuning reach of the integration window, in units of the local scales:
# |v| * t_edge >= max(EDGE_RABI * W, EDGE_GAMMA * G1, EDGE_FRESNEL * sqrt(v)).
EDGE_RABI = 50.0
EDGE_GAMMA = 15.0
EDGE_FRESNEL = 50.0
TAPER_START = 0.7  # fraction of the window where the cosine taper begins

# Beyond these the passage is evaluated by asymptotic formulas instead of the
# ODE: deep-adiabatic gap parameter and overdamped relaxation strength.
LAMBDA_CAP = 30.0
GAMMA_TILDE_CAP = 40.0

_MAX_STEPS = 200_000_000


class IntegrationError(RuntimeError):
    """Bloch integration failed; carries the time at which it happened."""

    def __init__(self, message: str, t_fail: float):
        super().__init__(f"{message} (t = {t_fail:.6e} s)")
        self.t_fail = t_fail


@dataclass(frozen=True)
class SweepConfig:
    """Parameters of one resonant passage.

    rabi and sweep_rate are in physical units (rad/s and 1/s^2); gamma2
    defaults to gamma1/2, i.e. no pure dephasing. ``window_half_width``
    overrides the automatic window when set.
    """

    rabi: float
    sweep_rate: float
    gamma1: float = 0.0
    gamma2: Optional[float] = None
    sz_equilibrium: float = 0.5
    window_half_width: Optional[float] = None
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.rabi < 0:
            raise ValueError("rabi must be >= 0")
        if self.sweep_rate == 0:
            raise ValueError("sweep_rate must be nonzero for a passage; "
                             "use the steady-state saturation formulas at v = 0")
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be >= 0")
        if self.gamma2 is not None and self.gamma2 < 0:
            raise ValueError("gamma2 must be >= 0")
        if not -0.5 <= self.sz_equilibrium <= 0.5:
            raise ValueError("sz_equilibrium must lie in [-1/2, 1/2]")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")

    @property
    def gamma2_effective(self) -> float:
        return 0.5 * self.gamma1 if self.gamma2 is None else self.gamma2


@dataclass
class BlochTrace:
    """Sampled spin trajectory of one passage plus the absorption integral."""

    times: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    integral_sy: float  # s
    p_excited: float
    n_steps: int


def lz_adiabatic_probability(rabi: float, sweep_rate: float) -> float:
    """Adiabatic-transition (photon absorption) probability
    1 - exp(-pi W^2 / (2 v)). Symmetric under v -> -v."""
    if sweep_rate == 0:
        raise ValueError("sweep_rate must be nonzero")
    if rabi < 0:
        raise ValueError("rabi must be >= 0")
    return -math.expm1(-math.pi * rabi * rabi / (2.0 * abs(sweep_rate)))


def steady_state_spin(rabi: float, detuning: float, gamma1: float,
                      gamma2: float, sz0: float) -> tuple[float, float, float]:
    """Fixed point of the Bloch equations at constant detuning.

    Returns (sx, sy, sz); for gamma1 = 0 this degenerates to the adiabatic
    ground state tilt with the default gamma2/gamma1 = 1/2 ratio.
    """
    q = 0.5 if gamma1 <= 0.0 else gamma2 / gamma1
    den = gamma2 * gamma2 + detuning * detuning + rabi * rabi * q
    if den == 0.0:
        return (0.0, 0.0, sz0)
    sy = rabi * sz0 * gamma2 / den
    sx = -detuning * rabi * sz0 / den
    sz = sz0 * (1.0 - rabi * rabi * q / den)
    return (sx, sy, sz)


@njit(cache=True)
def _rhs(t, y, om, g1, g2, sz0, taper_from, t_edge, out):
    d = t
    sx = y[0]
    sy = y[1]
    sz = y[2]
    out[0] = -d * sy - g2 * sx
    out[1] = d * sx + om * sz - g2 * sy
    out[2] = -om * sy - g1 * (sz - sz0)
    at = abs(t)
    if at <= taper_from:
        w = 1.0
    else:
        u = (at - taper_from) / (t_edge - taper_from)
        c = math.cos(0.5 * math.pi * u)
        w = c * c
    out[3] = sy * w


@njit(cache=True)
def _dp45_sweep(om, g1, g2, sz0, t_edge, taper_frac, rtol, atol, max_steps,
                t_samples, y_samples):
    """Adaptive Dormand-Prince 5(4) sweep in scaled units (v = 1).

    Integrates (sx, sy, sz, weighted integral of sy) from -t_edge to +t_edge
    starting in the quasi-steady state. ``t_samples``/``y_samples`` receive a
    decimated record of accepted steps (stride doubles when the buffer is
    full, keeping the sampling deterministic). Returns
    (status, t_reached, n_steps, n_samples, sx, sy, sz, acc)
    with status 0 on success, 1 on step-count overflow, 2 on non-finite state.
    """
    c2, c3, c4, c5 = 0.2, 0.3, 0.8, 8.0 / 9.0
    a21 = 0.2
    a31, a32 = 3.0 / 40.0, 9.0 / 40.0
    a41, a42, a43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
    a51, a52, a53, a54 = (19372.0 / 6561.0, -25360.0 / 2187.0,
                          64448.0 / 6561.0, -212.0 / 729.0)
    a61, a62, a63, a64, a65 = (9017.0 / 3168.0, -355.0 / 33.0,
                               46732.0 / 5247.0, 49.0 / 176.0,
                               -5103.0 / 18656.0)
    b1, b3, b4, b5, b6 = (35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0,
                          -2187.0 / 6784.0, 11.0 / 84.0)
    e1, e3, e4, e5, e6, e7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                              -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)

    taper_from = taper_frac * t_edge

    # quasi-steady initial state at the left edge
    q = 0.5 if g1 <= 0.0 else g2 / g1
    d0 = -t_edge
    den = g2 * g2 + d0 * d0 + om * om * q
    y = np.empty(4)
    y[0] = -d0 * om * sz0 / den
    y[1] = om * sz0 * g2 / den
    y[2] = sz0 * (1.0 - om * om * q / den)
    y[3] = 0.0

    t = -t_edge
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    k5 = np.empty(4)
    k6 = np.empty(4)
    k7 = np.empty(4)
    yt = np.empty(4)
    y5 = np.empty(4)
    _rhs(t, y, om, g1, g2, sz0, taper_from, t_edge, k1)

    scale0 = max(max(abs(t), om), 1.0)
    h = 0.01 / scale0
    h_min = 16.0 * 2.3e-16 * t_edge

    buf_cap = t_samples.shape[0]
    n_samples = 0
    stride = 1
    step_in_stride = 0
    if buf_cap > 0:
        t_samples[0] = t
        y_samples[0, 0] = y[0]
        y_samples[0, 1] = y[1]
        y_samples[0, 2] = y[2]
        n_samples = 1

    n_steps = 0
    while t < t_edge:
        if n_steps >= max_steps:
            return 1, t, n_steps, n_samples, y[0], y[1], y[2], y[3]
        if h < h_min:
            return 2, t, n_steps, n_samples, y[0], y[1], y[2], y[3]
        if t + h > t_edge:
            h = t_edge - t

        for i in range(4):
            yt[i] = y[i] + h * a21 * k1[i]
        _rhs(t + c2 * h, yt, om, g1, g2, sz0, taper_from, t_edge, k2)
        for i in range(4):
            yt[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i])
        _rhs(t + c3 * h, yt, om, g1, g2, sz0, taper_from, t_edge, k3)
        for i in range(4):
            yt[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i])
        _rhs(t + c4 * h, yt, om, g1, g2, sz0, taper_from, t_edge, k4)
        for i in range(4):
            yt[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i]
                                + a54 * k4[i])
        _rhs(t + c5 * h, yt, om, g1, g2, sz0, taper_from, t_edge, k5)
        for i in range(4):
            yt[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i]
                                + a64 * k4[i] + a65 * k5[i])
        _rhs(t + h, yt, om, g1, g2, sz0, taper_from, t_edge, k6)
        for i in range(4):
            y5[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i]
                                + b5 * k5[i] + b6 * k6[i])
        _rhs(t + h, y5, om, g1, g2, sz0, taper_from, t_edge, k7)

        err = 0.0
        for i in range(4):
            ei = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i]
                      + e6 * k6[i] + e7 * k7[i])
            sc = atol + rtol * max(abs(y[i]), abs(y5[i]))
            r = ei / sc
            err += r * r
        err = math.sqrt(0.25 * err)

        if not math.isfinite(err):
            return 2, t, n_steps, n_samples, y[0], y[1], y[2], y[3]

        if err <= 1.0:
            t += h
            for i in range(4):
                y[i] = y5[i]
                k1[i] = k7[i]
            n_steps += 1
            if buf_cap > 0:
                step_in_stride += 1
                if step_in_stride >= stride:
                    step_in_stride = 0
                    if n_samples >= buf_cap:
                        # decimate in place, double the stride
                        keep = buf_cap // 2
                        for j in range(keep):
                            t_samples[j] = t_samples[2 * j]
                            y_samples[j, 0] = y_samples[2 * j, 0]
                            y_samples[j, 1] = y_samples[2 * j, 1]
                            y_samples[j, 2] = y_samples[2 * j, 2]
                        n_samples = keep
                        stride *= 2
                    t_samples[n_samples] = t
                    y_samples[n_samples, 0] = y[0]
                    y_samples[n_samples, 1] = y[1]
                    y_samples[n_samples, 2] = y[2]
                    n_samples += 1

        if err > 0.0:
            fac = 0.9 * err ** -0.2
        else:
            fac = 5.0
        if fac > 5.0:
            fac = 5.0
        elif fac < 0.2:
            fac = 0.2
        h *= fac

    return 0, t, n_steps, n_samples, y[0], y[1], y[2], y[3]


def _auto_edge(om_t: float, g1_t: float) -> float:
    """Window half-width in scaled units (detuning units, since v = 1)."""
    return max(EDGE_RABI * om_t, EDGE_GAMMA * g1_t, EDGE_FRESNEL)


_GL64 = np.polynomial.legendre.leggauss(64)


def _wing_correction(om_t: float, g1_t: float, g2_t: float, sz0: float,
                     t_edge: float, taper_frac: float) -> float:
    """Quasi-steady Lorentzian absorption removed by the taper and by the
    finite window, restored analytically (scaled units)."""
    if g1_t <= 0.0 or g2_t <= 0.0 or om_t == 0.0:
        return 0.0
    w2 = g2_t * g2_t + om_t * om_t * g2_t / g1_t
    w = math.sqrt(w2)
    amp = om_t * sz0 * g2_t
    corr = 2.0 * (amp / w) * (0.5 * math.pi - math.atan(t_edge / w))
    a = taper_frac * t_edge
    xs, ws = _GL64
    tb = 0.5 * (t_edge - a) * xs + 0.5 * (t_edge + a)
    u = (tb - a) / (t_edge - a)
    taper = np.cos(0.5 * np.pi * u) ** 2
    lor = amp / (w2 + tb * tb)
    corr += 2.0 * 0.5 * (t_edge - a) * float(np.sum(ws * (1.0 - taper) * lor))
    return corr


def _run_scaled(om_t: float, g1_t: float, g2_t: float, sz0: float,
                t_edge: float, rtol: float, atol: float,
                n_buf: int) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    """Run the scaled sweep; returns (times, spins, integral, p_excited, steps)."""
    t_buf = np.empty(n_buf)
    y_buf = np.empty((n_buf, 3))
    status, t_reach, n_steps, n_samp, sx, sy, sz, acc = _dp45_sweep(
        om_t, g1_t, g2_t, sz0, t_edge, TAPER_START, rtol, atol, _MAX_STEPS,
        t_buf, y_buf)
    if status == 1:
        raise IntegrationError("step budget exhausted", t_reach)
    if status == 2:
        raise IntegrationError("step size underflow or non-finite state", t_reach)
    acc += _wing_correction(om_t, g1_t, g2_t, sz0, t_edge, TAPER_START)
    # project on the instantaneous ground-state direction B=(om,0,-d) at exit
    if sz0 != 0.0:
        bn = math.hypot(om_t, t_edge)
        s_par = (sx * om_t - sz * t_edge) / bn if bn > 0 else sz
        p_exc = (sz0 + s_par) / (2.0 * sz0)
    else:
        p_exc = 0.0
    return t_buf[:n_samp], y_buf[:n_samp], acc, p_exc, n_steps


def integrate_bloch_sweep(cfg: SweepConfig, n_trace: int = 20000) -> BlochTrace:
    """Integrate one passage and return the sampled trace.

    The returned ``integral_sy`` includes the analytic wing restoration and is
    in seconds; ``p_excited`` is the population transferred out of the
    adiabatic ground state at the right edge of the window.
    """
    v = cfg.sweep_rate
    sv = math.sqrt(abs(v))
    om_t = cfg.rabi / sv
    g1_t = cfg.gamma1 / sv
    g2_t = cfg.gamma2_effective / sv
    if cfg.window_half_width is not None:
        t_edge = cfg.window_half_width * sv
    else:
        t_edge = _auto_edge(om_t, g1_t)
    if cfg.rabi == 0.0:
        times = np.linspace(-t_edge, t_edge, 65) / sv
        zeros = np.zeros_like(times)
        return BlochTrace(times, zeros, zeros.copy(),
                          np.full_like(times, cfg.sz_equilibrium),
                          0.0, 0.0, 0)
    tt, yy, acc, p_exc, n_steps = _run_scaled(
        om_t, g1_t, g2_t, cfg.sz_equilibrium, t_edge, cfg.rel_tol,
        cfg.abs_tol, n_trace)
    return BlochTrace(times=tt / sv, sx=yy[:, 0].copy(), sy=yy[:, 1].copy(),
                      sz=yy[:, 2].copy(), integral_sy=acc / sv,
                      p_excited=p_exc, n_steps=n_steps)


def single_passage_absorption(cfg: SweepConfig) -> float:
    """Absorption kernel (2 v / (pi W)) * integral(Sy dt) of one passage.

    Dimensionless; equals (2 Sz0 / Lam) (1 - exp(-Lam)) with
    Lam = pi W^2/(2 v) in the dissipationless limit.
    """
    if cfg.rabi == 0.0:
        return 0.0
    v = cfg.sweep_rate
    sv = math.sqrt(abs(v))
    om_t = cfg.rabi / sv
    g1_t = cfg.gamma1 / sv
    g2_t = cfg.gamma2_effective / sv
    if cfg.window_half_width is not None:
        t_edge = cfg.window_half_width * sv
        _, _, acc, _, _ = _run_scaled(om_t, g1_t, g2_t, cfg.sz_equilibrium,
                                      t_edge, cfg.rel_tol, cfg.abs_tol, 0)
        return 2.0 * acc / (math.pi * om_t)
    return passage_kernel(om_t, g1_t, g2_t, cfg.sz_equilibrium,
                          cfg.rel_tol, cfg.abs_tol)


def _kernel_asymptotic(om_t: float, g1_t: float, g2_t: float,
                       sz0: float) -> float:
    """Deep-adiabatic / overdamped passage kernel.

    Coherent single-photon absorption (exact at gamma = 0) plus the
    quasi-steady saturated absorption of the traversed line. Valid when
    Lam > LAMBDA_CAP or g1_t > GAMMA_TILDE_CAP; errors peak (at the few
    percent level of a <= 1/LAMBDA_CAP contribution) near the crossover
    between the two regimes.
    """
    lam = 0.5 * math.pi * om_t * om_t
    coh = 2.0 * sz0 * (-math.expm1(-lam)) / lam if lam > 0 else 2.0 * sz0
    qs = 0.0
    if g1_t > 0.0 and g2_t > 0.0:
        qs = 2.0 * sz0 * g2_t / math.sqrt(
            g2_t * g2_t + om_t * om_t * g2_t / g1_t)
    val = coh + qs
    return min(val, 2.0 * sz0) if sz0 > 0 else val


def passage_kernel(om_t: float, g1_t: float, g2_t: float, sz0: float = 0.5,
                   rtol: float = 1e-8, atol: float = 1e-12) -> float:
    """Absorption kernel in sweep-scaled units (om_t = W/sqrt(v), ...).

    Uses the Bloch ODE inside the tractable region and the asymptotic
    closed form in the deep-adiabatic / overdamped corner.
    """
    if om_t == 0.0:
        return 0.0
    lam = 0.5 * math.pi * om_t * om_t
    if lam > LAMBDA_CAP or g1_t > GAMMA_TILDE_CAP:
        return _kernel_asymptotic(om_t, g1_t, g2_t, sz0)
    t_edge = _auto_edge(om_t, g1_t)
    _, _, acc, _, _ = _run_scaled(om_t, g1_t, g2_t, sz0, t_edge, rtol, atol, 0)
    return 2.0 * acc / (math.pi * om_t)


def dump_trace_csv(trace: BlochTrace, path) -> None:
    """Write a trace as ``t_s,sx,sy,sz`` for debugging plots."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_s,sx,sy,sz\n")
        for t, x, y, z in zip(trace.times, trace.sx, trace.sy, trace.sz):
            fh.write(f"{float(t)!r},{float(x)!r},{float(y)!r},{float(z)!r}\n")
