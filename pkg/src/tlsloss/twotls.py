"""Strongly interacting TLS ensemble: gapped non-equilibrium density of
states, four-parameter unsaturated excess loss, saturated excess loss through
the same Landau-Zener kernel as the standard species, and the combined
two-species loss.

The central object is the gap-reconstruction integral

    I(r, c) = int_0^c exp(-r e^{2x}) dx = (E1(r) - E1(r e^{2c})) / 2,

an exponential-integral difference. The unsaturated excess loss is
A exp(B I(D/ebdot, C)); the non-equilibrium DOS carries the same integral
with r expressed through the slowest standard-TLS relaxation scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

from scipy.integrate import quad
from scipy.special import exp1

from . import stm as stm_mod
from .units import CONSTANTS, BiasDrive, ResonatorContext, eac_from_photons, \
    rabi_max, xi_reduced_form

__all__ = [
    "TwoTlsParams",
    "DosModel",
    "power_law_dos",
    "gamma1_phonon_scaling",
    "gap_integral",
    "gap_integral_quad",
    "nonequilibrium_dos",
    "excess_loss_unsaturated",
    "excess_loss",
    "combined_loss",
    "max_excess_loss",
    "consistency_ratios",
    "params_from_dos",
]

_EXP_CAP = 700.0  # natural-log units; beyond this e^x is a silent inf


@dataclass(frozen=True)
class TwoTlsParams:
    """Phenomenological parameters of the strongly interacting ensemble.

    a_loss: equilibrium excess loss at the resonance energy (A).
    b_strength: interaction factor (B).
    c_logspan: log-span of standard-TLS tunneling amplitudes (C).
    d_rate: slow-TLS rate scale (D), V/(m s).
    p2: dipole moment, C m. gamma2_max: maximum relaxation rate, 1/s.
    """

    a_loss: float
    b_strength: float
    c_logspan: float
    d_rate: float
    p2: float
    gamma2_max: float

    def __post_init__(self) -> None:
        if self.a_loss <= 0 or self.b_strength <= 0 or self.c_logspan <= 0:
            raise ValueError("A, B, C must all be positive")
        if self.d_rate < 0:
            raise ValueError("D must be >= 0")
        if not math.isfinite(self.d_rate * math.exp(2.0 * self.c_logspan)):
            raise ValueError("D e^{2C} overflows; parameters unphysical")
        if self.p2 <= 0:
            raise ValueError("p2 must be positive")
        if self.gamma2_max < 0:
            raise ValueError("gamma2_max must be >= 0")


@dataclass(frozen=True)
class DosModel:
    """Equilibrium DOS of the second species plus the interaction constants
    entering the gap reconstruction."""

    rho2_eq: Callable[[float], float]  # E (J) -> 1/(J m^3)
    rho1: float                        # 1/(J m^3)
    u: float                           # J m^3
    e_max: float                       # J
    delta0_min: float                  # J
    e0: float                          # J, min(e_max, hbar w0 + p2 Eb_max)

    def __post_init__(self) -> None:
        if min(self.rho1, self.u, self.e_max, self.delta0_min, self.e0) <= 0:
            raise ValueError("DOS model scales must be positive")
        if self.delta0_min >= self.e_max:
            raise ValueError("delta0_min must be below e_max")


def power_law_dos(rho_ref: float, e_ref: float, e_max: float,
                  eta: float = 3.0, log_slope: float = 1.0) -> Callable[[float], float]:
    """Soft-gapped equilibrium DOS: rho_ref (E/e_ref)^eta below e_max,
    matched logarithmic growth above. The exponent is a model choice and is
    never asserted by tests."""
    if rho_ref <= 0 or e_ref <= 0 or e_max <= 0:
        raise ValueError("DOS scales must be positive")
    rho_edge = rho_ref * (e_max / e_ref) ** eta

    def rho(e: float) -> float:
        if e <= 0:
            raise ValueError("energy must be positive")
        if e <= e_max:
            return rho_ref * (e / e_ref) ** eta
        return rho_edge * (1.0 + log_slope * math.log(e / e_max))

    return rho


def gamma1_phonon_scaling(gamma1m_at_emax: float, e_max: float) -> Callable[[float], float]:
    """Maximum relaxation rate vs energy for phonon-bath relaxation,
    Gamma_1m(E') = Gamma_1m(e_max) (E'/e_max)^3."""

    def gamma1m(e: float) -> float:
        return gamma1m_at_emax * (e / e_max) ** 3

    return gamma1m


def gap_integral(r: float, c: float) -> float:
    """int_0^c exp(-r e^{2x}) dx via the exponential-integral difference."""
    if c <= 0:
        raise ValueError("upper limit must be positive")
    if r < 0:
        raise ValueError("rate argument must be >= 0")
    if r == 0.0:
        return c
    r_hi = r * math.exp(2.0 * c)
    if r > _EXP_CAP:
        return 0.0
    lo = exp1(r)
    hi = exp1(r_hi) if r_hi < _EXP_CAP else 0.0
    return 0.5 * (lo - hi)


def gap_integral_quad(r: float, c: float) -> float:
    """Same integral by adaptive quadrature; kept as the cross-check route."""
    if r == 0.0:
        return c
    val, _ = quad(lambda x: math.exp(-r * math.exp(2.0 * x)), 0.0, c,
                  epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def excess_loss_unsaturated(ebdot: float, params: TwoTlsParams) -> float:
    """Unsaturated excess loss A exp(B int_0^C e^{-(D/ebdot) e^{2x}} dx).

    Strictly increasing in ebdot, from A at ebdot = 0 to A e^{BC}.
    """
    if ebdot < 0:
        raise ValueError("ebdot must be >= 0")
    if ebdot == 0.0:
        return params.a_loss
    r = params.d_rate / ebdot
    exponent = params.b_strength * gap_integral(r, params.c_logspan)
    if exponent > _EXP_CAP:
        raise OverflowError(
            f"excess-loss exponent {exponent:.1f} exceeds {_EXP_CAP}; "
            "B*C implies an unphysically large loss")
    return params.a_loss * math.exp(exponent)


def excess_loss_unsaturated_batch(ebdot, params: TwoTlsParams) -> "np.ndarray":
    """Vectorized :func:`excess_loss_unsaturated`."""
    import numpy as np

    ebdot = np.asarray(ebdot, dtype=float)
    if np.any(ebdot < 0):
        raise ValueError("ebdot must be >= 0")
    out = np.full(ebdot.shape, params.a_loss)
    pos = ebdot > 0
    if np.any(pos):
        r = params.d_rate / ebdot[pos]
        gap = np.where(r > 0,
                       0.5 * (exp1(np.minimum(r, _EXP_CAP))
                              - exp1(np.minimum(
                                  r * math.exp(2.0 * params.c_logspan),
                                  _EXP_CAP))),
                       params.c_logspan)
        exponent = params.b_strength * gap
        if np.any(exponent > _EXP_CAP):
            raise OverflowError("excess-loss exponent exceeds the "
                                "representable range")
        out[pos] = params.a_loss * np.exp(exponent)
    return out


def nonequilibrium_dos(e: float, ebdot: float, model: DosModel,
                       drive: BiasDrive,
                       gamma1_of: Callable[[float], float]) -> float:
    """Non-equilibrium DOS of the second species at energy ``e`` (J) under
    bias rate ``ebdot`` (V/(m s)).

    At ebdot = 0 the gap is fully reformed and the equilibrium DOS is
    returned exactly; the infinite-rate limit multiplies it by
    exp((8 pi/3) rho1 u ln(1 + e0/e) C).
    """
    if e <= 0:
        raise ValueError("energy must be positive")
    if ebdot < 0:
        raise ValueError("ebdot must be >= 0")
    rho_eq = model.rho2_eq(e)
    if ebdot == 0.0:
        return rho_eq
    c = math.log(model.e_max / model.delta0_min)
    r = (gamma1_of(model.e_max) * (model.delta0_min / model.e_max) ** 2
         * drive.eb_max / ebdot)
    prefactor = (8.0 * math.pi / 3.0) * model.rho1 * model.u \
        * math.log1p(model.e0 / e)
    exponent = prefactor * gap_integral(r, c)
    if not math.isfinite(exponent) or exponent > _EXP_CAP:
        raise OverflowError(
            f"DOS enhancement exponent {exponent!r} at E={e:.3e} J, "
            f"ebdot={ebdot:.3e} V/(m s) is not representable")
    return rho_eq * math.exp(exponent)


def excess_loss(ebdot: float, n: float, params: TwoTlsParams,
                ctx: ResonatorContext, n_min: float = 1e-3,
                x_points: int = 10, y_points: int = 12,
                kernel: Optional[Callable] = None) -> float:
    """Excess loss tan_delta2 = tan_delta20(ebdot) * F(xi2, g2).

    F is the same ensemble-averaged LZ kernel as the standard species,
    evaluated with the second-species dipole and relaxation rate. Below
    ``n_min`` photons the species is unsaturated and F = 1.
    """
    if n < 0:
        raise ValueError("photon number must be >= 0")
    base = excess_loss_unsaturated(ebdot, params)
    if n < n_min:
        return base
    if ebdot == 0.0:
        return 0.0  # no TLSs swept; steady-state excess is drowned by tan_delta1
    species2 = _species2(params)
    xi2 = xi_reduced_form(species2, ebdot, n, ctx)
    omega_r0 = rabi_max(species2, eac_from_photons(n, ctx))
    gamma_ratio = params.gamma2_max / omega_r0
    factor = stm_mod.loss_with_relaxation(xi2, gamma_ratio,
                                          x_points=x_points,
                                          y_points=y_points, kernel=kernel)
    return base * min(factor, 1.0)


def combined_loss(ebdot: float, n: float, stm_ensemble, params: TwoTlsParams,
                  ctx: ResonatorContext,
                  kernel: Optional[Callable] = None) -> float:
    """Total loss tan_delta1 + tan_delta2 of both species."""
    tan1 = stm_mod.standard_loss_point(stm_ensemble, ebdot, n, ctx,
                                       kernel=kernel)
    tan2 = excess_loss(ebdot, n, params, ctx, n_min=stm_ensemble.n_min,
                       x_points=stm_ensemble.x_points,
                       y_points=stm_ensemble.y_points, kernel=kernel)
    return tan1 + tan2


def excess_loss_batch(ebdot, n, params: TwoTlsParams, ctx: ResonatorContext,
                      kernel: Callable, n_min: float = 1e-3,
                      x_points: int = 8, y_points: int = 10) -> "np.ndarray":
    """Vectorized :func:`excess_loss` over aligned (ebdot, n) arrays."""
    import numpy as np

    ebdot = np.asarray(ebdot, dtype=float)
    n = np.asarray(n, dtype=float)
    base = excess_loss_unsaturated_batch(ebdot, params)
    out = base.copy()
    out[(ebdot == 0) & (n >= n_min)] = 0.0
    act = (n >= n_min) & (ebdot > 0)
    if np.any(act):
        species = _species2(params)
        pref = 2.0 * ctx.permittivity * ctx.volume / (
            math.pi * ctx.omega0 * params.p2)
        xi2 = pref * ebdot[act] / n[act]
        om0 = rabi_max(species, eac_from_photons(1.0, ctx)) * np.sqrt(n[act])
        f = stm_mod.loss_with_relaxation_batch(
            xi2, params.gamma2_max / om0, kernel=kernel,
            x_points=x_points, y_points=y_points)
        out[act] = base[act] * np.minimum(f, 1.0)
    return out


def combined_loss_batch(ebdot, n, stm_ensemble, params: TwoTlsParams,
                        ctx: ResonatorContext, kernel: Callable) -> "np.ndarray":
    """Vectorized two-species total loss."""
    tan1 = stm_mod.standard_loss_batch(
        ebdot, n, stm_ensemble.species.dipole,
        stm_ensemble.species.gamma1_max, stm_ensemble.tan_delta0, ctx,
        kernel, n_min=stm_ensemble.n_min, n_c=stm_ensemble.n_c,
        x_points=stm_ensemble.x_points, y_points=stm_ensemble.y_points)
    tan2 = excess_loss_batch(ebdot, n, params, ctx, kernel,
                             n_min=stm_ensemble.n_min,
                             x_points=stm_ensemble.x_points,
                             y_points=stm_ensemble.y_points)
    return tan1 + tan2


def max_excess_loss(eb_max: float, params: TwoTlsParams, model: DosModel,
                    ctx: ResonatorContext) -> float:
    """Excess loss at the highest bias rates,
    pi p2^2 rho2_eq(hbar w0 + p2 eb_max) / (3 eps)."""
    if eb_max < 0:
        raise ValueError("eb_max must be >= 0")
    energy = CONSTANTS.reduced_planck * ctx.omega0 + params.p2 * eb_max
    return (math.pi * params.p2 ** 2 * model.rho2_eq(energy)
            / (3.0 * ctx.permittivity))


@dataclass(frozen=True)
class ConsistencyRatios:
    """Derived quantities linking the fitted parameters to the two-ensemble
    picture; each field is recomputed from the inputs, never cached."""

    gamma2_over_gamma1: float
    rho2eq_over_rho1: float
    rho1_u: float
    c0_tunneling_strength: float


def consistency_ratios(stm_ensemble, params: TwoTlsParams, e_max: float,
                       ctx: ResonatorContext,
                       eb_max: Optional[float] = None) -> ConsistencyRatios:
    """Coupling ratio, DOS ratio, interaction strength rho1*u and tunneling
    strength C0 from the fitted parameters.

    ``e0`` is min(e_max, hbar w0 + p2 eb_max) when ``eb_max`` is given, else
    e_max.
    """
    g1m = stm_ensemble.species.gamma1_max
    if g1m <= 0 or params.gamma2_max <= 0:
        raise ValueError("both maximum relaxation rates must be positive")
    hw0 = CONSTANTS.reduced_planck * ctx.omega0
    e0 = e_max if eb_max is None else min(e_max, hw0 + params.p2 * eb_max)
    gamma_ratio = math.sqrt(params.gamma2_max / g1m)
    rho_ratio = (params.a_loss / stm_ensemble.tan_delta0) \
        * (stm_ensemble.species.dipole / params.p2) ** 2
    rho1_u = params.b_strength / ((8.0 * math.pi / 3.0) * math.log1p(e0 / hw0))
    c0 = rho1_u / gamma_ratio
    return ConsistencyRatios(gamma2_over_gamma1=gamma_ratio,
                             rho2eq_over_rho1=rho_ratio,
                             rho1_u=rho1_u,
                             c0_tunneling_strength=c0)


def params_from_dos(model: DosModel, drive: BiasDrive, ctx: ResonatorContext,
                    p2: float, gamma2_max: float,
                    gamma1_of: Callable[[float], float]) -> TwoTlsParams:
    """Map a physical DOS model to the (A, B, C, D) parameterization.

    By construction ``excess_loss_unsaturated`` with the returned parameters
    equals pi p2^2 rho2(hbar w0, ebdot) / (3 eps) identically.
    """
    hw0 = CONSTANTS.reduced_planck * ctx.omega0
    a = math.pi * p2 ** 2 * model.rho2_eq(hw0) / (3.0 * ctx.permittivity)
    b = (8.0 * math.pi / 3.0) * model.rho1 * model.u * math.log1p(model.e0 / hw0)
    c = math.log(model.e_max / model.delta0_min)
    d = (gamma1_of(model.e_max) * (model.delta0_min / model.e_max) ** 2
         * drive.eb_max)
    return TwoTlsParams(a_loss=a, b_strength=b, c_logspan=c, d_rate=d,
                        p2=p2, gamma2_max=gamma2_max)


def _species2(params: TwoTlsParams):
    from .units import TlsKind, TlsSpecies
    return TlsSpecies(dipole=params.p2, gamma1_max=params.gamma2_max,
                      label=TlsKind.STRONGLY_INTERACTING)
