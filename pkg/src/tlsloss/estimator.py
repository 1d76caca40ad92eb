"""Staged analysis pipeline for loss-vs-bias-rate surfaces.

Stage order mirrors how the measurement is reduced: (1) saturation law on
the zero-bias rows, (2) standard-species LZ parameters in the low-rate
regime with the intrinsic loss fixed, (3) pointwise subtraction to isolate
the excess loss, (4) four-parameter fit of the collapsed unsaturated excess,
(5) second-species LZ parameters on the normalized excess, then the derived
consistency ratios. Residuals are taken in log space throughout because the
loss spans decades.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import stm as stm_mod
from . import twotls
from .datasets import LossSurface
from .optim import FitResult, least_squares, multistart
from .units import CONSTANTS, ResonatorContext, TlsKind, TlsSpecies, \
    eac_from_photons, photons_from_input_power, rabi_max

__all__ = [
    "FitStagePlan",
    "FitReport",
    "PipelineError",
    "fit_saturation",
    "fit_standard_lz",
    "subtract_standard",
    "fit_excess_unsaturated",
    "fit_excess_lz",
    "run_pipeline",
]

_D = CONSTANTS.debye


class PipelineError(RuntimeError):
    """A stage failed; ``partial_report`` holds everything fitted so far."""

    def __init__(self, message: str, partial_report: Optional["FitReport"] = None):
        super().__init__(message)
        self.partial_report = partial_report


@dataclass(frozen=True)
class FitStagePlan:
    """Dataset partition, bounds and fixed/free choices for the pipeline.

    Cutoffs are SI (the 3e8 V/(m s) default is 300 V/(um s)). Bounds are
    (lo, hi) tuples in SI units.
    """

    low_rate_cutoff: float = 3e8          # V/(m s)
    unsat_power_cutoff: float = -25.0     # dBm
    sat_power_floor: float = -15.0        # dBm
    collapse_tol: float = 0.15
    fix_tan_delta0: bool = True
    n_starts: int = 8
    seed: int = 0
    lz_loss_floor: float = 0.05   # stage 2 keeps loss > floor * tan_delta0
    excess_snr_floor: float = 3.0  # stage 4 log-fit keeps excess > snr * sigma
    refine_passes: int = 1        # stage 2-5 reruns with the excess subtracted
    joint_polish: bool = True     # final 8-parameter fit over the full domain
    e_max: float = 10.0 * CONSTANTS.boltzmann   # J, for the derived ratios
    eb_max: Optional[float] = 0.44e6            # V/m, for the e0 cutoff
    q_total: Optional[float] = None             # to derive n when absent
    q_external: Optional[float] = None
    bounds_tan_delta0: tuple = (1e-7, 1e-1)
    bounds_n_c: tuple = (1e-3, 1e6)
    bounds_p1: tuple = (0.5 * _D, 200.0 * _D)
    bounds_gamma1: tuple = (1e3, 1e11)
    bounds_a: tuple = (1e-12, 1e-4)
    bounds_b: tuple = (1e-3, 10.0)
    bounds_c: tuple = (1.0, 15.0)
    bounds_d: tuple = (1e-2, 1e8)
    bounds_p2: tuple = (5.0 * _D, 1000.0 * _D)
    bounds_gamma2: tuple = (1e5, 1e12)

    def validate_for(self, surface: LossSurface) -> None:
        eb = surface.ebdot
        pac = surface.pac_dbm
        checks = {
            "saturation (ebdot = 0)": eb == 0,
            "low-rate": (eb > 0) & (eb < self.low_rate_cutoff),
            "unsaturated-power": (eb > 0) & (pac < self.unsat_power_cutoff),
            "saturated-power": (eb > 0) & (pac >= self.sat_power_floor),
        }
        empty = [name for name, mask in checks.items() if not np.any(mask)]
        if empty:
            raise PipelineError("plan leaves stage subsets empty: "
                                + ", ".join(empty))


@dataclass
class StageOutcome:
    params: dict
    residual_norm: float
    initial_residual_norm: float
    n_iter: int
    n_points: int
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class FitReport:
    """Pipeline output: per-stage parameter estimates with provenance."""

    saturation: Optional[StageOutcome] = None
    standard_lz: Optional[StageOutcome] = None
    subtraction: Optional[dict] = None
    excess_unsaturated: Optional[StageOutcome] = None
    excess_lz: Optional[StageOutcome] = None
    joint: Optional[StageOutcome] = None
    ratios: Optional[dict] = None
    provenance: dict = field(default_factory=dict)
    plan: Optional[dict] = None

    def parameters(self) -> dict:
        out = {}
        for stage in (self.saturation, self.standard_lz,
                      self.excess_unsaturated, self.excess_lz, self.joint):
            if stage is not None:
                out.update(stage.params)
        return out

    def to_json(self) -> str:
        def default(obj):
            if isinstance(obj, StageOutcome):
                return asdict(obj)
            if isinstance(obj, np.ndarray):
                return [float(v) for v in obj]
            if isinstance(obj, (np.floating, np.integer)):
                return float(obj)
            raise TypeError(f"cannot serialize {type(obj)!r}")
        return json.dumps(asdict_report(self), sort_keys=True, indent=2,
                          default=default)


def asdict_report(report: FitReport) -> dict:
    out = {}
    for name in ("saturation", "standard_lz", "excess_unsaturated",
                 "excess_lz", "joint"):
        stage = getattr(report, name)
        out[name] = None if stage is None else asdict(stage)
    out["subtraction"] = report.subtraction
    out["ratios"] = report.ratios
    out["provenance"] = report.provenance
    out["plan"] = report.plan
    return out


def ensure_photons(surface: LossSurface, plan: FitStagePlan,
                   ctx: ResonatorContext) -> LossSurface:
    """Fill missing photon numbers from the power calibration."""
    n = surface.n_photons.copy()
    missing = np.isnan(n)
    if not np.any(missing):
        return surface
    if plan.q_total is None or plan.q_external is None:
        raise PipelineError("surface lacks photon numbers and the plan has "
                            "no quality factors to derive them")
    from .units import input_power_at_chip
    f0 = ctx.omega0 / (2.0 * math.pi)
    for i in np.nonzero(missing)[0]:
        p_chip = input_power_at_chip(surface.pac_dbm[i], f0, ctx)
        n[i] = photons_from_input_power(p_chip, plan.q_total,
                                        plan.q_external, ctx)
    return LossSurface(surface.pac_dbm, surface.ebdot, n, surface.tan_delta,
                       dict(surface.meta))


# --- stage 1: saturation -----------------------------------------------------

def fit_saturation(surface: LossSurface, plan: FitStagePlan) -> StageOutcome:
    """tan_delta0 and n_c from the zero-bias power sweep."""
    mask = surface.ebdot == 0
    n = surface.n_photons[mask]
    y = surface.tan_delta[mask]
    if len(n) < 5:
        raise PipelineError(f"saturation stage needs >= 5 points, got {len(n)}")
    if np.any(~np.isfinite(n)):
        raise PipelineError("saturation stage has undefined photon numbers")
    if np.any(y <= 0):
        raise PipelineError("saturation stage has nonpositive loss values")
    log_y = np.log(y)

    def residual(x):
        td0, n_c = x
        return np.log(td0 / np.sqrt(1.0 + n / n_c)) - log_y

    x0 = np.array([float(np.max(y)), float(np.median(n))])
    x0[1] = min(max(x0[1], plan.bounds_n_c[0] * 1.01),
                plan.bounds_n_c[1] * 0.99)
    bounds = [plan.bounds_tan_delta0, plan.bounds_n_c]
    initial = float(np.linalg.norm(residual(x0)))
    result = multistart(residual, bounds, n_starts=plan.n_starts,
                        seed=plan.seed + 1, x0=x0)
    warnings = []
    if result.x[1] > 0.98 * plan.bounds_n_c[1]:
        warnings.append("n_c unbounded: data shows no saturation knee")
    if not (n.min() < result.x[1] < n.max()):
        warnings.append("n_c outside the measured photon range; "
                        "ill-conditioned span")
    return StageOutcome(
        params={"tan_delta0": float(result.x[0]), "n_c": float(result.x[1])},
        residual_norm=result.residual_norm, initial_residual_norm=initial,
        n_iter=result.n_iter, n_points=int(mask.sum()), warnings=warnings,
        extra={"sigma": None if result.sigma is None else list(map(float, result.sigma))})


# --- stage 2: standard-species LZ parameters ---------------------------------

def _lz_model_batch(ebdot, n, p, gamma_max, tan_delta0, ctx, kernel):
    """tan_delta1 for arrays of (ebdot, n) at dipole p and max rate gamma."""
    return stm_mod.standard_loss_batch(ebdot, n, p, gamma_max, tan_delta0,
                                       ctx, kernel)


def fit_standard_lz(surface: LossSurface, tan_delta0: float,
                    plan: FitStagePlan, ctx: ResonatorContext,
                    kernel: Callable) -> StageOutcome:
    """Dipole moment and maximum relaxation rate of the standard species from
    the low-bias-rate subset, with tan_delta0 held fixed.

    Points whose loss has collapsed far below tan_delta0 sit in the deep
    saturation tail where the second species dominates the signal; the plan's
    ``lz_loss_floor`` keeps them out of this stage.
    """
    mask = (surface.ebdot > 0) & (surface.ebdot < plan.low_rate_cutoff) \
        & (surface.tan_delta > plan.lz_loss_floor * tan_delta0)
    eb = surface.ebdot[mask]
    n = surface.n_photons[mask]
    y = surface.tan_delta[mask]
    if len(eb) < 8:
        raise PipelineError("standard-LZ stage has too few low-rate points")
    keep = y > 0
    eb, n, y = eb[keep], n[keep], y[keep]
    log_y = np.log(y)

    def residual(x):
        p, gamma = x
        model = _lz_model_batch(eb, n, p, gamma, tan_delta0, ctx, kernel)
        return np.log(np.maximum(model, 1e-300)) - log_y

    bounds = [plan.bounds_p1, plan.bounds_gamma1]
    x0 = np.array([10.0 * _D, 1e7])
    initial = float(np.linalg.norm(residual(x0)))
    result = multistart(residual, bounds, n_starts=plan.n_starts,
                        seed=plan.seed + 2, x0=x0)
    return StageOutcome(
        params={"p1": float(result.x[0]), "gamma1_max": float(result.x[1])},
        residual_norm=result.residual_norm, initial_residual_norm=initial,
        n_iter=result.n_iter, n_points=int(keep.sum()),
        extra={"p1_debye": float(result.x[0] / _D),
               "sigma": None if result.sigma is None else list(map(float, result.sigma))})


# --- stage 3: subtraction ----------------------------------------------------

def subtract_standard(surface: LossSurface, tan_delta0: float, p1: float,
                      gamma1_max: float, ctx: ResonatorContext,
                      kernel: Callable,
                      n_c: Optional[float] = None) -> tuple[LossSurface, dict]:
    """Excess surface tan_delta2 = tan_delta - tan_delta1, clipped at zero.

    The unclipped residuals and a per-power noise scale (robust MAD estimate
    over the negative residuals, which sample pure subtraction noise) travel
    in ``meta`` for the downstream stages.
    """
    model = stm_mod.standard_loss_batch(surface.ebdot, surface.n_photons, p1,
                                        gamma1_max, tan_delta0, ctx, kernel,
                                        n_c=n_c)
    resid = surface.tan_delta - model
    clipped = int(np.sum(resid < 0))
    noise_scale = {}
    for p in np.unique(surface.pac_dbm):
        neg = resid[(surface.pac_dbm == p) & (resid < 0)]
        if len(neg) >= 3:
            noise_scale[float(p)] = 1.4826 * float(np.median(np.abs(neg)))
    stats = {"clipped_points": clipped,
             "clipped_fraction": clipped / max(len(resid), 1),
             "n_points": len(resid)}
    meta = dict(surface.meta)
    meta["residual_unclipped"] = resid
    meta["noise_scale_by_power"] = noise_scale
    out = LossSurface(surface.pac_dbm, surface.ebdot, surface.n_photons,
                      np.maximum(resid, 0.0), meta)
    return out, stats


# --- stage 4: unsaturated excess ---------------------------------------------

def _check_collapse(eb, pac, y, tol) -> list:
    """Relative spread across powers at each bias rate; offenders above tol.

    Rates whose median excess is noise-level (below 5% of the subset maximum)
    carry no collapse information and are skipped.
    """
    offenders = []
    floor = 0.05 * float(np.max(y)) if len(y) else 0.0
    for rate in np.unique(eb):
        sel = eb == rate
        vals = y[sel]
        if len(vals) < 2:
            continue
        med = float(np.median(vals))
        if med <= floor or med <= 0:
            continue
        spread = (vals.max() - vals.min()) / med
        if spread > tol:
            offenders.append({"ebdot": float(rate), "spread": float(spread),
                              "powers_dbm": sorted(float(p) for p in pac[sel])})
    return offenders


def _power_log_offsets(eb, pac, y) -> dict:
    """Per-power systematic offset from the collapsed curve: the signed
    median of log(y / per-rate median). Symmetric point noise cancels here,
    unlike in the raw per-rate spread."""
    floor = 0.05 * float(np.max(y)) if len(y) else 0.0
    rate_median: dict = {}
    for rate in np.unique(eb):
        vals = y[(eb == rate) & (y > 0)]
        if len(vals) >= 2 and np.median(vals) > floor:
            rate_median[float(rate)] = float(np.median(vals))
    offsets = {}
    for p in np.unique(pac):
        devs = [math.log(yy / rate_median[float(rr)])
                for rr, yy in zip(eb[pac == p], y[pac == p])
                if float(rr) in rate_median and yy > 0]
        offsets[float(p)] = float(np.median(devs)) if devs else 0.0
    return offsets


def _excess_curve(eb: np.ndarray, a: float, b: float, c: float,
                  d: float) -> np.ndarray:
    params = twotls.TwoTlsParams(a_loss=a, b_strength=b, c_logspan=c,
                                 d_rate=d, p2=_D, gamma2_max=0.0)
    return twotls.excess_loss_unsaturated_batch(eb, params)


def fit_excess_unsaturated(excess: LossSurface, plan: FitStagePlan) -> StageOutcome:
    """(A, B, C, D) of the unsaturated excess law from the collapsed
    low-power subset.

    Two phases: a log-space fit on the points that clear the subtraction
    noise floor fixes the well-measured part of the curve; a weighted
    linear-space refinement then includes the unclipped sub-floor residuals,
    whose near-zero values bound the curve from above at low rates (A, C and
    D are degenerate along a flat direction otherwise).
    """
    mask = (excess.ebdot > 0) & (excess.pac_dbm < plan.unsat_power_cutoff)
    eb = excess.ebdot[mask]
    pac = excess.pac_dbm[mask]
    y = excess.tan_delta[mask]
    resid_raw = excess.meta.get("residual_unclipped")
    y_raw = resid_raw[mask] if resid_raw is not None else y
    noise_scale = excess.meta.get("noise_scale_by_power", {})
    sig = np.array([noise_scale.get(float(p), 0.0) for p in pac])
    if len(eb) < 8:
        raise PipelineError("unsaturated-excess stage has too few points")
    warnings = []
    rate_spreads = _check_collapse(eb, pac, y, plan.collapse_tol)
    offsets = _power_log_offsets(eb, pac, y)
    limit = math.log1p(plan.collapse_tol)
    kept_powers = np.array([p for p, off in offsets.items()
                            if abs(off) <= limit])
    dropped = [{"power_dbm": p, "median_log_offset": off}
               for p, off in sorted(offsets.items()) if abs(off) > limit]
    if len(kept_powers) < 2:
        raise PipelineError(
            "excess data do not collapse across powers below the cutoff: "
            f"systematic offsets {offsets}, per-rate spreads {rate_spreads}")
    if dropped:
        core = np.isin(pac, kept_powers)
        eb, pac, y, y_raw, sig = (eb[core], pac[core], y[core], y_raw[core],
                                  sig[core])
        warnings.append({"pruned_powers": dropped})

    clear = (y > 0) & (y > plan.excess_snr_floor * sig)
    if clear.sum() < 8:
        raise PipelineError("too few excess points above the subtraction "
                            "noise floor")
    eb_c, y_c = eb[clear], y[clear]
    slope = np.polyfit(np.log(eb_c), np.log(y_c), 1)[0]
    if slope < -0.05:
        raise PipelineError("excess loss decreases with bias rate "
                            f"(log-log slope {slope:.3f}); the gap-"
                            "reconstruction model cannot represent that")
    log_y = np.log(y_c)

    def residual_log(x):
        model = _excess_curve(eb_c, *x)
        return np.log(np.maximum(model, 1e-300)) - log_y

    bounds = [plan.bounds_a, plan.bounds_b, plan.bounds_c, plan.bounds_d]
    x0 = np.array([max(y_c.min() * 1e-2, plan.bounds_a[0] * 10), 1.0, 7.0,
                   float(np.median(eb_c)) * 1e-4])
    initial = float(np.linalg.norm(residual_log(x0)))
    stage_a = multistart(residual_log, bounds, n_starts=plan.n_starts,
                         seed=plan.seed + 4, x0=x0)

    # weighted linear-space refinement over every point, including the
    # sub-floor ones whose scatter around zero caps the low-rate curve
    w = 1.0 / np.maximum(sig, max(float(np.median(y_c)) * 1e-3, 1e-12))
    w_log = float(np.median(w[clear] * y_c))  # keeps the two phases comparable

    def residual_lin(x):
        model = _excess_curve(eb, *x)
        return w * (model - y_raw) / max(w_log, 1e-12)

    # (A, C, D) are degenerate along a 1-D ridge in the log objective; walk
    # the ridge by profiling D, then let the sub-floor points pick the branch
    candidates = [stage_a.x]
    a0, b0, c0, _ = stage_a.x
    for d in np.geomspace(bounds[3][0], bounds[3][1], 17):
        def res3(x3, d=d):
            return residual_log(np.array([x3[0], x3[1], x3[2], d]))
        try:
            fit3 = least_squares(res3, np.array([a0, b0, c0]),
                                 bounds=bounds[:3], max_iter=80)
        except (ValueError, ArithmeticError):
            continue
        candidates.append(np.array([*fit3.x, d]))
    lin_costs = [float(np.sum(residual_lin(cand) ** 2)) for cand in candidates]
    order = np.argsort(lin_costs)
    result = None
    for idx in order[:4]:
        try:
            trial = least_squares(residual_lin, candidates[idx],
                                  bounds=bounds, max_iter=200)
        except (ValueError, ArithmeticError):
            continue
        if result is None or trial.cost < result.cost:
            result = trial
    if result is None:
        raise PipelineError("unsaturated-excess refinement failed from every "
                            "ridge seed")
    if result.x[1] < plan.bounds_b[0] * 2:
        warnings.append("B at its lower bound: excess is nearly "
                        "rate-independent")
    d_lo, d_hi = _profile_interval_d(residual_lin, result, bounds)
    params = {"a_loss": float(result.x[0]), "b_strength": float(result.x[1]),
              "c_logspan": float(result.x[2]), "d_rate": float(result.x[3])}
    return StageOutcome(
        params=params, residual_norm=result.residual_norm,
        initial_residual_norm=initial, n_iter=result.n_iter,
        n_points=int(len(eb)), warnings=warnings,
        extra={"d_rate_interval": [d_lo, d_hi],
               "n_rate_spread_flags": len(rate_spreads),
               "n_points_above_floor": int(clear.sum()),
               "log_fit_params": [float(v) for v in stage_a.x],
               "sigma": None if result.sigma is None else list(map(float, result.sigma))})


def _profile_interval_d(residual, best: FitResult, bounds,
                        threshold: float = 1.05, n_grid: int = 29) -> tuple:
    """Profile-style interval for the weakly identified D: refit (A, B, C)
    on a log grid of fixed D and keep the D range whose cost stays within
    ``threshold`` times the minimum."""
    a, b, c, d_best = best.x
    grid = np.geomspace(bounds[3][0], bounds[3][1], n_grid)
    lo, hi = d_best, d_best
    for d in grid:
        def res3(x3):
            return residual(np.array([x3[0], x3[1], x3[2], d]))
        try:
            r = least_squares(res3, np.array([a, b, c]), bounds=bounds[:3],
                              max_iter=80)
        except (ValueError, ArithmeticError):
            continue
        if r.cost <= threshold * best.cost:
            lo = min(lo, d)
            hi = max(hi, d)
    return float(lo), float(hi)


# --- stage 5: second-species LZ parameters -----------------------------------

def fit_excess_lz(excess: LossSurface, unsat_params: dict,
                  plan: FitStagePlan, ctx: ResonatorContext,
                  kernel: Callable) -> StageOutcome:
    """p2 and gamma2_max from the normalized excess at saturating powers."""
    mask = (excess.ebdot > 0) & (excess.pac_dbm >= plan.sat_power_floor)
    eb = excess.ebdot[mask]
    n = excess.n_photons[mask]
    y = excess.tan_delta[mask]
    if len(eb) < 8:
        raise PipelineError("excess-LZ stage has too few saturated points")
    params2 = twotls.TwoTlsParams(
        a_loss=unsat_params["a_loss"], b_strength=unsat_params["b_strength"],
        c_logspan=unsat_params["c_logspan"], d_rate=unsat_params["d_rate"],
        p2=100 * _D, gamma2_max=1e8)
    base = twotls.excess_loss_unsaturated_batch(eb, params2)
    z = y / base
    keep = z > 1e-4
    eb, n, z, base = eb[keep], n[keep], z[keep], base[keep]
    if len(eb) < 8:
        raise PipelineError("too few usable normalized-excess points")
    log_z = np.log(z)
    pref0 = 2.0 * ctx.permittivity * ctx.volume / (math.pi * ctx.omega0)

    def residual(x):
        p2, gamma2 = x
        species = TlsSpecies(dipole=p2, gamma1_max=gamma2,
                             label=TlsKind.STRONGLY_INTERACTING)
        xi2 = (pref0 / p2) * eb / n
        om0 = np.array([rabi_max(species, eac_from_photons(v, ctx))
                        for v in n])
        f = stm_mod.loss_with_relaxation_batch(xi2, gamma2 / om0,
                                               kernel=kernel)
        return np.log(np.maximum(np.minimum(f, 1.0), 1e-300)) - log_z

    bounds = [plan.bounds_p2, plan.bounds_gamma2]
    x0 = np.array([100.0 * _D, 1e9])
    initial = float(np.linalg.norm(residual(x0)))
    result = multistart(residual, bounds, n_starts=plan.n_starts,
                        seed=plan.seed + 5, x0=x0)
    return StageOutcome(
        params={"p2": float(result.x[0]), "gamma2_max": float(result.x[1])},
        residual_norm=result.residual_norm, initial_residual_norm=initial,
        n_iter=result.n_iter, n_points=len(eb),
        extra={"p2_debye": float(result.x[0] / _D),
               "sigma": None if result.sigma is None else list(map(float, result.sigma))})


def _joint_polish(surface: LossSurface, report: FitReport,
                  plan: FitStagePlan, ctx: ResonatorContext,
                  kernel: Callable) -> StageOutcome:
    """Final fit of the eight LZ and excess parameters over the entire
    domain, seeded by the staged estimates (tan_delta0 and n_c stay fixed).

    The staged fits see the excess through the subtraction, which leaves a
    small mutual bias between the species; fitting the combined model to the
    raw surface removes it.
    """
    p = report.parameters()
    td0, n_c = p["tan_delta0"], p["n_c"]
    mask = surface.tan_delta > 0
    eb = surface.ebdot[mask]
    n = surface.n_photons[mask]
    log_y = np.log(surface.tan_delta[mask])

    def residual(x):
        p1, g1, a, b, c, d, p2, g2 = x
        tan1 = stm_mod.standard_loss_batch(eb, n, p1, g1, td0, ctx, kernel,
                                           n_c=n_c)
        params2 = twotls.TwoTlsParams(a_loss=a, b_strength=b, c_logspan=c,
                                      d_rate=d, p2=p2, gamma2_max=g2)
        tan2 = twotls.excess_loss_batch(eb, n, params2, ctx, kernel)
        return np.log(np.maximum(tan1 + tan2, 1e-300)) - log_y

    x0 = np.array([p["p1"], p["gamma1_max"], p["a_loss"], p["b_strength"],
                   p["c_logspan"], p["d_rate"], p["p2"], p["gamma2_max"]])
    bounds = [plan.bounds_p1, plan.bounds_gamma1, plan.bounds_a,
              plan.bounds_b, plan.bounds_c, plan.bounds_d, plan.bounds_p2,
              plan.bounds_gamma2]
    initial = float(np.linalg.norm(residual(x0)))
    result = least_squares(residual, x0, bounds=bounds, max_iter=150)
    names = ("p1", "gamma1_max", "a_loss", "b_strength", "c_logspan",
             "d_rate", "p2", "gamma2_max")
    return StageOutcome(
        params={k: float(v) for k, v in zip(names, result.x)},
        residual_norm=result.residual_norm, initial_residual_norm=initial,
        n_iter=result.n_iter, n_points=int(mask.sum()),
        extra={"sigma": None if result.sigma is None else
               list(map(float, result.sigma))})


# --- pipeline ---------------------------------------------------------------

def run_pipeline(surface: LossSurface, plan: FitStagePlan,
                 ctx: ResonatorContext,
                 kernel: Optional[Callable] = None) -> FitReport:
    """Execute the five stages in order and derive the consistency ratios.

    Deterministic for identical inputs and plan. Any stage error raises
    :class:`PipelineError` carrying the partial report.
    """
    report = FitReport(plan={k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in asdict(plan).items()})
    if kernel is None:
        kernel = stm_mod.default_kernel_table().kernel
    try:
        surface = ensure_photons(surface, plan, ctx)
        plan.validate_for(surface)
        report.saturation = fit_saturation(surface, plan)
        td0 = report.saturation.params["tan_delta0"]
        n_c = report.saturation.params["n_c"]

        # stages 2-5 with optional refinement: once the excess model is
        # known, subtract it and refit the standard species on the cleaned
        # data (the excess biases the low-rate fit otherwise)
        work = surface
        for cycle in range(1 + max(plan.refine_passes, 0)):
            report.standard_lz = fit_standard_lz(work, td0, plan, ctx, kernel)
            p1 = report.standard_lz.params["p1"]
            g1 = report.standard_lz.params["gamma1_max"]
            excess, stats = subtract_standard(surface, td0, p1, g1, ctx,
                                              kernel, n_c=n_c)
            report.subtraction = stats
            report.excess_unsaturated = fit_excess_unsaturated(excess, plan)
            report.excess_lz = fit_excess_lz(
                excess, report.excess_unsaturated.params, plan, ctx, kernel)
            if cycle < plan.refine_passes:
                pu = report.excess_unsaturated.params
                pl = report.excess_lz.params
                params2 = twotls.TwoTlsParams(
                    a_loss=pu["a_loss"], b_strength=pu["b_strength"],
                    c_logspan=pu["c_logspan"], d_rate=pu["d_rate"],
                    p2=pl["p2"], gamma2_max=pl["gamma2_max"])
                tan2 = twotls.excess_loss_batch(
                    surface.ebdot, surface.n_photons, params2, ctx, kernel)
                cleaned = np.maximum(surface.tan_delta - tan2, 1e-12)
                work = LossSurface(surface.pac_dbm, surface.ebdot,
                                   surface.n_photons, cleaned,
                                   dict(surface.meta))
        if plan.joint_polish:
            report.joint = _joint_polish(surface, report, plan, ctx, kernel)
    except PipelineError as exc:
        raise PipelineError(str(exc), partial_report=report) from exc

    p = report.parameters()
    species1 = TlsSpecies(dipole=p["p1"], gamma1_max=p["gamma1_max"])
    ensemble = stm_mod.StmEnsemble(species=species1,
                                   tan_delta0=p["tan_delta0"], n_c=p["n_c"])
    params2 = twotls.TwoTlsParams(
        a_loss=p["a_loss"], b_strength=p["b_strength"],
        c_logspan=p["c_logspan"], d_rate=p["d_rate"], p2=p["p2"],
        gamma2_max=p["gamma2_max"])
    ratios = twotls.consistency_ratios(ensemble, params2, plan.e_max, ctx,
                                       eb_max=plan.eb_max)
    report.ratios = {
        "gamma2_over_gamma1": ratios.gamma2_over_gamma1,
        "rho2eq_over_rho1": ratios.rho2eq_over_rho1,
        "rho1_u": ratios.rho1_u,
        "c0_tunneling_strength": ratios.c0_tunneling_strength,
    }
    report.provenance = _provenance(plan)
    return report


def _provenance(plan: FitStagePlan) -> dict:
    fixed_td0 = "fixed (from saturation stage)" if plan.fix_tan_delta0 \
        else "fitted"
    polish = "; polished jointly over the full domain" if plan.joint_polish \
        else ""
    return {
        "tan_delta0": "fitted (saturation stage)",
        "n_c": "fitted (saturation stage)",
        "p1": "fitted (standard-LZ stage); tan_delta0 " + fixed_td0 + polish,
        "gamma1_max": "fitted (standard-LZ stage)" + polish,
        "a_loss": "fitted (unsaturated-excess stage)" + polish,
        "b_strength": "fitted (unsaturated-excess stage)" + polish,
        "c_logspan": "fitted (unsaturated-excess stage)" + polish,
        "d_rate": "fitted (unsaturated-excess stage; weakly identified, "
                  "see d_rate_interval)" + polish,
        "p2": "fitted (excess-LZ stage)" + polish,
        "gamma2_max": "fitted (excess-LZ stage)" + polish,
        "e_max": "default (plan)",
        "eb_max": "default (plan)",
    }
