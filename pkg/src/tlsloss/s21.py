"""Complex S21 notch-resonance model, least-squares fitting and loss-tangent
extraction.

Model:  S21(w) = Amp e^{i theta} [1 - Q |Qe^-1| e^{i phi}
                                      / (1 + 2 i Q (w - w0)/w0)]

so the baseline far off resonance is Amp e^{i theta} and the dip bottoms at
Amp e^{i theta} (1 - Q |Qe^-1| e^{i phi}).
The external quality factor is complex because of the impedance mismatch;
Qe = 1/Re{Qe^-1} = 1/(|Qe^-1| cos phi) and the internal loss is
1/Qi = 1/Q - |Qe^-1| cos phi. Amp and theta are gauge parameters absorbing
line attenuation, amplification and electrical delay.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datasets import SchemaError
from .optim import FitConvergenceError, FitResult, least_squares

__all__ = [
    "S21Model",
    "IqTrace",
    "S21FitReport",
    "s21_eval",
    "fit_s21",
    "loss_from_fit",
    "synthesize_trace",
    "read_iq_csv",
    "write_iq_csv",
]


@dataclass(frozen=True)
class S21Model:
    amp: float
    theta: float
    q_total: float
    qe_mag_inv: float
    phi: float
    omega0: float

    def __post_init__(self) -> None:
        if self.q_total <= 0:
            raise ValueError("q_total must be positive")
        if self.qe_mag_inv <= 0:
            raise ValueError("qe_mag_inv must be positive")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")

    @property
    def q_external(self) -> float:
        re = self.qe_mag_inv * math.cos(self.phi)
        if re <= 0:
            raise ValueError("Re{Qe^-1} <= 0: nonphysical mismatch angle")
        return 1.0 / re

    @property
    def q_internal(self) -> float:
        inv = 1.0 / self.q_total - self.qe_mag_inv * math.cos(self.phi)
        if inv <= 0:
            raise ValueError("fit gives nonphysical Qi <= 0")
        return 1.0 / inv

    @classmethod
    def from_quality_factors(cls, q_internal: float, q_external: float,
                             phi: float, omega0: float, amp: float = 1.0,
                             theta: float = 0.0) -> "S21Model":
        """Build the model from (Qi, Qe, phi): |Qe^-1| = 1/(Qe cos phi) and
        1/Q = 1/Qi + 1/Qe."""
        if q_internal <= 0 or q_external <= 0:
            raise ValueError("quality factors must be positive")
        qe_mag_inv = 1.0 / (q_external * math.cos(phi))
        q_total = 1.0 / (1.0 / q_internal + 1.0 / q_external)
        return cls(amp=amp, theta=theta, q_total=q_total,
                   qe_mag_inv=qe_mag_inv, phi=phi, omega0=omega0)


@dataclass
class IqTrace:
    """Complex transmission vs angular frequency; ``freqs`` strictly
    increasing, in Hz (converted to rad/s internally where needed)."""

    freqs: np.ndarray  # Hz
    iq: np.ndarray     # complex

    def __post_init__(self) -> None:
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.iq = np.asarray(self.iq, dtype=complex)
        if self.freqs.shape != self.iq.shape:
            raise ValueError("freqs and iq must have equal length")
        if len(self.freqs) < 32:
            raise ValueError("a fit needs at least 32 points")
        if np.any(np.diff(self.freqs) <= 0):
            raise SchemaError("frequency axis must be strictly increasing")


@dataclass
class S21FitReport:
    model: S21Model
    q_internal: float
    q_external: float
    residual_norm: float
    n_iter: int
    converged: bool
    history: list
    sigma: Optional[dict]
    warnings: list

    def as_dict(self) -> dict:
        return {
            "amp": self.model.amp, "theta": self.model.theta,
            "q_total": self.model.q_total,
            "qe_mag_inv": self.model.qe_mag_inv,
            "phi": self.model.phi, "omega0": self.model.omega0,
            "q_internal": self.q_internal, "q_external": self.q_external,
            "tan_delta": 1.0 / self.q_internal,
            "residual_norm": self.residual_norm,
            "n_iter": self.n_iter, "converged": self.converged,
            "sigma": self.sigma, "warnings": list(self.warnings),
        }


def s21_eval(model: S21Model, omega) -> np.ndarray | complex:
    """Evaluate the model at angular frequency ``omega`` (rad/s)."""
    omega = np.asarray(omega, dtype=float)
    den = 1.0 + 2j * model.q_total * (omega - model.omega0) / model.omega0
    dip = model.q_total * model.qe_mag_inv * np.exp(1j * model.phi) / den
    out = model.amp * np.exp(1j * model.theta) * (1.0 - dip)
    return out if out.shape else complex(out)


def _initial_guess(trace: IqTrace) -> tuple[S21Model, list]:
    """Dip position, width-of-half-depth Q, far-detuned baseline; phi = 0."""
    notes = []
    mag = np.abs(trace.iq)
    i_min = int(np.argmin(mag))
    f0 = trace.freqs[i_min]
    n_edge = max(len(mag) // 10, 3)
    base = float(np.median(np.concatenate([mag[:n_edge], mag[-n_edge:]])))
    theta0 = float(np.median(np.angle(
        np.concatenate([trace.iq[:n_edge], trace.iq[-n_edge:]]))))
    depth = mag[i_min] / base if base > 0 else 0.5
    # full width where |S21|^2 crosses halfway between dip and baseline
    half = math.sqrt(0.5 * (depth * depth + 1.0)) * base
    above_l = np.nonzero(mag[:i_min] > half)[0]
    above_r = np.nonzero(mag[i_min:] > half)[0]
    if len(above_l) == 0 or len(above_r) == 0:
        notes.append("trace does not resolve the resonance dip; "
                     "fit may be poorly conditioned")
        width = (trace.freqs[-1] - trace.freqs[0]) / 4.0
    else:
        width = trace.freqs[i_min + above_r[0]] - trace.freqs[above_l[-1]]
        span = trace.freqs[-1] - trace.freqs[0]
        if span < 3.0 * width:
            notes.append("trace spans fewer than 3 linewidths; "
                         "fit may be poorly conditioned")
    q0 = max(f0 / max(width, 1e-12), 1.0)
    qinv0 = max((1.0 - depth) / q0, 1e-12)
    model = S21Model(amp=base if base > 0 else 1.0, theta=theta0, q_total=q0,
                     qe_mag_inv=qinv0, phi=0.0, omega0=2.0 * math.pi * f0)
    return model, notes


def fit_s21(trace: IqTrace, initial_guess: Optional[S21Model] = None,
            delay_correction_s: Optional[float] = None) -> S21FitReport:
    """Least-squares fit of the complex model to an IQ trace.

    Residuals stack real and imaginary parts; optimization runs on
    (amp, theta, ln Q, ln |Qe^-1|, phi, relative detuning of w0). When
    ``delay_correction_s`` is given the trace is pre-multiplied by
    exp(+2 pi i f tau) to undo a linear electrical delay.
    """
    iq = trace.iq
    if delay_correction_s is not None:
        iq = iq * np.exp(2j * np.pi * trace.freqs * delay_correction_s)
        trace = IqTrace(trace.freqs, iq)
    notes: list = []
    if initial_guess is None:
        guess, notes = _initial_guess(trace)
    else:
        guess = initial_guess

    omega = 2.0 * np.pi * trace.freqs
    w_ref = guess.omega0
    scale = float(np.mean(np.abs(iq))) or 1.0

    def unpack(x) -> S21Model:
        amp, theta, ln_q, ln_qinv, phi, dw = x
        return S21Model(amp=math.exp(amp), theta=theta,
                        q_total=math.exp(ln_q), qe_mag_inv=math.exp(ln_qinv),
                        phi=phi, omega0=w_ref * (1.0 + dw))

    def residual(x):
        model = unpack(x)
        diff = (s21_eval(model, omega) - iq) / scale
        return np.concatenate([diff.real, diff.imag])

    x0 = np.array([math.log(guess.amp), guess.theta,
                   math.log(guess.q_total), math.log(guess.qe_mag_inv),
                   guess.phi, guess.omega0 / w_ref - 1.0])
    result = least_squares(residual, x0, step_tol=1e-10, max_iter=200)
    if not result.converged:
        raise FitConvergenceError("S21 fit did not converge", result)
    model = unpack(result.x)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        qi = model.q_internal
        qe = model.q_external
    sigma = None
    if result.sigma is not None:
        names = ("ln_amp", "theta", "ln_q", "ln_qe_mag_inv", "phi", "dw_rel")
        sigma = {n: float(s) for n, s in zip(names, result.sigma)}
    return S21FitReport(model=model, q_internal=qi, q_external=qe,
                        residual_norm=result.residual_norm,
                        n_iter=result.n_iter, converged=result.converged,
                        history=result.history, sigma=sigma, warnings=notes)


def loss_from_fit(model: S21Model) -> float:
    """tan_delta = 1/Qi with 1/Qi = 1/Q - |Qe^-1| cos(phi)."""
    return 1.0 / model.q_internal


def synthesize_trace(model: S21Model, n_points: int = 201,
                     span_linewidths: float = 8.0,
                     noise_sigma: float = 0.0,
                     seed: Optional[int] = None) -> IqTrace:
    """Generate a model trace; optional additive complex Gaussian noise of
    ``noise_sigma * amp`` per quadrature."""
    f0 = model.omega0 / (2.0 * math.pi)
    half_span = 0.5 * span_linewidths * f0 / model.q_total
    freqs = np.linspace(f0 - half_span, f0 + half_span, n_points)
    iq = np.asarray(s21_eval(model, 2.0 * np.pi * freqs), dtype=complex)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        iq = iq + noise_sigma * model.amp * (
            rng.standard_normal(n_points) + 1j * rng.standard_normal(n_points))
    return IqTrace(freqs, iq)


def write_iq_csv(trace: IqTrace, path, header_meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(header_meta or {}):
            fh.write(f"# {k}: {(header_meta or {})[k]}\n")
        fh.write("freq_hz,re,im\n")
        for f, z in zip(trace.freqs, trace.iq):
            fh.write(f"{float(f)!r},{float(z.real)!r},{float(z.imag)!r}\n")


def read_iq_csv(path) -> IqTrace:
    from .datasets import _read_table
    header, rows, _ = _read_table(path)
    if header != ["freq_hz", "re", "im"]:
        raise SchemaError(f"{path}: expected header freq_hz,re,im, "
                          f"got {','.join(header)}")
    freqs = np.empty(len(rows))
    iq = np.empty(len(rows), dtype=complex)
    for i, (lineno, cells) in enumerate(rows):
        if len(cells) != 3:
            raise SchemaError(f"{path}:{lineno}: expected 3 fields")
        try:
            freqs[i] = float(cells[0])
            iq[i] = float(cells[1]) + 1j * float(cells[2])
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: not a number") from exc
    return IqTrace(freqs, iq)
