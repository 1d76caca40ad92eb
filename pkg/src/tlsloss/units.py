"""Physical constants, unit conversions, and the dimensionless groups used
throughout the package.

Everything internal is SI: energies in J, fields in V/m, rates in 1/s,
angular frequencies in rad/s. Debye, V/um, dBm and GHz are accepted only at
I/O boundaries through the explicit converters below.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA 2018 values plus the dipole-moment unit.

    ``debye`` is the conventional 3.33564e-30 C m; the rounded 0.21 e*Angstrom
    equivalence used in the literature holds to about 0.9%.
    """

    reduced_planck: float = 1.054571817e-34  # J s
    boltzmann: float = 1.380649e-23  # J/K
    elementary_charge: float = 1.602176634e-19  # C
    vacuum_permittivity: float = 8.8541878128e-12  # F/m
    debye: float = 3.33564e-30  # C m


CONSTANTS = PhysicalConstants()


class TlsKind(enum.Enum):
    STANDARD = "standard"
    STRONGLY_INTERACTING = "strongly_interacting"


@dataclass(frozen=True)
class TlsSpecies:
    """One TLS ensemble: dipole moment p (C m) and maximum relaxation rate
    (1/s) of TLSs resonant at the readout frequency."""

    dipole: float
    gamma1_max: float
    label: TlsKind = TlsKind.STANDARD

    def __post_init__(self) -> None:
        if self.dipole <= 0:
            raise ValueError(f"dipole must be positive, got {self.dipole}")
        if self.gamma1_max < 0:
            raise ValueError(f"gamma1_max must be >= 0, got {self.gamma1_max}")


@dataclass(frozen=True)
class ResonatorContext:
    """Resonator geometry, temperature and the dataset's power calibration.

    The power reaching the chip is modelled as the affine law
    ``P = attenuation_slope * f + P_source + attenuation_offset`` (all dB);
    the default coefficients are per-device calibration numbers and should be
    overridden for other datasets.
    """

    omega0: float  # rad/s
    rel_permittivity: float
    volume: float  # m^3
    temperature: float  # K
    attenuation_slope: float = -1.87e-9  # dB/Hz
    attenuation_offset: float = -70.2  # dB

    def __post_init__(self) -> None:
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.volume <= 0:
            raise ValueError("volume must be positive")
        if self.rel_permittivity < 1:
            raise ValueError("rel_permittivity must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def permittivity(self) -> float:
        """Absolute permittivity eps0*eps_r in F/m."""
        return CONSTANTS.vacuum_permittivity * self.rel_permittivity


@dataclass(frozen=True)
class BiasDrive:
    """Triangular bias waveform: amplitude eb_max (V/m) and modulation
    frequency fb (Hz). A full period has four linear ramps, hence the rate
    4 * eb_max * fb."""

    eb_max: float
    fb: float

    def __post_init__(self) -> None:
        if self.eb_max < 0 or self.fb < 0:
            raise ValueError("eb_max and fb must be nonnegative")

    @property
    def ebdot(self) -> float:
        """Bias rate in V/(m s)."""
        return 4.0 * self.eb_max * self.fb


# --- field / photon conversions -------------------------------------------

def eac_from_photons(n: float, ctx: ResonatorContext) -> float:
    """Resonator ac field amplitude (V/m) at mean photon number ``n``:
    E_ac = sqrt(2 n hbar omega0 / (eps V))."""
    if n < 0:
        raise ValueError(f"photon number must be >= 0, got {n}")
    return math.sqrt(2.0 * n * CONSTANTS.reduced_planck * ctx.omega0
                     / (ctx.permittivity * ctx.volume))


def photons_from_eac(eac: float, ctx: ResonatorContext) -> float:
    """Inverse of :func:`eac_from_photons`."""
    if eac < 0:
        raise ValueError(f"field amplitude must be >= 0, got {eac}")
    return eac * eac * ctx.permittivity * ctx.volume / (
        2.0 * CONSTANTS.reduced_planck * ctx.omega0)


def rabi_max(species: TlsSpecies, eac: float) -> float:
    """Maximum Rabi frequency p*E_ac/hbar in rad/s (the x=y=1 TLS)."""
    if eac < 0:
        raise ValueError(f"field amplitude must be >= 0, got {eac}")
    return species.dipole * eac / CONSTANTS.reduced_planck


def xi_dimensionless(species: TlsSpecies, drive: BiasDrive, n: float,
                     ctx: ResonatorContext) -> float:
    """Dimensionless bias rate xi = 2 v0 / (pi Omega_R0^2).

    Evaluated through the sweep rate v0 = 2 p Ebdot / hbar and the Rabi
    frequency at photon number ``n``; algebraically identical to
    (2 eps V / (pi omega0 p)) * Ebdot / n, which :func:`xi_reduced_form`
    evaluates directly.
    """
    if n <= 0:
        raise ValueError("xi is undefined at n = 0; use the unsaturated branch")
    v0 = 2.0 * species.dipole * drive.ebdot / CONSTANTS.reduced_planck
    omega_r0 = rabi_max(species, eac_from_photons(n, ctx))
    return 2.0 * v0 / (math.pi * omega_r0 * omega_r0)


def xi_reduced_form(species: TlsSpecies, ebdot: float, n: float,
                    ctx: ResonatorContext) -> float:
    """xi via (2 eps V / (pi omega0 p)) * Ebdot / n."""
    if n <= 0:
        raise ValueError("xi is undefined at n = 0; use the unsaturated branch")
    pref = 2.0 * ctx.permittivity * ctx.volume / (
        math.pi * ctx.omega0 * species.dipole)
    return pref * ebdot / n


def input_power_at_chip(source_power_dbm: float, freq: float,
                        ctx: ResonatorContext) -> float:
    """Power (dBm) delivered to the chip through the attenuated input line."""
    return ctx.attenuation_slope * freq + source_power_dbm + ctx.attenuation_offset


def photons_from_input_power(power_dbm_at_chip: float, q_total: float,
                             q_external: float, ctx: ResonatorContext) -> float:
    """Mean photon number from the on-chip input power.

    Uses n = 2 Q^2 P_in / (Q_e hbar omega0^2) for an inductively coupled
    notch resonator. The conversion convention is isolated here so an
    alternative is a one-line change.
    """
    if q_total <= 0 or q_external <= 0:
        raise ValueError("quality factors must be positive")
    p_watt = dbm_to_watt(power_dbm_at_chip)
    return (2.0 * q_total * q_total * p_watt
            / (q_external * CONSTANTS.reduced_planck * ctx.omega0 * ctx.omega0))


# --- small scalar helpers ---------------------------------------------------

def dbm_to_watt(p_dbm: float) -> float:
    return 1e-3 * 10.0 ** (p_dbm / 10.0)


def watt_to_dbm(p_watt: float) -> float:
    if p_watt <= 0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * math.log10(p_watt / 1e-3)


def dipole_energy(p: float, field: float) -> float:
    """Bias energy scale p*E in J."""
    return p * field


def energy_in_kelvin(energy: float) -> float:
    """E / k_B."""
    return energy / CONSTANTS.boltzmann


def debye_to_si(p_debye: float) -> float:
    return p_debye * CONSTANTS.debye


def si_to_debye(p_si: float) -> float:
    return p_si / CONSTANTS.debye


def v_per_um_s_to_si(ebdot: float) -> float:
    """Bias rate V/(um s) -> V/(m s)."""
    return ebdot * 1e6


def si_to_v_per_um_s(ebdot: float) -> float:
    return ebdot * 1e-6


def equilibrium_sz(omega0: float, temperature: float) -> float:
    """Thermal spin polarization (1/2) tanh(hbar omega0 / (2 kB T))."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = CONSTANTS.reduced_planck * omega0 / (2.0 * CONSTANTS.boltzmann * temperature)
    return 0.5 * math.tanh(x)
