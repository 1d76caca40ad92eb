import math

import numpy as np
import pytest

import oracles
from tlsloss import bloch
from tlsloss.bloch import (
    IntegrationError, SweepConfig, dump_trace_csv, integrate_bloch_sweep,
    lz_adiabatic_probability, passage_kernel, single_passage_absorption,
    steady_state_spin,
)


def lam_to_rabi(lam, v=1.0):
    return math.sqrt(2.0 * lam * v / math.pi)


# --- analytic LZ probability -------------------------------------------------

def test_lz_probability_zero_coupling():
    assert lz_adiabatic_probability(0.0, 1e12) == 0.0


def test_lz_probability_half_at_log2():
    rabi = lam_to_rabi(math.log(2.0), v=1e12)
    assert lz_adiabatic_probability(rabi, 1e12) == pytest.approx(0.5, rel=1e-12)


def test_lz_probability_direct_value():
    got = lz_adiabatic_probability(1e6, 1e12)
    assert got == pytest.approx(1.0 - math.exp(-math.pi / 2.0), rel=1e-12)


def test_lz_probability_sweep_sign_symmetry():
    assert lz_adiabatic_probability(2e5, -1e12) == \
        lz_adiabatic_probability(2e5, 1e12)


def test_lz_probability_monotonicity():
    rabis = np.linspace(0, 3e6, 30)
    probs = [lz_adiabatic_probability(r, 1e12) for r in rabis]
    assert np.all(np.diff(probs) > 0)
    rates = np.geomspace(3e11, 1e14, 30)
    probs = [lz_adiabatic_probability(1e6, v) for v in rates]
    assert np.all(np.diff(probs) < 0)


def test_lz_probability_zero_rate_rejected():
    with pytest.raises(ValueError):
        lz_adiabatic_probability(1e6, 0.0)


def test_lz_probability_matches_schrodinger_oracle():
    for lam in (0.05, 0.5, 2.0):
        analytic = 1.0 - math.exp(-lam)
        numeric = oracles.schrodinger_lz_probability(lam)
        assert abs(numeric - analytic) < 1e-3


# --- sweep integration --------------------------------------------------------

def test_sweep_zero_rabi_silent():
    trace = integrate_bloch_sweep(SweepConfig(rabi=0.0, sweep_rate=1.0))
    assert np.all(trace.sy == 0.0)
    assert trace.integral_sy == 0.0


def test_sweep_reproduces_lz_probability():
    cfg = SweepConfig(rabi=lam_to_rabi(math.log(2.0)), sweep_rate=1.0)
    trace = integrate_bloch_sweep(cfg)
    assert trace.p_excited == pytest.approx(0.5, abs=1e-4)


@pytest.mark.parametrize("lam", [0.01, 0.3, 1.0, 4.0, 15.0])
def test_sweep_probability_grid(lam):
    cfg = SweepConfig(rabi=lam_to_rabi(lam), sweep_rate=1.0)
    trace = integrate_bloch_sweep(cfg)
    expected = 1.0 - math.exp(-lam)
    assert abs(trace.p_excited - expected) <= max(1e-3, 10 * cfg.rel_tol)


def test_sweep_norm_bounded():
    cfg = SweepConfig(rabi=lam_to_rabi(1.0), sweep_rate=1.0, gamma1=0.3)
    trace = integrate_bloch_sweep(cfg)
    norm = np.sqrt(trace.sx ** 2 + trace.sy ** 2 + trace.sz ** 2)
    assert np.all(norm <= 0.5 * (1.0 + 10 * cfg.rel_tol) + 1e-12)


def test_sweep_integral_matches_flip_identity():
    # exact identity at gamma = 0: integral(Sy) = 2 Sz0 P / W
    cfg = SweepConfig(rabi=lam_to_rabi(math.log(2.0)), sweep_rate=1.0)
    trace = integrate_bloch_sweep(cfg)
    assert trace.integral_sy == pytest.approx(0.5 / cfg.rabi, rel=1e-3)


def test_sweep_quasi_steady_matches_linear_solve_oracle():
    # slow passage with relaxation: kernel approaches the steady-state
    # absorption integrated over detuning (oracle: dense linear solve
    # + adaptive quadrature)
    om, g1 = 20.0, 20.0
    kernel = passage_kernel(om, g1, 0.5 * g1, 0.5)
    oracle = oracles.quasi_steady_absorption(om, 1.0, g1, 0.5 * g1, 0.5)
    assert kernel == pytest.approx(oracle, rel=1e-2)


def test_steady_state_spin_matches_linear_solve():
    for (om, d, g1) in [(1.0, 0.5, 0.2), (3.0, -4.0, 1.0), (0.1, 10.0, 2.0)]:
        mine = steady_state_spin(om, d, g1, g1 / 2, 0.5)
        ref = oracles.steady_state_bloch(om, d, g1, g1 / 2, 0.5)
        assert np.allclose(mine, ref, rtol=1e-12, atol=1e-15)


def test_window_doubling_converged():
    for (om, g1) in [(lam_to_rabi(math.log(2.0)), 0.0), (2.0, 0.6),
                     (10.0, 10.0)]:
        auto = max(bloch.EDGE_RABI * om, bloch.EDGE_GAMMA * g1,
                   bloch.EDGE_FRESNEL)
        base = single_passage_absorption(SweepConfig(
            rabi=om, sweep_rate=1.0, gamma1=g1, window_half_width=auto))
        double = single_passage_absorption(SweepConfig(
            rabi=om, sweep_rate=1.0, gamma1=g1, window_half_width=2 * auto))
        assert abs(double - base) / abs(base) < 1e-3


def test_sweep_direction_symmetry():
    cfg_f = SweepConfig(rabi=1.0, sweep_rate=1.0, gamma1=0.2)
    cfg_b = SweepConfig(rabi=1.0, sweep_rate=-1.0, gamma1=0.2)
    a = single_passage_absorption(cfg_f)
    b = single_passage_absorption(cfg_b)
    assert a == pytest.approx(b, rel=1e-6)


# --- single-passage absorption -------------------------------------------------

def test_absorption_closed_form_mid_regime():
    for lam in (0.2, 1.0, 3.0):
        cfg = SweepConfig(rabi=lam_to_rabi(lam), sweep_rate=1.0)
        got = single_passage_absorption(cfg)
        expected = (1.0 - math.exp(-lam)) / lam
        assert got == pytest.approx(expected, rel=1e-2)


def test_absorption_nonadiabatic_limit():
    # v -> infinity at fixed rabi: kernel -> 1
    cfg = SweepConfig(rabi=1.0, sweep_rate=1e6)
    assert single_passage_absorption(cfg) == pytest.approx(1.0, abs=1e-3)


def test_absorption_adiabatic_suppression():
    # rabi -> infinity at fixed v: kernel ~ 1/Lam -> 0+
    k_20 = passage_kernel(lam_to_rabi(20.0), 0.0, 0.0)
    k_80 = passage_kernel(lam_to_rabi(80.0), 0.0, 0.0)
    assert 0.0 < k_80 < k_20 < 0.06


def test_kernel_continuity_across_adiabatic_cap():
    lam_lo = bloch.LAMBDA_CAP * 0.94
    lam_hi = bloch.LAMBDA_CAP * 1.06
    g1 = 0.01
    k_lo = passage_kernel(lam_to_rabi(lam_lo), g1, g1 / 2)
    k_hi = passage_kernel(lam_to_rabi(lam_hi), g1, g1 / 2)
    # values straddle the ODE/asymptotic switch; the kernel itself shrinks
    # like 1/Lam so a few percent of continuity slack is enough
    assert abs(k_hi - k_lo) / k_lo < 0.1


def test_kernel_continuity_across_gamma_cap():
    om = 1.5
    g_lo = bloch.GAMMA_TILDE_CAP * 0.9
    g_hi = bloch.GAMMA_TILDE_CAP * 1.1
    k_lo = passage_kernel(om, g_lo, g_lo / 2)
    k_hi = passage_kernel(om, g_hi, g_hi / 2)
    assert abs(k_hi - k_lo) / k_lo < 0.02


def test_thermal_polarization_scales_absorption():
    cfg_cold = SweepConfig(rabi=1.0, sweep_rate=1.0, sz_equilibrium=0.5)
    cfg_warm = SweepConfig(rabi=1.0, sweep_rate=1.0, sz_equilibrium=0.25)
    a = single_passage_absorption(cfg_cold)
    b = single_passage_absorption(cfg_warm)
    assert b == pytest.approx(0.5 * a, rel=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(rabi=-1.0, sweep_rate=1.0)
    with pytest.raises(ValueError):
        SweepConfig(rabi=1.0, sweep_rate=0.0)
    with pytest.raises(ValueError):
        SweepConfig(rabi=1.0, sweep_rate=1.0, gamma1=-0.1)
    with pytest.raises(ValueError):
        SweepConfig(rabi=1.0, sweep_rate=1.0, rel_tol=0.0)
    with pytest.raises(ValueError):
        SweepConfig(rabi=1.0, sweep_rate=1.0, sz_equilibrium=0.7)


def test_integration_failure_carries_time(monkeypatch):
    monkeypatch.setattr(bloch, "_MAX_STEPS", 10)
    with pytest.raises(IntegrationError) as err:
        integrate_bloch_sweep(SweepConfig(rabi=1.0, sweep_rate=1.0))
    assert math.isfinite(err.value.t_fail)


def test_trace_csv_dump(tmp_path):
    trace = integrate_bloch_sweep(SweepConfig(rabi=1.0, sweep_rate=1.0))
    path = tmp_path / "trace.csv"
    dump_trace_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_s,sx,sy,sz"
    assert len(lines) == len(trace.times) + 1
    cells = lines[1].split(",")
    assert len(cells) == 4
    float(cells[0])
