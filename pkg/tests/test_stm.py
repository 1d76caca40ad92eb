import math

import numpy as np
import pytest

import oracles
from tlsloss import stm
from tlsloss.stm import (
    StmEnsemble, loss_with_relaxation, loss_with_relaxation_batch,
    saturation_loss, standard_loss_point, standard_loss_surface,
    universal_loss_closed_form,
)
from tlsloss.units import TlsSpecies, debye_to_si

# frozen against an independent adaptive 2-D quadrature (efficiency: the
# oracle itself is also run below at a looser tolerance)
UNIVERSAL_AT_XI_1 = 0.570956927929


def test_universal_zero():
    assert universal_loss_closed_form(0.0) == 0.0


def test_universal_negative_rejected():
    with pytest.raises(ValueError):
        universal_loss_closed_form(-0.1)


def test_universal_monotone_and_bounded():
    grid = np.geomspace(1e-3, 1e4, 80)
    vals = np.array([universal_loss_closed_form(x) for x in grid])
    assert np.all(np.diff(vals) >= 0)
    assert np.all(vals >= 0)
    assert np.all(vals <= 1.0 + 1e-3)


def test_universal_saturates_to_one():
    assert abs(universal_loss_closed_form(1e4) - 1.0) < 5e-3


def test_universal_frozen_regression_value():
    assert universal_loss_closed_form(1.0) == pytest.approx(
        UNIVERSAL_AT_XI_1, abs=1e-9)


def test_universal_against_adaptive_quadrature():
    for xi in (1e-3, 0.03, 1.0, 30.0):
        assert universal_loss_closed_form(xi) == pytest.approx(
            oracles.quad_universal_loss(xi), rel=1e-7)


def test_universal_against_monte_carlo():
    for xi in (1e-2, 1.0, 1e3):
        mc, se = oracles.mc_universal_loss(xi, n_samples=2_000_000, seed=5)
        assert abs(universal_loss_closed_form(xi) - mc) < 3.0 * se


def test_universal_quadrature_order_doubling():
    for xi in (1e-3, 1.0, 1e3):
        a = universal_loss_closed_form(xi, order=32)
        b = universal_loss_closed_form(xi, order=64)
        assert abs(a - b) / a < 1e-4


def test_relaxation_route_matches_closed_form_at_zero_gamma():
    for xi in (0.1, 1.0, 10.0):
        full = loss_with_relaxation(xi, 0.0)
        closed = universal_loss_closed_form(xi)
        assert abs(full - closed) / closed < 0.01


def test_relaxation_route_incoherent_excess():
    # slow sweeps with relaxation exceed the dissipationless curve
    lossy = loss_with_relaxation(0.01, 0.1)
    clean = universal_loss_closed_form(0.01)
    assert lossy > clean


def test_relaxation_route_nonadiabatic_limit(kernel_table):
    val = loss_with_relaxation(1e3, 0.05, kernel=kernel_table.kernel)
    assert val == pytest.approx(1.0, abs=0.01)


def test_relaxation_route_validation():
    with pytest.raises(ValueError):
        loss_with_relaxation(0.0, 0.1)
    with pytest.raises(ValueError):
        loss_with_relaxation(1.0, -0.1)


def test_kernel_table_matches_direct(kernel_table):
    assert kernel_table.validate(n_random=20, seed=7) < 1e-4


def test_table_loss_close_to_direct(kernel_table):
    for (xi, g) in [(0.1, 0.0), (1.0, 0.3), (10.0, 3.0)]:
        direct = loss_with_relaxation(xi, g)
        table = loss_with_relaxation(xi, g, kernel=kernel_table.kernel)
        assert abs(table - direct) / direct < 5e-3


def test_batch_matches_scalar(kernel_table):
    xi = np.array([0.05, 1.0, 40.0])
    g = np.array([0.0, 0.3, 2.0])
    batch = loss_with_relaxation_batch(xi, g, kernel=kernel_table.kernel,
                                       x_points=10, y_points=12)
    scalar = [loss_with_relaxation(x, gg, x_points=10, y_points=12,
                                   kernel=kernel_table.kernel)
              for x, gg in zip(xi, g)]
    assert np.allclose(batch, scalar, rtol=1e-12)


def test_quadrature_node_doubling(kernel_table):
    a = loss_with_relaxation(1.0, 0.3, x_points=10, y_points=12,
                             kernel=kernel_table.kernel)
    b = loss_with_relaxation(1.0, 0.3, x_points=20, y_points=24,
                             kernel=kernel_table.kernel)
    assert abs(a - b) / a < 1e-4


# --- saturation law ------------------------------------------------------------

def test_saturation_loss_values():
    assert saturation_loss(0.0, 1.6e-4, 3.7) == pytest.approx(1.6e-4)
    assert saturation_loss(3.7, 1.6e-4, 3.7) == pytest.approx(
        1.6e-4 / math.sqrt(2.0), rel=1e-12)


def test_saturation_loss_monotone_and_sqrt_tail():
    n = np.geomspace(1e-2, 1e8, 60)
    vals = np.array([saturation_loss(v, 1.6e-4, 3.7) for v in n])
    assert np.all(np.diff(vals) < 0)
    hi = saturation_loss(1e4 * 3.7, 1.6e-4, 3.7)
    lo = saturation_loss(1e6 * 3.7, 1.6e-4, 3.7)
    assert hi / lo == pytest.approx(10.0, rel=0.02)


def test_saturation_loss_validation():
    with pytest.raises(ValueError):
        saturation_loss(-1.0, 1.6e-4, 3.7)
    with pytest.raises(ValueError):
        saturation_loss(1.0, 1.6e-4, 0.0)


# --- surfaces -------------------------------------------------------------------

def test_surface_never_exceeds_intrinsic(paper_ensemble, paper_ctx,
                                         kernel_table):
    surface = standard_loss_surface(paper_ensemble,
                                    np.geomspace(1e6, 1e11, 6),
                                    np.geomspace(0.1, 1e4, 4), paper_ctx,
                                    kernel=kernel_table.kernel)
    assert np.all(surface.tan_delta <= paper_ensemble.tan_delta0 * (1 + 1e-9))
    assert len(surface) == 24


def test_surface_recovers_intrinsic_at_high_rate(paper_ensemble, paper_ctx,
                                                 kernel_table):
    val = standard_loss_point(paper_ensemble, 1e14, 10.0, paper_ctx,
                              kernel=kernel_table.kernel)
    assert val == pytest.approx(paper_ensemble.tan_delta0, rel=0.01)


def test_surface_unsaturated_branch(paper_ensemble, paper_ctx):
    val = standard_loss_point(paper_ensemble, 1e8, 1e-4, paper_ctx)
    assert val == paper_ensemble.tan_delta0


def test_surface_saturation_row_needs_nc(paper_ctx, paper_species):
    ens = StmEnsemble(species=paper_species, tan_delta0=1.6e-4)
    with pytest.raises(ValueError):
        standard_loss_point(ens, 0.0, 10.0, paper_ctx)


def test_surface_zero_rate_uses_saturation(paper_ensemble, paper_ctx):
    val = standard_loss_point(paper_ensemble, 0.0, 3.7, paper_ctx)
    assert val == pytest.approx(1.6e-4 / math.sqrt(2.0), rel=1e-12)


def test_surface_power_ordering(paper_ensemble, paper_ctx, kernel_table):
    # at fixed bias rate, higher photon number means stronger saturation
    lo = standard_loss_point(paper_ensemble, 1e9, 10.0, paper_ctx,
                             kernel=kernel_table.kernel)
    hi = standard_loss_point(paper_ensemble, 1e9, 1e4, paper_ctx,
                             kernel=kernel_table.kernel)
    assert hi < lo


def test_surface_monotone_in_rate(paper_ensemble, paper_ctx, kernel_table):
    rates = np.geomspace(1e7, 1e12, 10)
    vals = [standard_loss_point(paper_ensemble, r, 100.0, paper_ctx,
                                kernel=kernel_table.kernel) for r in rates]
    assert np.all(np.diff(vals) > -1e-8)


def test_ensemble_validation(paper_species):
    with pytest.raises(ValueError):
        StmEnsemble(species=paper_species, tan_delta0=0.0)
    with pytest.raises(ValueError):
        StmEnsemble(species=paper_species, tan_delta0=1e-4,
                    quadrature_order=4)
