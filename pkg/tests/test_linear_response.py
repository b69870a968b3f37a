"""Tests for the linear response of the Fermi sea."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.experiments import response_context
from harness.verification import random_gaussian
from lattice_core.coulomb import coulomb_D, coulomb_norm
from lattice_core.lattice import Lattice, PeriodicField, PlaneWaveBasis, periodized_gaussians
from response.linear_response import (
    ResponseContext,
    apply_K,
    apply_L,
    b_m_quadratic,
    f_aux,
    finite_matrix_kinetic_check,
    kinetic_identity_residual,
    macro_basis,
    solve_dielectric,
)
from utils.errors import ConfigError, DomainMismatch, IncommensurateGrids


class TestResponseOperator:
    """Test L and the screened operator K."""

    def test_L_is_coulomb_symmetric_and_positive(self, response_ctx, rng):
        """Test D(a, L b) = D(L a, b) and D(a, L a) >= 0."""
        a = random_gaussian(response_ctx.basis, rng, 0.5, 1.0)
        b = random_gaussian(response_ctx.basis, rng, 0.5, 1.0)
        la, lb = apply_L(response_ctx, a), apply_L(response_ctx, b)
        scale = coulomb_norm(a) * coulomb_norm(b)
        assert abs(coulomb_D(a, lb) - coulomb_D(la, b)) <= 1e-10 * scale
        assert coulomb_D(a, la) >= 0.0
        assert la.integral() == pytest.approx(0.0, abs=1e-12)

    def test_dielectric_solve(self, response_ctx, small_defect):
        """Test (1 + L) x = nu to the CG tolerance with the mean of nu kept."""
        x, iterations = solve_dielectric(response_ctx, small_defect)
        residual = x + apply_L(response_ctx, x) - small_defect
        assert iterations > 0
        assert coulomb_norm(residual) <= 10 * response_ctx.cg_tol * coulomb_norm(small_defect)
        assert x.integral() == pytest.approx(small_defect.integral(), rel=1e-10)

    def test_f_aux_bounds(self, response_ctx, small_defect):
        """Test -1/2 D(nu, nu) <= F_aux <= 0."""
        energy = f_aux(response_ctx, small_defect)
        assert -0.5 * coulomb_D(small_defect, small_defect) <= energy <= 0.0
        screened = apply_K(response_ctx, small_defect)
        assert screened.integral() == pytest.approx(0.0, abs=1e-12)

    def test_vacuum_does_not_screen(self, small_config, vacuum_host):
        """Test a z = 0 host returns the source unchanged."""
        ctx = response_context(small_config, vacuum_host)
        nu = periodized_gaussians(ctx.basis, [[2.0, 2.0, 2.0]], [0.5], [1.0])
        x, iterations = solve_dielectric(ctx, nu)
        assert iterations == 0
        assert x is nu
        assert f_aux(ctx, nu) == 0.0

    def test_foreign_basis(self, response_ctx):
        """Test densities on another basis are refused."""
        other = PeriodicField.zeros(PlaneWaveBasis.from_cutoff(Lattice.cubic(3.0), 5.0))
        with pytest.raises(DomainMismatch):
            apply_L(response_ctx, other)

    def test_context_settings(self, model_host):
        """Test invalid solver settings are config errors."""
        with pytest.raises(ConfigError):
            ResponseContext(model_host, (2, 2, 2), n_empty=0)
        with pytest.raises(ConfigError):
            ResponseContext(model_host, (2, 2, 2), cg_tol=0.0)


class TestKineticIdentity:
    """Test Tr(|H0 - eF| Q1^2) = -1/2 Tr0(Q1 V)."""

    def test_supercell_identity(self, response_ctx, rng):
        """Test the identity holds with every band kept."""
        for _ in range(3):
            nu = random_gaussian(response_ctx.basis, rng, 0.5, 0.8)
            assert kinetic_identity_residual(response_ctx, nu) < 1e-9

    def test_zero_source(self, response_ctx):
        """Test the residual of a zero density is zero."""
        assert kinetic_identity_residual(response_ctx, response_ctx.zeros()) == 0.0

    def test_finite_matrix_order(self):
        """Test the residual of the exact projector difference is linear in t."""
        result = finite_matrix_kinetic_check()
        assert result["order"] >= 0.9
        residuals = [row["residual"] for row in result["rows"]]
        assert residuals[-1] < residuals[0]


class TestRescaledOperator:
    """Test B_m on the macroscopic box."""

    def test_macro_basis(self, response_ctx):
        """Test the macroscopic basis keeps the supercell Miller set on a box scaled by m."""
        macro = macro_basis(response_ctx, 0.5)
        assert macro.lattice.is_close(response_ctx.basis.lattice.scaled(0.5))
        np.testing.assert_array_equal(macro.gvectors, response_ctx.basis.gvectors)

    def test_b_m_bounds(self, response_ctx):
        """Test 0 <= int B_m(nu) nu <= D(nu, nu)."""
        for m in (1.0, 0.5):
            macro = macro_basis(response_ctx, m)
            center = 0.5 * macro.lattice.basis.sum(axis=1)
            nu = periodized_gaussians(macro, [center], [1.0], [0.6 * m])
            value = b_m_quadratic(response_ctx, nu, m)
            assert 0.0 <= value <= coulomb_D(nu, nu) * (1 + 1e-10)

    def test_b_m_needs_matching_box(self, response_ctx):
        """Test B_m refuses a density whose box is not m times the supercell."""
        macro = macro_basis(response_ctx, 0.5)
        nu = periodized_gaussians(macro, [[0.5, 0.5, 0.5]], [1.0], [0.3])
        with pytest.raises(IncommensurateGrids):
            b_m_quadratic(response_ctx, nu, 0.25)
