"""
Invariant suite run by ``--verify``.

This module handles:
1. Exact identities: energy decoupling, the projector identity, the
   kinetic identities and the double evaluation of F^P
2. Bounds on random defects: F_crys, rho_Q, B_m and F^P
3. Symmetries: B_m under lattice translations, F^P under all translations

Each check becomes one row with its value, tolerance and verdict; failed
checks are listed under ``checks["violations"]``.
"""

import logging
from typing import List, Optional

import numpy as np

from crystal.cell_oscillations import energy_decouple, solve_u_per
from crystal.crystal_scf import CrystalGroundState
from harness.analysis import ConvergenceReport
from harness.config import ExperimentConfig
from harness.experiments import polaron_grid, response_context, supercell_defect
from lattice_core.coulomb import coulomb_D
from lattice_core.lattice import PeriodicField, PlaneWaveBasis, periodized_gaussians
from pekar.pekar_solver import cubic_box, gaussian_trial, normalize, pekar_energy_check
from response.defect_scf import scf_defect
from response.dielectric import DielectricMatrix, pekar_interaction
from response.linear_response import (
    ResponseContext,
    apply_B_m,
    b_m_quadratic,
    finite_matrix_kinetic_check,
    kinetic_identity_residual,
    macro_basis,
)

logger = logging.getLogger(__name__)

DECOUPLING_TOL = 1e-11
PROJECTOR_TOL = 1e-10
KINETIC_TOL = 1e-9
DOUBLE_EVALUATION_TOL = 1e-10
BOUND_SLACK = 1e-10
TRANSLATION_TOL = 1e-12
COVARIANCE_TOL = 1e-10
DECOUPLING_M = 0.25
DECOUPLING_REPS = 3


class _Suite:
    def __init__(self) -> None:
        self.report = ConvergenceReport("verification", param="name", ordered=False)

    def check(self, name: str, value: float, tolerance: float, passed: Optional[bool] = None) -> None:
        ok = bool(value <= tolerance) if passed is None else bool(passed)
        self.report.add_row(
            {"name": name, "status": "success", "value": float(value), "tolerance": tolerance, "passed": ok}
        )
        if not ok:
            logger.warning("invariant %s violated: %.3e (tolerance %.1e)", name, value, tolerance)

    def violations(self) -> List[str]:
        return [row["name"] for row in self.report.rows if not row["passed"]]


def smooth_random_state(grid: PlaneWaveBasis, rng: np.random.Generator, width: float) -> np.ndarray:
    """Normalized real random function with Gaussian-damped frequencies."""
    k = grid.grid_frequencies()
    damping = np.exp(-0.5 * width**2 * np.sum(k * k, axis=0))
    values = np.real(np.fft.ifftn(np.fft.fftn(rng.standard_normal(grid.grid_dims)) * damping))
    return normalize(values, grid)


def random_gaussian(
    basis: PlaneWaveBasis, rng: np.random.Generator, charge: float, width: float
) -> PeriodicField:
    position = basis.lattice.basis @ rng.random(3)
    return periodized_gaussians(
        basis, [position], [charge * rng.uniform(0.2, 1.0)], [width * rng.uniform(0.7, 1.3)]
    )


def _decoupling(suite: _Suite, cfg: ExperimentConfig, crystal: CrystalGroundState, rng: np.random.Generator) -> None:
    cell = solve_u_per(crystal.v0, DECOUPLING_M, cfg.experiment.cell_grid_dims)
    grid = polaron_grid(crystal, cell, DECOUPLING_REPS, DECOUPLING_M)
    width = 0.1 * float(np.linalg.norm(grid.lattice.basis, axis=0).min())
    worst = 0.0
    for _ in range(5):
        psi = smooth_random_state(grid, rng, width)
        _, decoupling = energy_decouple(psi, grid, cell, DECOUPLING_M, crystal.v0)
        worst = max(worst, decoupling["residual"])
    suite.check("energy_decoupling", worst, DECOUPLING_TOL)


def _bounds(
    suite: _Suite,
    cfg: ExperimentConfig,
    ctx: ResponseContext,
    eps: DielectricMatrix,
    rng: np.random.Generator,
    samples: int,
) -> None:
    m = cfg.experiment.m_list[0]
    macro = macro_basis(ctx, m)
    counts = {"f_crys": 0, "rho_q": 0, "b_m": 0, "pekar": 0}
    for _ in range(samples):
        nu = random_gaussian(ctx.basis, rng, cfg.defect.charge, cfg.defect.width)
        d_nu = coulomb_D(nu, nu)
        slack = BOUND_SLACK * max(d_nu, 1.0)
        state = scf_defect(
            ctx, nu, mix=cfg.defect.mix, tol=cfg.defect.tol, max_iter=cfg.defect.max_iter,
            dimension_cap=cfg.defect.dimension_cap,
        )
        if not -0.5 * d_nu - slack <= state.f_crys <= slack:
            counts["f_crys"] += 1
        if coulomb_D(state.rho_q, state.rho_q) > 4.0 * d_nu + slack:
            counts["rho_q"] += 1

        macro_nu = random_gaussian(macro, rng, cfg.macro.charge, cfg.macro.width)
        d_macro = coulomb_D(macro_nu, macro_nu)
        b_value = b_m_quadratic(ctx, macro_nu, m)
        if not -BOUND_SLACK * d_macro <= b_value <= d_macro * (1.0 + BOUND_SLACK):
            counts["b_m"] += 1
        if pekar_interaction(macro_nu, eps, "periodic") > BOUND_SLACK:
            counts["pekar"] += 1
    for name, count in counts.items():
        suite.check(f"bound_{name}", count, 0)


def _translations(
    suite: _Suite, cfg: ExperimentConfig, ctx: ResponseContext, eps: DielectricMatrix, rng: np.random.Generator
) -> None:
    m = cfg.experiment.m_list[0]
    macro = macro_basis(ctx, m)
    nu = random_gaussian(macro, rng, cfg.macro.charge, cfg.macro.width)

    # one scaled crystal cell is a symmetry of the macroscopic problem
    cell_shift = m * ctx.crystal.lattice.basis[:, 0]
    moved = apply_B_m(ctx, nu.translated(cell_shift), m)
    expected = apply_B_m(ctx, nu, m).translated(cell_shift)
    covariance = (moved - expected).l2_norm() / max(expected.l2_norm(), 1e-300)
    suite.check("b_m_translation_covariance", covariance, COVARIANCE_TOL)

    shift = macro.lattice.basis @ rng.random(3)
    value = pekar_interaction(nu, eps, "periodic")
    shifted = pekar_interaction(nu.translated(shift), eps, "periodic")
    suite.check(
        "pekar_translation_invariance", abs(value - shifted) / max(abs(value), 1e-300), TRANSLATION_TOL
    )


def run_verification(
    cfg: ExperimentConfig,
    crystal: CrystalGroundState,
    eps: DielectricMatrix,
    threads: Optional[int] = None,
    samples: int = 10,
) -> ConvergenceReport:
    """
    Run every invariant check on the configured crystal.

    Args:
        cfg: Experiment configuration (supercell, tolerances, seed)
        crystal: Host crystal
        eps: Dielectric matrix of the host
        samples: Random defects for the bound checks

    Returns:
        Report with one row per check and the list of violations
    """
    rng = np.random.default_rng(cfg.seed)
    suite = _Suite()
    ctx = response_context(cfg, crystal, threads=threads)

    _decoupling(suite, cfg, crystal, rng)

    nu = supercell_defect(cfg, ctx)
    state = scf_defect(
        ctx, nu, mix=cfg.defect.mix, tol=cfg.defect.tol, max_iter=cfg.defect.max_iter,
        dimension_cap=cfg.defect.dimension_cap,
    )
    suite.check("projector_identity", state.projector_identity_error(), PROJECTOR_TOL)

    residuals = [
        kinetic_identity_residual(ctx, random_gaussian(ctx.basis, rng, cfg.defect.charge, cfg.defect.width))
        for _ in range(3)
    ]
    suite.check("kinetic_identity", max(residuals), KINETIC_TOL)
    finite = finite_matrix_kinetic_check(seed=cfg.seed)
    suite.check("finite_matrix_kinetic_order", finite["order"], 0.9, passed=finite["order"] >= 0.9)

    grid = cubic_box(cfg.pekar.box_length, min(cfg.pekar.points, 17))
    psi = gaussian_trial(grid, cfg.pekar.width)
    suite.check("pekar_double_evaluation", pekar_energy_check(psi, grid, eps, cfg.pekar.kernel), DOUBLE_EVALUATION_TOL)

    _bounds(suite, cfg, ctx, eps, rng, samples)
    _translations(suite, cfg, ctx, eps, rng)

    report = suite.report
    report.checks["violations"] = suite.violations()
    report.checks["passed"] = not report.checks["violations"]
    return report.finish()
