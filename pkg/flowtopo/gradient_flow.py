"""Sensitivity forcing and stabilized semi-implicit Allen-Cahn / Cahn-Hilliard steps."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from .fem import SolverError, p1_operators, solve_saddle, solve_spd
from .phase_field import ModelParams, PhaseField, double_well, phase_mass, solid_volume

logger = logging.getLogger(__name__)

# Relative CG tolerance for the Allen-Cahn system.
AC_TOLERANCE = 1e-12


class SensitivityField:
    """Explicit forcing of the gradient flow, kept component by component.

    Attributes:
        well (np.ndarray): ``omega'(phi) / eps2`` at vertices.
        flow (np.ndarray): Weighted flow force ``(eta1/eta2) * (j_phi - alpha' u.v)``.
        volume (np.ndarray): ``-beta (V - V_target)`` at every vertex.
        multiplier (float): The Uzawa multiplier; it enters as ``ell * V'(phi) = -ell``.
        eta2 (float): Normalization factor actually used.
        warnings (List[str]): Recoverable anomalies met while building the field.
    """

    def __init__(
        self,
        well: np.ndarray,
        flow: np.ndarray,
        volume: np.ndarray,
        multiplier: float = 0.0,
        eta2: float = 1.0,
        warnings: Optional[List[str]] = None,
    ):
        self.well = np.asarray(well, dtype=float)
        self.flow = np.asarray(flow, dtype=float)
        self.volume = np.asarray(volume, dtype=float)
        self.multiplier = float(multiplier)
        self.eta2 = float(eta2)
        self.warnings = list(warnings or [])

    @property
    def total(self) -> np.ndarray:
        return self.well + self.flow + self.volume - self.multiplier

    @classmethod
    def constant(cls, n: int, value: float) -> "SensitivityField":
        """A spatially constant forcing, mostly useful for testing the steps."""
        zeros = np.zeros(n)
        return cls(zeros, zeros, np.full(n, float(value)))


class StepReport(BaseModel):
    """Diagnostics of one gradient-flow step."""

    dissipation_bound: float
    phi_min: float
    phi_max: float
    solver_iterations: int = 0
    mass_before: float
    mass_after: float
    projection_gradient_ok: Optional[bool] = None


class DissipationReport(BaseModel):
    """Outcome of a monotonicity check over an energy history."""

    flagged: List[int] = Field(default_factory=list)
    largest_increase: float = 0.0
    largest_index: Optional[int] = None
    tolerance: float = 0.0

    @property
    def monotone(self) -> bool:
        return not self.flagged


def sensitivity_density(
    phase: PhaseField,
    state,
    adjoint,
    params: ModelParams,
    ell: float,
    problem,
) -> SensitivityField:
    """Assemble the nodal sensitivity forcing at the current phase field.

    The flow force is the quadrature-consistent Lagrangian derivative divided by
    the lumped masses. With ``normalize_sensitivity`` it is scaled by
    ``eta1 / ||flow force||_L2``, otherwise by ``eta1``.

    Args:
        phase (PhaseField): Current phase field.
        state (FlowState): State solved for ``phase``.
        adjoint (FlowState): Adjoint solved at ``state``.
        params (ModelParams): Model parameters.
        ell (float): Uzawa multiplier.
        problem (FlowProblem): The flow problem both states belong to.

    Returns:
        SensitivityField: The forcing components.
    """
    ops = p1_operators(phase.mesh)
    _, d_omega = double_well(phase.values)
    well = d_omega / params.eps2

    raw = problem.brinkman_sensitivity(state, adjoint, phase) / ops.lumped
    warnings = []
    eta2 = 1.0
    if params.normalize_sensitivity:
        norm = float(np.sqrt(raw @ (ops.mass @ raw)))
        if norm < 1e-14:
            message = f"Flow force norm {norm:.3e} too small; normalization skipped"
            logger.warning(message)
            warnings.append(message)
        else:
            eta2 = norm
    flow = (params.eta1 / eta2) * raw

    volume_force = -params.beta * (solid_volume(phase) - params.v_target)
    volume = np.full(phase.mesh.n_vertices, volume_force)
    return SensitivityField(well, flow, volume, ell, eta2, warnings)


def energy_gradient(
    phase: PhaseField, forcing: SensitivityField, params: ModelParams
) -> np.ndarray:
    """Discrete gradient ``eps1*K*phi + L*U`` of the reduced energy.

    With ``eta1 = 1``, no normalization and zero multiplier, ``d @ gradient``
    is the directional derivative of the total energy along nodal direction ``d``.
    """
    ops = p1_operators(phase.mesh)
    return params.eps1 * (ops.stiffness @ phase.values) + ops.lumped * forcing.total


def allen_cahn_step(
    phase: PhaseField, forcing: SensitivityField, params: ModelParams
) -> Tuple[PhaseField, StepReport]:
    """One stabilized semi-implicit Allen-Cahn step (no projection).

    Solves ``((1/tau + S0) M + (eps1 + S1) K) phi' = (1/tau + S0) M phi
    + S1 K phi - L U`` with natural boundary conditions.

    Returns:
        Tuple[PhaseField, StepReport]: The new field and the step diagnostics.
    """
    ops = p1_operators(phase.mesh)
    phi = phase.values
    shift = 1.0 / params.tau + params.s0
    matrix = shift * ops.mass + (params.eps1 + params.s1) * ops.stiffness
    rhs = (
        shift * (ops.mass @ phi)
        + params.s1 * (ops.stiffness @ phi)
        - ops.lumped * forcing.total
    )
    new_phi, iterations = solve_spd(
        matrix, rhs, tol=AC_TOLERANCE, x0=phi, return_iterations=True
    )
    nu = -(new_phi - phi) / params.tau
    bound = -params.tau * float(nu @ (ops.mass @ nu))
    new_phase = phase.with_values(new_phi)
    report = StepReport(
        dissipation_bound=bound,
        phi_min=new_phase.min,
        phi_max=new_phase.max,
        solver_iterations=iterations,
        mass_before=phase_mass(phase),
        mass_after=phase_mass(new_phase),
    )
    return new_phase, report


def cahn_hilliard_step(
    phase: PhaseField, forcing: SensitivityField, params: ModelParams
) -> Tuple[PhaseField, PhaseField, StepReport]:
    """One stabilized semi-implicit Cahn-Hilliard step in mixed form.

    Unknowns ``(phi', nu)`` solve::

        M phi'/tau + K nu = M phi/tau
        -(eps1 + S1) K phi' - S0 M phi' + M nu = -S1 K phi + L U - S0 M phi

    Returns:
        Tuple[PhaseField, PhaseField, StepReport]: New field, chemical potential
        and the step diagnostics.

    Raises:
        SolverError: If the linear solve fails or mass is not conserved.
    """
    ops = p1_operators(phase.mesh)
    M, K = ops.mass, ops.stiffness
    phi = phase.values
    tau = params.tau
    matrix = sp.bmat(
        [
            [M / tau, K],
            [-(params.eps1 + params.s1) * K - params.s0 * M, M],
        ],
        format="csr",
    )
    rhs = np.concatenate(
        [
            (M @ phi) / tau,
            -params.s1 * (K @ phi) + ops.lumped * forcing.total - params.s0 * (M @ phi),
        ]
    )
    solution = solve_saddle(matrix, rhs)
    n = len(phi)
    new_phase = phase.with_values(solution[:n])
    nu = phase.with_values(solution[n:])

    bound = -tau * float(nu.values @ (K @ nu.values))
    mass_before = phase_mass(phase)
    mass_after = phase_mass(new_phase)
    drift = abs(mass_after - mass_before)
    if drift > 1e-10 * phase.mesh.domain_area:
        logger.error(f"Cahn-Hilliard step changed the mass by {drift:.3e}")
        raise SolverError(f"Mass not conserved: drift {drift:.3e}")
    report = StepReport(
        dissipation_bound=bound,
        phi_min=new_phase.min,
        phi_max=new_phase.max,
        mass_before=mass_before,
        mass_after=mass_after,
    )
    return new_phase, nu, report


def uzawa_update(ell: float, phase: PhaseField, params: ModelParams) -> float:
    """Multiplier update ``ell + beta (V(phi) - V_target)``."""
    return float(ell + params.beta * (solid_volume(phase) - params.v_target))


def dissipation_check(history: Sequence) -> DissipationReport:
    """Flag every step where the total energy went up beyond tolerance.

    The tolerance is ``1e-9 * max(1, |W_0|)``.

    Args:
        history (Sequence): ``EnergyBreakdown`` records or plain totals.

    Returns:
        DissipationReport: Flagged indices and the largest increase.
    """
    totals = np.array([float(getattr(entry, "total", entry)) for entry in history])
    if len(totals) < 2:
        raise ValueError("dissipation_check needs at least two energy values")
    tolerance = 1e-9 * max(1.0, abs(totals[0]))
    increases = np.diff(totals)
    flagged = [int(i) + 1 for i in np.flatnonzero(increases > tolerance)]
    k = int(np.argmax(increases))
    report = DissipationReport(
        flagged=flagged,
        largest_increase=float(increases[k]),
        largest_index=k + 1,
        tolerance=tolerance,
    )
    if flagged:
        logger.warning(
            f"Energy increased at {len(flagged)} step(s); largest "
            f"{report.largest_increase:.3e} at index {report.largest_index}"
        )
    return report
