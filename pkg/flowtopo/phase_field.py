"""Phase-field ingredients: double well, permeability, projection, volume and energies."""

import logging
from typing import Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .fem import FunctionSpace, element_data, p1_operators
from .mesh import Mesh
from .utils import compile_expression

logger = logging.getLogger(__name__)


class PhaseField:
    """Nodal P1 phase field; 1 marks fluid, 0 marks solid.

    The coefficient array is read-only; derive new fields with ``with_values``.

    Args:
        values (array-like): One value per mesh vertex.
        mesh (Mesh): The mesh.
    """

    def __init__(self, values, mesh: Mesh):
        values = np.array(values, dtype=float).ravel()
        if values.shape[0] != mesh.n_vertices:
            raise ValueError(
                f"Phase field has {values.shape[0]} values, mesh has "
                f"{mesh.n_vertices} vertices"
            )
        values.flags.writeable = False
        self.values = values
        self.mesh = mesh
        self.min = float(values.min())
        self.max = float(values.max())

    def __repr__(self) -> str:
        return f"PhaseField(n={len(self.values)}, min={self.min:.4g}, max={self.max:.4g})"

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values) -> "PhaseField":
        return PhaseField(values, self.mesh)

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "PhaseField":
        return cls(np.full(mesh.n_vertices, float(value)), mesh)

    @classmethod
    def from_expression(cls, mesh: Mesh, expression: Union[str, float]) -> "PhaseField":
        """Nodal interpolation of a closed-form expression in ``x`` and ``y``."""
        func = compile_expression(expression)
        return cls(func(mesh.vertices[:, 0], mesh.vertices[:, 1]), mesh)


class ModelParams(BaseModel):
    """Parameters of the free energy and of the gradient-flow scheme."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    eps1: float = Field(0.001, gt=0, description="Gradient-energy weight")
    eps2: float = Field(0.1, gt=0, description="Double-well scale")
    beta: float = Field(5.0, ge=0, description="Volume penalty weight")
    v_target: float = Field(0.4, ge=0, description="Target solid volume")
    alpha0: float = Field(1000.0, ge=0, description="Permeability ceiling")
    eta1: float = Field(1.0, ge=0, description="Sensitivity weight")
    normalize_sensitivity: bool = True
    s0: float = Field(1.0, ge=0)
    s1: float = Field(0.1, ge=0)
    tau: float = Field(0.005, gt=0, description="Pseudo-time step")
    scheme: Literal["allen-cahn", "cahn-hilliard"] = "allen-cahn"
    n_inner: int = Field(10, ge=1)
    use_projection: bool = True
    well_quadrature: Literal["nodal", "quadrature"] = "nodal"

    @model_validator(mode="after")
    def _projection_scheme(self):
        if self.scheme == "cahn-hilliard" and self.use_projection:
            raise ValueError(
                "use_projection cannot be combined with scheme=cahn-hilliard "
                "(projection breaks mass conservation)"
            )
        return self


class EnergyBreakdown(BaseModel):
    """Terms of the total free energy for one phase field and its state."""

    model_config = ConfigDict(frozen=True)

    gl_gradient: float
    gl_well: float
    dissipation: float
    volume_penalty: float
    total: float
    dissipation_bound: float = 0.0

    @classmethod
    def from_terms(
        cls,
        gl_gradient: float,
        gl_well: float,
        dissipation: float,
        volume_penalty: float,
        dissipation_bound: float = 0.0,
    ) -> "EnergyBreakdown":
        total = gl_gradient + gl_well + dissipation + volume_penalty
        return cls(
            gl_gradient=gl_gradient,
            gl_well=gl_well,
            dissipation=dissipation,
            volume_penalty=volume_penalty,
            total=total,
            dissipation_bound=dissipation_bound,
        )

    @model_validator(mode="after")
    def _consistent(self):
        terms = (self.gl_gradient, self.gl_well, self.dissipation, self.volume_penalty)
        scale = max(1.0, sum(abs(t) for t in terms))
        if any(t < -1e-12 * scale for t in terms):
            raise ValueError(f"Energy terms must be non-negative, got {terms}")
        if abs(self.total - sum(terms)) > 1e-12 * scale:
            raise ValueError("total must equal the sum of the four energy terms")
        return self


def double_well(phi) -> Tuple[np.ndarray, np.ndarray]:
    """Piecewise double-well potential and its derivative.

    ``phi**2`` below 0, ``phi**2 (phi-1)**2 / 4`` on [0, 1] and ``(phi-1)**2`` above 1.

    Args:
        phi (float | np.ndarray): Phase values.

    Returns:
        Tuple: ``(value, derivative)`` with the shape of ``phi``.
    """
    phi = np.asarray(phi, dtype=float)
    middle = 0.25 * phi**2 * (phi - 1.0) ** 2
    d_middle = 0.5 * phi * (phi - 1.0) * (2.0 * phi - 1.0)
    value = np.where(phi < 0.0, phi**2, np.where(phi > 1.0, (phi - 1.0) ** 2, middle))
    deriv = np.where(
        phi < 0.0, 2.0 * phi, np.where(phi > 1.0, 2.0 * (phi - 1.0), d_middle)
    )
    return value[()], deriv[()]


def _values(phase) -> np.ndarray:
    return phase.values if isinstance(phase, PhaseField) else np.asarray(phase, float)


def permeability(phase, alpha0: float = 1000.0) -> Tuple[np.ndarray, np.ndarray]:
    """Nodal Brinkman coefficient ``alpha0 (1 - clamp(phi))`` and its derivative.

    The derivative is ``-alpha0`` strictly inside (0, 1) and 0 elsewhere.
    """
    phi = _values(phase)
    alpha = alpha0 * (1.0 - np.clip(phi, 0.0, 1.0))
    dalpha = np.where((phi > 0.0) & (phi < 1.0), -alpha0, 0.0)
    return alpha, dalpha


def project_unit_interval(phase: PhaseField) -> PhaseField:
    """Clamp nodal values to [0, 1]; values already inside are untouched."""
    return phase.with_values(np.clip(phase.values, 0.0, 1.0))


def solid_volume(phase: PhaseField) -> float:
    """Integral of ``1 - clamp(phi)`` over the domain (exact for P1 data)."""
    lumped = p1_operators(phase.mesh).lumped
    return float(lumped @ (1.0 - np.clip(phase.values, 0.0, 1.0)))


def phase_mass(phase: PhaseField) -> float:
    """Integral of ``phi`` over the domain."""
    return float(p1_operators(phase.mesh).lumped @ phase.values)


def gradient_norm_sq(phase: PhaseField) -> float:
    """``||grad phi||^2`` via the P1 stiffness matrix."""
    K = p1_operators(phase.mesh).stiffness
    return float(phase.values @ (K @ phase.values))


def ginzburg_landau(phase: PhaseField, params: ModelParams) -> Tuple[float, float]:
    """Gradient and double-well parts of the Ginzburg-Landau energy.

    The well term uses nodal quadrature by default and the degree-6 rule when
    ``params.well_quadrature == "quadrature"``.

    Returns:
        Tuple[float, float]: ``(0.5*eps1*||grad phi||^2, (1/eps2) * int omega(phi))``.
    """
    gradient_term = 0.5 * params.eps1 * gradient_norm_sq(phase)
    if params.well_quadrature == "nodal":
        omega, _ = double_well(phase.values)
        integral = float(p1_operators(phase.mesh).lumped @ omega)
    else:
        data = element_data(FunctionSpace(phase.mesh, "P1"), 6)
        phi_q = phase.values[phase.mesh.triangles] @ data.p1.T
        omega, _ = double_well(phi_q)
        integral = float(np.sum(data.dx * omega))
    return float(gradient_term), integral / params.eps2


def volume_penalty(phase: PhaseField, params: ModelParams) -> float:
    return 0.5 * params.beta * (solid_volume(phase) - params.v_target) ** 2


def total_energy(
    phase: PhaseField,
    state,
    params: ModelParams,
    problem=None,
    dissipation_bound: float = 0.0,
) -> EnergyBreakdown:
    """Evaluate every term of the total free energy.

    Args:
        phase (PhaseField): The phase field.
        state (FlowState, optional): Flow solved for ``phase``; ``None`` means u = 0.
        params (ModelParams): Energy parameters.
        problem (FlowProblem, optional): Needed to evaluate the dissipation
            when ``state`` is given.
        dissipation_bound (float): Bound of the step that produced ``phase``.

    Returns:
        EnergyBreakdown: The energy terms and their sum.
    """
    gl_gradient, gl_well = ginzburg_landau(phase, params)
    if state is None:
        dissipation = 0.0
    else:
        if problem is None:
            raise ValueError("total_energy needs the FlowProblem to evaluate dissipation")
        dissipation = problem.dissipation_energy(state, phase)
    return EnergyBreakdown.from_terms(
        gl_gradient,
        gl_well,
        dissipation,
        volume_penalty(phase, params),
        dissipation_bound,
    )


def projection_gradient_ok(before: PhaseField, after: PhaseField) -> bool:
    """Check ``||grad P(phi)|| <= ||grad phi||`` for a projection step.

    Both sides are clipped at zero and compared with a rounding allowance of
    ``sum|K| * max|phi|^2 * eps``, so constant fields never report a violation.
    """
    K = p1_operators(before.mesh).stiffness
    g_before = max(gradient_norm_sq(before), 0.0)
    g_after = max(gradient_norm_sq(after), 0.0)
    scale = max(np.max(np.abs(before.values)), np.max(np.abs(after.values)), 1.0)
    allowance = float(abs(K).sum()) * scale**2 * np.finfo(float).eps
    ok = g_after <= g_before * (1.0 + 1e-12) + allowance
    if not ok:
        logger.warning(
            f"Projection increased the gradient norm: {np.sqrt(g_after):.6e} > "
            f"{np.sqrt(g_before):.6e}"
        )
    return ok
