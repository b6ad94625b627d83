"""Stationary Navier-Stokes-Brinkman state and adjoint solvers on MINI elements."""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field

from .fem import (
    FunctionSpace,
    SolverError,
    assemble_matrix,
    assemble_vector,
    element_data,
    p1_operators,
    solve_saddle,
)
from .mesh import BoundarySpec, Mesh, dirichlet_values, label_kind
from .phase_field import PhaseField, permeability

logger = logging.getLogger(__name__)


class FlowParams(BaseModel):
    """Flow model and Newton solver parameters."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    mu: float = Field(0.01, gt=0, description="Viscosity")
    alpha0: float = Field(1000.0, ge=0, description="Permeability ceiling")
    body_force: Optional[Callable] = Field(
        None, description="f(x, y) -> (fx, fy); zero when omitted"
    )
    newton_tol: float = Field(1e-8, gt=0, description="L-infinity increment tolerance")
    newton_max: int = Field(20, ge=1)
    quadrature_degree: int = Field(4, ge=1, le=6)


class NewtonReport(BaseModel):
    """Per-solve Newton history."""

    iterations: int = 0
    converged: bool = False
    increments: List[float] = Field(default_factory=list)
    residual_norm: float = float("nan")


class NewtonConvergenceError(SolverError):
    """Newton did not converge; ``report`` holds the increment history."""

    def __init__(self, message: str, report: NewtonReport):
        super().__init__(message, report.increments)
        self.report = report


class FlowState:
    """Velocity (vector MINI) and pressure (P1) coefficients.

    Args:
        velocity (np.ndarray): MINI coefficients, length ``space.dof_count``.
        pressure (np.ndarray): P1 coefficients, one per vertex.
        space (FunctionSpace): The MINI velocity space.
        role (str): ``"state"`` or ``"adjoint"``.
    """

    def __init__(
        self,
        velocity: np.ndarray,
        pressure: np.ndarray,
        space: FunctionSpace,
        role: str = "state",
    ):
        if role not in ("state", "adjoint"):
            raise ValueError(f"role must be 'state' or 'adjoint', got {role!r}")
        velocity = np.asarray(velocity, dtype=float)
        pressure = np.asarray(pressure, dtype=float)
        if velocity.shape != (space.dof_count,):
            raise ValueError(
                f"Velocity has shape {velocity.shape}, expected ({space.dof_count},)"
            )
        if pressure.shape != (space.mesh.n_vertices,):
            raise ValueError(f"Pressure has shape {pressure.shape}")
        self.velocity = velocity
        self.pressure = pressure
        self.space = space
        self.role = role

    def __repr__(self) -> str:
        return f"FlowState(role={self.role!r}, n_velocity={len(self.velocity)})"

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def vertex_velocity(self) -> np.ndarray:
        """(V, 2) velocity at the vertices (bubbles vanish there)."""
        return np.column_stack(
            [self.velocity[self.space.vertex_slice(c)] for c in range(2)]
        )

    def copy(self) -> "FlowState":
        return FlowState(self.velocity.copy(), self.pressure.copy(), self.space, self.role)


def interpolate_velocity(space: FunctionSpace, func: Callable) -> np.ndarray:
    """MINI coefficients of the vertex interpolant of ``func(x, y) -> (ux, uy)``."""
    mesh = space.mesh
    ux, uy = func(mesh.vertices[:, 0], mesh.vertices[:, 1])
    velocity = np.zeros(space.dof_count)
    velocity[space.vertex_slice(0)] = np.broadcast_to(ux, (mesh.n_vertices,))
    velocity[space.vertex_slice(1)] = np.broadcast_to(uy, (mesh.n_vertices,))
    return velocity


def _local_velocity(state: FlowState) -> np.ndarray:
    """(T, 2, 4) local MINI coefficients per component."""
    space = state.space
    return np.stack([state.velocity[space.component_dofs(c)] for c in range(2)], axis=1)


def divergence_norm(state: FlowState, degree: int = 4) -> float:
    """L2 norm of the elementwise divergence of the velocity."""
    data = element_data(state.space, degree)
    U = _local_velocity(state)
    div = np.einsum("tqa,ta->tq", data.grads[..., 0], U[:, 0]) + np.einsum(
        "tqa,ta->tq", data.grads[..., 1], U[:, 1]
    )
    return float(np.sqrt(np.sum(data.dx * div**2)))


def velocity_l2_error(state: FlowState, exact: Callable, degree: int = 6) -> float:
    """L2 distance between the discrete velocity and ``exact(x, y) -> (ux, uy)``."""
    data = element_data(state.space, degree)
    U = _local_velocity(state)
    u_q = np.einsum("qa,tca->tqc", data.values, U)
    ex, ey = exact(data.points[..., 0], data.points[..., 1])
    err = (u_q[..., 0] - ex) ** 2 + (u_q[..., 1] - ey) ** 2
    return float(np.sqrt(np.sum(data.dx * err)))


class FlowProblem:
    """Discrete Navier-Stokes-Brinkman problem on a labeled mesh.

    Unknowns are ordered ``[velocity (2(V+T)), pressure (V)]``. Dirichlet
    velocity dofs are eliminated symmetrically, so the adjoint matrix is the
    exact transpose of the Newton Jacobian.

    Args:
        mesh (Mesh): The mesh.
        boundary (BoundarySpec): Labels and Dirichlet profiles.
        params (FlowParams): Flow parameters.
    """

    def __init__(self, mesh: Mesh, boundary: BoundarySpec, params: FlowParams):
        self.mesh = mesh
        self.boundary = boundary
        self.params = params
        self.velocity_space = FunctionSpace(mesh, "MINI")
        self.pressure_space = FunctionSpace(mesh, "P1")
        self.n_velocity = self.velocity_space.dof_count
        self.n_pressure = mesh.n_vertices
        self.n_total = self.n_velocity + self.n_pressure

        self._data = element_data(self.velocity_space, params.quadrature_degree)
        self._vdofs = np.hstack(
            [self.velocity_space.component_dofs(c) for c in range(2)]
        )
        self._pdofs = mesh.triangles

        data = self._data
        viscous = np.einsum("tq,tqad,tqbd->tab", data.dx, data.grads, data.grads)
        self._viscous = self._assemble_blocks(viscous, viscous, None)
        div_local = -np.einsum("tq,qi,tqbd->tidb", data.dx, data.p1, data.grads)
        self._divergence = assemble_matrix(
            div_local.reshape(mesh.n_triangles, 3, 8),
            self._pdofs,
            self._vdofs,
            (self.n_pressure, self.n_velocity),
        )
        self._load = self._assemble_load(params.body_force)

        verts, values = dirichlet_values(mesh, boundary)
        nb = self.velocity_space.block_size
        self.dirichlet_dofs = np.concatenate([verts, verts + nb])
        self.dirichlet_values = np.concatenate([values[:, 0], values[:, 1]])
        self.pin_pressure = not any(
            label_kind(label) == "neumann" for label in mesh.boundary_labels
        )
        keep = np.ones(self.n_total)
        keep[self.dirichlet_dofs] = 0.0
        if self.pin_pressure:
            keep[self.n_velocity] = 0.0
        self._keep = keep
        logger.debug(
            f"Flow problem: {self.n_velocity} velocity + {self.n_pressure} pressure dofs, "
            f"{len(self.dirichlet_dofs)} Dirichlet, pin_pressure={self.pin_pressure}"
        )

    def _assemble_blocks(self, block00, block11, cross) -> sp.csr_matrix:
        """Assemble 4x4 component blocks into a velocity-velocity matrix.

        ``cross`` is None or a (T, 2, 2, 4, 4) array of all four component blocks
        added on top of the diagonal blocks.
        """
        T = self.mesh.n_triangles
        local = np.zeros((T, 8, 8))
        local[:, :4, :4] = block00
        local[:, 4:, 4:] = block11
        if cross is not None:
            for c in range(2):
                for d in range(2):
                    local[:, 4 * c : 4 * c + 4, 4 * d : 4 * d + 4] += cross[:, c, d]
        return assemble_matrix(
            local, self._vdofs, self._vdofs, (self.n_velocity, self.n_velocity)
        )

    def _assemble_load(self, body_force: Optional[Callable]) -> np.ndarray:
        if body_force is None:
            return np.zeros(self.n_velocity)
        data = self._data
        fx, fy = body_force(data.points[..., 0], data.points[..., 1])
        f = np.stack(
            [np.broadcast_to(fx, data.dx.shape), np.broadcast_to(fy, data.dx.shape)],
            axis=1,
        )
        local = np.einsum("tq,tcq,qa->tca", data.dx, f, data.values)
        return assemble_vector(
            local.reshape(self.mesh.n_triangles, 8), self._vdofs, self.n_velocity
        )

    def _alpha_at_quadrature(self, alpha: np.ndarray) -> np.ndarray:
        return alpha[self.mesh.triangles] @ self._data.p1.T

    def _brinkman(self, phase: PhaseField) -> sp.csr_matrix:
        alpha, _ = permeability(phase, self.params.alpha0)
        data = self._data
        a_q = self._alpha_at_quadrature(alpha)
        local = np.einsum("tq,tq,qa,qb->tab", data.dx, a_q, data.values, data.values)
        return self._assemble_blocks(local, local, None)

    def _convection(self, velocity: np.ndarray, linearize: bool) -> sp.csr_matrix:
        """Convection matrix ``b(u, ., v)`` and, if ``linearize``, plus ``b(., u, v)``."""
        data = self._data
        U = np.stack(
            [velocity[self.velocity_space.component_dofs(c)] for c in range(2)], axis=1
        )
        u_q = np.einsum("qa,tca->tqc", data.values, U)
        transport = np.einsum(
            "tq,tqd,tqbd,qa->tab", data.dx, u_q, data.grads, data.values
        )
        cross = None
        if linearize:
            grad_u = np.einsum("tqad,tca->tqcd", data.grads, U)
            cross = np.einsum(
                "tq,qb,tqcd,qa->tcdab", data.dx, data.values, grad_u, data.values
            )
        return self._assemble_blocks(transport, transport, cross)

    def _momentum_operator(self, phase: PhaseField) -> sp.csr_matrix:
        """Symmetric part ``mu*A + M_alpha``."""
        return self.params.mu * self._viscous + self._brinkman(phase)

    def _eliminate(self, matrix: sp.spmatrix, rhs: np.ndarray):
        keep = sp.diags(self._keep)
        reduced = keep @ matrix @ keep + sp.diags(1.0 - self._keep)
        return sp.csr_matrix(reduced), self._keep * rhs

    def _recentre(self, pressure: np.ndarray) -> np.ndarray:
        if not self.pin_pressure:
            return pressure
        lumped = p1_operators(self.mesh).lumped
        return pressure - (lumped @ pressure) / lumped.sum()

    def initial_state(self, guess: Optional[FlowState] = None) -> FlowState:
        """Zero velocity with interpolated Dirichlet data, or a copy of ``guess``."""
        if guess is None:
            velocity = np.zeros(self.n_velocity)
            pressure = np.zeros(self.n_pressure)
        else:
            velocity = guess.velocity.copy()
            pressure = guess.pressure.copy()
        velocity[self.dirichlet_dofs] = self.dirichlet_values
        return FlowState(velocity, pressure, self.velocity_space, "state")

    def residual(self, state: FlowState, phase: PhaseField) -> np.ndarray:
        """Nonlinear residual of the discrete equations (all rows)."""
        u, p = state.velocity, state.pressure
        operator = self._momentum_operator(phase) + self._convection(u, linearize=False)
        momentum = operator @ u + self._divergence.T @ p - self._load
        continuity = self._divergence @ u
        return np.concatenate([momentum, continuity])

    def assemble_oseen(
        self, current: FlowState, phase: PhaseField
    ) -> Tuple[sp.csr_matrix, np.ndarray]:
        """Newton Jacobian and negative residual at ``current`` in increment form.

        Dirichlet rows and columns are replaced by identity with zero right-hand
        side; with no outflow boundary pressure dof 0 is pinned the same way.
        """
        u = current.velocity
        jacobian_uu = self._momentum_operator(phase) + self._convection(u, linearize=True)
        matrix = sp.bmat(
            [[jacobian_uu, self._divergence.T], [self._divergence, None]], format="csr"
        )
        return self._eliminate(matrix, -self.residual(current, phase))

    def solve_navier_stokes(
        self, phase: PhaseField, guess: Optional[FlowState] = None
    ) -> Tuple[FlowState, NewtonReport]:
        """Newton iteration until the L-infinity velocity increment drops below tolerance.

        Args:
            phase (PhaseField): The phase field.
            guess (FlowState, optional): Warm start; Dirichlet data is reimposed.

        Returns:
            Tuple[FlowState, NewtonReport]: The converged state and its history.

        Raises:
            NewtonConvergenceError: When ``newton_max`` iterations do not converge.
        """
        state = self.initial_state(guess)
        report = NewtonReport()
        nv = self.n_velocity
        for k in range(self.params.newton_max):
            matrix, rhs = self.assemble_oseen(state, phase)
            try:
                increment = solve_saddle(matrix, rhs)
            except SolverError as e:
                report.iterations = k
                raise NewtonConvergenceError(
                    f"Linear solve failed in Newton iteration {k + 1}: {e}", report
                ) from e
            state.velocity += increment[:nv]
            state.pressure += increment[nv:]
            norm = float(np.max(np.abs(increment[:nv])))
            report.increments.append(norm)
            report.iterations = k + 1
            logger.debug(f"Newton iteration {k + 1}: |du|_inf = {norm:.3e}")
            if not np.isfinite(norm):
                raise NewtonConvergenceError("Newton increment is not finite", report)
            if norm < self.params.newton_tol:
                report.converged = True
                break

        state.pressure = self._recentre(state.pressure)
        report.residual_norm = float(
            np.max(np.abs(self._keep * self.residual(state, phase)))
        )
        if not report.converged:
            raise NewtonConvergenceError(
                f"Newton did not converge in {self.params.newton_max} iterations "
                f"(last increment {report.increments[-1]:.3e})",
                report,
            )
        logger.debug(
            f"Newton converged in {report.iterations} iterations, "
            f"residual {report.residual_norm:.3e}"
        )
        return state, report

    def solve_adjoint(
        self, state: FlowState, phase: PhaseField, rhs: Optional[np.ndarray] = None
    ) -> FlowState:
        """Solve the adjoint (generalized Stokes) system at ``state``.

        The matrix is the transpose of the Newton Jacobian; the default right-hand
        side is ``(mu*A + M_alpha) u`` on the velocity rows.

        Args:
            state (FlowState): Converged state.
            phase (PhaseField): The phase field.
            rhs (np.ndarray, optional): Custom right-hand side of length ``n_total``.

        Returns:
            FlowState: Adjoint velocity and pressure, zero on Dirichlet dofs.
        """
        u = state.velocity
        operator = self._momentum_operator(phase)
        jacobian_uu = operator + self._convection(u, linearize=True)
        matrix = sp.bmat(
            [[jacobian_uu.T, self._divergence.T], [self._divergence, None]],
            format="csr",
        )
        if rhs is None:
            rhs = np.concatenate([operator @ u, np.zeros(self.n_pressure)])
        elif rhs.shape != (self.n_total,):
            raise ValueError(f"Adjoint rhs has shape {rhs.shape}, expected ({self.n_total},)")
        matrix, rhs = self._eliminate(matrix, rhs)
        solution = solve_saddle(matrix, rhs)
        nv = self.n_velocity
        return FlowState(
            solution[:nv], self._recentre(solution[nv:]), self.velocity_space, "adjoint"
        )

    def dissipation_energy(self, state: FlowState, phase: PhaseField) -> float:
        """``0.5*mu*|grad u|^2 + 0.5*alpha(phi)*|u|^2`` integrated over the domain."""
        u = state.velocity
        return float(0.5 * u @ (self._momentum_operator(phase) @ u))

    def brinkman_sensitivity(
        self, state: FlowState, adjoint: FlowState, phase: PhaseField
    ) -> np.ndarray:
        """Derivative of the Lagrangian with respect to nodal phase values.

        Entry ``k`` is ``int alpha'_k lambda_k (0.5*|u|^2 - u.v)`` with the same
        quadrature as the assembled Brinkman term.
        """
        _, dalpha = permeability(phase, self.params.alpha0)
        data = self._data
        U = _local_velocity(state)
        W = _local_velocity(adjoint)
        u_q = np.einsum("qa,tca->tqc", data.values, U)
        v_q = np.einsum("qa,tca->tqc", data.values, W)
        density = 0.5 * np.sum(u_q * u_q, axis=-1) - np.sum(u_q * v_q, axis=-1)
        local = np.einsum("tq,qi,tq->ti", data.dx, data.p1, density)
        local *= dalpha[self.mesh.triangles]
        return assemble_vector(local, self.mesh.triangles, self.mesh.n_vertices)
