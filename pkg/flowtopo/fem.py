"""Finite-element kernels: P1 and MINI bases, quadrature, assembly and linear solvers."""

import logging
from itertools import permutations
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .mesh import Mesh

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear solver failure.

    Args:
        message (str): Description of the failure.
        residual_history (List[float], optional): Residual norms seen so far.
    """

    def __init__(self, message: str, residual_history: Optional[List[float]] = None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class SingularMatrixError(SolverError):
    """Singular factorization; ``pivot`` is the offending row when known."""

    def __init__(self, message: str, pivot: Optional[int] = None):
        super().__init__(message)
        self.pivot = pivot


class QuadratureRule:
    """Barycentric quadrature on the reference triangle.

    Weights sum to 1, so an integral over a triangle ``T`` is
    ``|T| * sum(weights * f(points))``.

    Args:
        points (np.ndarray): (nq, 3) barycentric coordinates.
        weights (np.ndarray): (nq,) positive weights.
        degree (int): Total polynomial degree integrated exactly.
    """

    def __init__(self, points: np.ndarray, weights: np.ndarray, degree: int):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.degree = int(degree)
        self.points.flags.writeable = False
        self.weights.flags.writeable = False

    def __len__(self) -> int:
        return len(self.weights)

    def __repr__(self) -> str:
        return f"QuadratureRule(degree={self.degree}, points={len(self)})"


def _orbit(a: float, b: Optional[float] = None) -> np.ndarray:
    """Distinct permutations of the barycentric point (a, a, 1-2a) or (a, b, 1-a-b)."""
    if b is None:
        base = (a, a, 1.0 - 2.0 * a)
    else:
        base = (a, b, 1.0 - a - b)
    return np.array(sorted(set(permutations(base))), dtype=float)


def _build_rules():
    rules = {}
    rules[1] = (np.array([[1.0, 1.0, 1.0]]) / 3.0, np.array([1.0]))
    rules[2] = (_orbit(1.0 / 6.0), np.full(3, 1.0 / 3.0))

    p4 = np.vstack([_orbit(0.44594849091596488632), _orbit(0.09157621350977074346)])
    w4 = np.concatenate(
        [np.full(3, 0.22338158967801146570), np.full(3, 0.10995174365532186764)]
    )
    rules[4] = (p4, w4)
    rules[3] = rules[4]

    p5 = np.vstack(
        [
            np.array([[1.0, 1.0, 1.0]]) / 3.0,
            _orbit(0.47014206410511508977),
            _orbit(0.10128650732345633880),
        ]
    )
    w5 = np.concatenate(
        [
            [0.225],
            np.full(3, 0.13239415278850618074),
            np.full(3, 0.12593918054482715260),
        ]
    )
    rules[5] = (p5, w5)

    p6 = np.vstack(
        [
            _orbit(0.24928674517091042129),
            _orbit(0.06308901449150222834),
            _orbit(0.05314504984481694735, 0.31035245103378440542),
        ]
    )
    w6 = np.concatenate(
        [
            np.full(3, 0.11678627572637936603),
            np.full(3, 0.05084490637020681692),
            np.full(6, 0.08285107561837357519),
        ]
    )
    rules[6] = (p6, w6)
    return rules


_RULES = _build_rules()


def quadrature_rule(degree: int) -> QuadratureRule:
    """Return a symmetric rule exact for polynomials of total degree ``degree``.

    Args:
        degree (int): Requested exactness degree, 1 to 6.

    Raises:
        ValueError: For an unsupported degree.
    """
    if degree not in _RULES:
        raise ValueError(f"Unsupported quadrature degree {degree}; use 1..6")
    points, weights = _RULES[degree]
    return QuadratureRule(points, weights / weights.sum(), degree)


class FunctionSpace:
    """A scalar P1 or vector MINI (P1 + cubic bubble) space on a mesh.

    Dof layout for MINI: component ``c`` of vertex ``v`` is ``c*(V+T) + v`` and
    the bubble of triangle ``t`` is ``c*(V+T) + V + t``.

    Args:
        mesh (Mesh): The mesh.
        kind (str): ``"P1"`` or ``"MINI"``.
    """

    def __init__(self, mesh: Mesh, kind: str = "P1"):
        if kind not in ("P1", "MINI"):
            raise ValueError(f"Unknown function space kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        V, T = mesh.n_vertices, mesh.n_triangles
        if kind == "P1":
            self.components = 1
            self.block_size = V
            self.n_local = 3
            self.cell_dofs = mesh.triangles
        else:
            self.components = 2
            self.block_size = V + T
            self.n_local = 4
            self.cell_dofs = np.column_stack([mesh.triangles, V + np.arange(T)])
        self.dof_count = self.components * self.block_size

    def __repr__(self) -> str:
        return f"FunctionSpace({self.kind}, dof_count={self.dof_count})"

    def component_dofs(self, c: int) -> np.ndarray:
        """(T, n_local) global dofs of component ``c`` per triangle."""
        return self.cell_dofs + c * self.block_size

    def vertex_slice(self, c: int = 0) -> slice:
        start = c * self.block_size
        return slice(start, start + self.mesh.n_vertices)


def triangle_geometry(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Areas and barycentric gradients of every triangle.

    Returns:
        Tuple[np.ndarray, np.ndarray]: areas (T,) and gradients (T, 3, 2) with
        ``grads[t, i]`` the constant gradient of the i-th barycentric coordinate.

    Raises:
        ValueError: If any triangle has zero area.
    """
    p = mesh.vertices[mesh.triangles]
    area = mesh.triangle_areas
    if np.any(np.abs(area) <= 1e-300):
        t = int(np.flatnonzero(np.abs(area) <= 1e-300)[0])
        raise ValueError(f"Triangle {t} is degenerate (zero area)")
    x, y = p[:, :, 0], p[:, :, 1]
    grads = np.empty((mesh.n_triangles, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / (2.0 * area)
        grads[:, i, 1] = (x[:, k] - x[:, j]) / (2.0 * area)
    return np.abs(area), grads


def _basis_values(kind: str, bary: np.ndarray) -> np.ndarray:
    """Reference basis values at barycentric points, shape (nq, n_local)."""
    bary = np.atleast_2d(bary)
    if kind == "P1":
        return bary.copy()
    bubble = 27.0 * bary[:, 0] * bary[:, 1] * bary[:, 2]
    return np.column_stack([bary, bubble])


def _basis_gradients(kind: str, bary: np.ndarray, grad_lambda: np.ndarray) -> np.ndarray:
    """Physical basis gradients, shape (T, nq, n_local, 2)."""
    bary = np.atleast_2d(bary)
    nq = len(bary)
    p1 = np.broadcast_to(grad_lambda[:, None, :, :], (len(grad_lambda), nq, 3, 2))
    if kind == "P1":
        return np.array(p1)
    coeff = 27.0 * np.column_stack(
        [bary[:, 1] * bary[:, 2], bary[:, 0] * bary[:, 2], bary[:, 0] * bary[:, 1]]
    )
    bubble = np.einsum("qi,tid->tqd", coeff, grad_lambda)
    return np.concatenate([p1, bubble[:, :, None, :]], axis=2)


def eval_basis(
    space: FunctionSpace, triangle: int, point
) -> Tuple[np.ndarray, np.ndarray]:
    """Evaluate the local basis of one triangle at a barycentric point.

    For the MINI space the four scalar local functions (3 P1 + bubble) shared
    by both velocity components are returned.

    Args:
        space (FunctionSpace): The space.
        triangle (int): Triangle index.
        point (array-like): Barycentric coordinates (3,).

    Returns:
        Tuple[np.ndarray, np.ndarray]: values (n_local,) and gradients (n_local, 2).
    """
    bary = np.asarray(point, dtype=float).reshape(3)
    if np.any(bary < -1e-12) or abs(bary.sum() - 1.0) > 1e-12:
        raise ValueError(f"Point {bary} is not inside the reference triangle")
    mesh = space.mesh
    p = mesh.vertices[mesh.triangles[triangle]]
    area = 0.5 * (
        (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
        - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
    )
    if abs(area) <= 1e-300:
        raise ValueError(f"Triangle {triangle} is degenerate (zero area)")
    grads = np.empty((1, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[0, i] = [(p[j, 1] - p[k, 1]) / (2 * area), (p[k, 0] - p[j, 0]) / (2 * area)]
    values = _basis_values(space.kind, bary)[0]
    gradients = _basis_gradients(space.kind, bary, grads)[0, 0]
    return values, gradients


class ElementData:
    """Basis data at quadrature points for every triangle of a space.

    Attributes:
        rule: the quadrature rule.
        dx: (T, nq) quadrature weights times triangle areas.
        values: (nq, n_local) basis values.
        grads: (T, nq, n_local, 2) physical basis gradients.
        p1: (nq, 3) barycentric values, used to interpolate P1 data.
        points: (T, nq, 2) physical quadrature points.
    """

    def __init__(self, space: FunctionSpace, degree: int):
        mesh = space.mesh
        self.space = space
        self.rule = quadrature_rule(degree)
        areas, grad_lambda = triangle_geometry(mesh)
        self.areas = areas
        self.grad_lambda = grad_lambda
        self.dx = areas[:, None] * self.rule.weights[None, :]
        self.values = _basis_values(space.kind, self.rule.points)
        self.grads = _basis_gradients(space.kind, self.rule.points, grad_lambda)
        self.p1 = self.rule.points
        self.points = np.einsum("qi,tid->tqd", self.p1, mesh.vertices[mesh.triangles])


def _cached(mesh: Mesh, key: tuple, build):
    cache = mesh._operator_cache
    if key not in cache:
        cache[key] = build()
    return cache[key]


def element_data(space: FunctionSpace, degree: int) -> ElementData:
    """Cached ``ElementData`` for a space and quadrature degree.

    The cache lives on the mesh, so it is released when the mesh is.
    """
    mesh = space.mesh
    return _cached(
        mesh,
        ("element_data", space.kind, degree),
        lambda: ElementData(FunctionSpace(mesh, space.kind), degree),
    )


def assemble_matrix(
    local: np.ndarray,
    row_dofs: np.ndarray,
    col_dofs: np.ndarray,
    shape: Tuple[int, int],
) -> sp.csr_matrix:
    """Scatter element matrices into a global CSR matrix.

    Duplicate entries are summed; structural zeros are kept.

    Args:
        local (np.ndarray): (T, nr, nc) element matrices.
        row_dofs (np.ndarray): (T, nr) global row indices.
        col_dofs (np.ndarray): (T, nc) global column indices.
        shape (Tuple[int, int]): Global shape.
    """
    local = np.asarray(local, dtype=float)
    n_cells, nr, nc = local.shape
    if row_dofs.shape != (n_cells, nr) or col_dofs.shape != (n_cells, nc):
        raise ValueError(
            f"Local matrices {local.shape} do not match dof maps "
            f"{row_dofs.shape} x {col_dofs.shape}"
        )
    rows = np.broadcast_to(row_dofs[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], local.shape).ravel()
    matrix = sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def assemble_vector(local: np.ndarray, dofs: np.ndarray, size: int) -> np.ndarray:
    """Scatter element vectors (T, n) into a global vector of length ``size``."""
    return np.bincount(dofs.ravel(), weights=np.asarray(local, float).ravel(), minlength=size)


class P1Operators:
    """Mass, stiffness and lumped mass of the scalar P1 space.

    Attributes:
        mass (csr_matrix): consistent mass matrix M.
        stiffness (csr_matrix): stiffness matrix K.
        lumped (np.ndarray): row sums of M.
    """

    def __init__(self, mesh: Mesh):
        space = FunctionSpace(mesh, "P1")
        data = element_data(space, 2)
        dofs = space.cell_dofs
        shape = (mesh.n_vertices, mesh.n_vertices)
        local_mass = np.einsum("tq,qa,qb->tab", data.dx, data.values, data.values)
        local_stiff = data.areas[:, None, None] * np.einsum(
            "tad,tbd->tab", data.grad_lambda, data.grad_lambda
        )
        self.mesh = mesh
        self.space = space
        self.mass = assemble_matrix(local_mass, dofs, dofs, shape)
        self.stiffness = assemble_matrix(local_stiff, dofs, dofs, shape)
        self.lumped = np.asarray(self.mass.sum(axis=1)).ravel()


def p1_operators(mesh: Mesh) -> P1Operators:
    """Cached P1 operators of a mesh, stored on the mesh itself."""
    return _cached(mesh, ("p1_operators",), lambda: P1Operators(mesh))


def solve_spd(
    A: sp.spmatrix,
    b: np.ndarray,
    tol: float = 1e-10,
    x0: Optional[np.ndarray] = None,
    maxiter: Optional[int] = None,
    return_iterations: bool = False,
) -> Union[np.ndarray, Tuple[np.ndarray, int]]:
    """Solve an SPD system with Jacobi-preconditioned conjugate gradients.

    Args:
        A (sparse matrix): Symmetric positive definite matrix.
        b (np.ndarray): Right-hand side.
        tol (float): Relative residual target ``||Ax-b|| <= tol*||b||``.
        x0 (np.ndarray, optional): Initial guess.
        maxiter (int, optional): Iteration cap, defaults to ``10*n``.
        return_iterations (bool): Also return the CG iteration count.

    Raises:
        SolverError: On breakdown or non-convergence, with the residual history.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        x = np.zeros(n)
        return (x, 0) if return_iterations else x
    if maxiter is None:
        maxiter = 10 * n

    diag = A.diagonal()
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise SolverError("Matrix has a non-positive diagonal entry; not SPD")
    inv_diag = 1.0 / diag
    preconditioner = LinearOperator((n, n), matvec=lambda r: inv_diag * r)

    history: List[float] = []

    def record(xk):
        history.append(float(np.linalg.norm(b - A @ xk)))

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    target = tol * b_norm
    residual = float(np.linalg.norm(b - A @ x))
    iterations = 0
    # CG tracks a recursive residual; restart from the true one if they drift apart
    for _ in range(3):
        if residual <= target:
            break
        before = len(history)
        x, info = cg(
            A, b, x0=x, rtol=0.0, atol=target, maxiter=maxiter, M=preconditioner,
            callback=record,
        )
        iterations += len(history) - before
        residual = float(np.linalg.norm(b - A @ x))
        if info < 0 or not np.isfinite(residual):
            raise SolverError(f"CG breakdown (info={info})", history)

    if residual > target:
        raise SolverError(
            f"CG did not reach relative residual {tol:.1e} "
            f"(got {residual / b_norm:.3e} after {iterations} iterations)",
            history,
        )
    logger.debug(f"CG converged in {iterations} iterations, residual {residual:.3e}")
    return (x, iterations) if return_iterations else x


def solve_saddle(A: sp.spmatrix, b: np.ndarray, refine: int = 2) -> np.ndarray:
    """Solve a nonsingular (saddle-point) system by sparse LU.

    Up to ``refine`` steps of iterative refinement are applied.

    Args:
        A (sparse matrix): Square nonsingular matrix.
        b (np.ndarray): Right-hand side.
        refine (int): Maximum refinement steps.

    Raises:
        SingularMatrixError: If the factorization is singular.
        SolverError: If the final residual is not finite or far above target.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"Incompatible system shapes {A.shape} and {b.shape}")

    row_norms = np.asarray(abs(A).sum(axis=1)).ravel()
    zero_rows = np.flatnonzero(row_norms == 0.0)
    if zero_rows.size:
        raise SingularMatrixError(
            f"Row {zero_rows[0]} is identically zero", pivot=int(zero_rows[0])
        )
    try:
        lu = splu(A)
    except RuntimeError as e:
        raise SingularMatrixError(f"Sparse LU failed: {e}") from e

    b_norm = float(np.linalg.norm(b))
    target = 1e-10 * max(1.0, b_norm)
    x = lu.solve(b)
    r = b - A @ x
    history = [float(np.linalg.norm(r))]
    for _ in range(refine):
        if history[-1] <= target:
            break
        x = x + lu.solve(r)
        r = b - A @ x
        history.append(float(np.linalg.norm(r)))

    residual = history[-1]
    if not np.isfinite(residual) or not np.all(np.isfinite(x)):
        raise SingularMatrixError("Sparse LU produced a non-finite solution")
    if residual > 1e-6 * max(1.0, b_norm):
        raise SolverError(f"Saddle solve residual {residual:.3e} too large", history)
    if residual > target:
        logger.warning(
            f"Saddle solve residual {residual:.3e} above target {target:.3e}"
        )
    logger.debug(f"Saddle solve n={A.shape[0]}, residual {residual:.3e}")
    return x
