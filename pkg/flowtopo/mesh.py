"""Module for building, loading and validating labeled 2D triangle meshes."""

import io
import logging
import os
import re
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import ConfigError, compile_expression

logger = logging.getLogger(__name__)

LABEL_PATTERN = re.compile(r"^[a-z0-9_-]+$")

# Boundary-coordinate tolerance for segment predicates on generated meshes.
_GEOM_TOL = 1e-10


class MeshError(ValueError):
    """Topology, orientation or labeling violation in a mesh."""


class MeshFormatError(MeshError):
    """Parse error in the mesh text format.

    Args:
        message (str): Description of the problem.
        lineno (int, optional): 1-based line number of the offending line.
    """

    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


def label_kind(label: str) -> str:
    """Return ``"neumann"`` for outflow labels and ``"dirichlet"`` otherwise."""
    return "neumann" if label.startswith("outlet") else "dirichlet"


class Mesh:
    """An immutable 2D conforming triangle mesh with labeled boundary edges.

    Args:
        vertices (array-like): (V, 2) vertex coordinates.
        triangles (array-like): (T, 3) counterclockwise vertex indices.
        boundary_edges (array-like): (B, 2) vertex index pairs of boundary edges.
        boundary_labels (Sequence[str]): One label per boundary edge.
        validate (bool): Whether to check all invariants eagerly. Defaults to True.
    """

    def __init__(
        self,
        vertices,
        triangles,
        boundary_edges,
        boundary_labels: Sequence[str],
        validate: bool = True,
    ):
        self.vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        self.triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        self.boundary_edges = np.array(boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_labels = tuple(str(label) for label in boundary_labels)
        for array in (self.vertices, self.triangles, self.boundary_edges):
            array.flags.writeable = False

        self._edges: Optional[np.ndarray] = None
        # assembled operators keyed by the fem helpers; freed together with the mesh
        self._operator_cache: Dict[tuple, object] = {}
        if validate:
            validate_mesh(self)
        self.domain_area = float(self.triangle_areas.sum())

    def __repr__(self) -> str:
        return (
            f"Mesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles}, "
            f"n_boundary_edges={len(self.boundary_edges)})"
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def triangle_areas(self) -> np.ndarray:
        """Signed areas of all triangles (positive when counterclockwise)."""
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs, shape (E, 2)."""
        if self._edges is None:
            edges = np.unique(np.sort(_triangle_edges(self.triangles), axis=1), axis=0)
            edges.flags.writeable = False
            self._edges = edges
        return self._edges

    @property
    def labels(self) -> List[str]:
        """Distinct boundary labels in first-appearance order."""
        return list(dict.fromkeys(self.boundary_labels))

    def edge_lengths(self, label: Optional[str] = None) -> np.ndarray:
        """Lengths of the boundary edges, optionally restricted to one label."""
        edges = self.boundary_edges
        if label is not None:
            mask = np.array([lab == label for lab in self.boundary_labels], dtype=bool)
            edges = edges[mask]
        d = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])


def _triangle_edges(triangles: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
    )


def validate_mesh(mesh: Mesh) -> None:
    """Check every mesh invariant and raise ``MeshError`` naming the offender.

    Args:
        mesh (Mesh): The mesh to check.

    Raises:
        MeshError: On the first violated invariant.
    """
    n = mesh.n_vertices
    if n < 3 or mesh.n_triangles < 1:
        raise MeshError("A mesh needs at least 3 vertices and 1 triangle")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshError("Vertex coordinates must be finite")

    bad = np.flatnonzero(np.any((mesh.triangles < 0) | (mesh.triangles >= n), axis=1))
    if bad.size:
        raise MeshError(f"Triangle {bad[0]} references a missing vertex")
    bad = np.flatnonzero(
        np.any((mesh.boundary_edges < 0) | (mesh.boundary_edges >= n), axis=1)
    )
    if bad.size:
        raise MeshError(f"Boundary edge {bad[0]} references a missing vertex")
    if len(mesh.boundary_labels) != len(mesh.boundary_edges):
        raise MeshError("Every boundary edge needs exactly one label")

    areas = mesh.triangle_areas
    bad = np.flatnonzero(areas <= 0.0)
    if bad.size:
        t = bad[0]
        raise MeshError(
            f"Triangle {t} is clockwise or degenerate (signed area {areas[t]:.3e})"
        )

    all_edges = np.sort(_triangle_edges(mesh.triangles), axis=1)
    unique, counts = np.unique(all_edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        i, j = unique[np.argmax(counts > 2)]
        raise MeshError(f"Edge ({i}, {j}) is shared by more than two triangles")
    topological = {tuple(e) for e in unique[counts == 1].tolist()}

    labeled: Dict[Tuple[int, int], str] = {}
    for (i, j), label in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels):
        if not LABEL_PATTERN.match(label):
            raise MeshError(f"Boundary edge ({i}, {j}) has invalid label {label!r}")
        key = (min(i, j), max(i, j))
        if key in labeled:
            raise MeshError(f"Boundary edge ({i}, {j}) is labeled more than once")
        if key not in topological:
            raise MeshError(f"Labeled edge ({i}, {j}) is not a boundary edge")
        labeled[key] = label
    missing = topological - set(labeled)
    if missing:
        i, j = min(missing)
        mid = 0.5 * (mesh.vertices[i] + mesh.vertices[j])
        raise MeshError(
            f"Boundary edge ({i}, {j}) at midpoint ({mid[0]:.6g}, {mid[1]:.6g}) "
            "has no label"
        )

    degree = np.bincount(mesh.boundary_edges.ravel(), minlength=n)
    on_boundary = degree > 0
    if np.any(degree[on_boundary] != 2):
        v = int(np.flatnonzero(on_boundary & (degree != 2))[0])
        raise MeshError(f"Boundary is not a closed polygon at vertex {v}")


class BoundarySegment:
    """A named part of the boundary.

    Args:
        label (str): The segment label, e.g. ``"inlet-0"``, ``"wall"``, ``"outlet-0"``.
        predicate (Callable, optional): ``predicate(x, y) -> bool array`` evaluated at
            edge midpoints. ``None`` marks the fallback segment that takes every
            edge no other segment claims.
        profile (tuple, optional): Velocity components ``(ux, uy)`` for Dirichlet
            segments, each an expression string or a callable of ``(x, y)``.
            Defaults to no-slip ``("0", "0")``.
    """

    def __init__(
        self,
        label: str,
        predicate: Optional[Callable] = None,
        profile: Optional[Tuple[Union[str, Callable], Union[str, Callable]]] = None,
    ):
        if not LABEL_PATTERN.match(label):
            raise ConfigError(f"Invalid boundary label {label!r}", key="boundary")
        self.label = label
        self.predicate = predicate
        self.kind = label_kind(label)
        if profile is None:
            profile = ("0", "0")
        self.profile_source = tuple(
            p if callable(p) else str(p) for p in profile
        )
        self._profile = tuple(
            p if callable(p) else compile_expression(p) for p in profile
        )

    def __repr__(self) -> str:
        return f"BoundarySegment({self.label!r}, kind={self.kind!r})"

    @property
    def is_fallback(self) -> bool:
        return self.predicate is None

    def velocity(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate the Dirichlet profile at points, returning shape (n, 2)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ux = np.broadcast_to(np.asarray(self._profile[0](x, y), dtype=float), x.shape)
        uy = np.broadcast_to(np.asarray(self._profile[1](x, y), dtype=float), x.shape)
        return np.stack([ux, uy], axis=-1)


class BoundarySpec:
    """A partition of the boundary into labeled segments.

    Args:
        segments (Iterable[BoundarySegment]): The segments; at most one may be a
            fallback (``predicate=None``).
    """

    def __init__(self, segments: Iterable[BoundarySegment]):
        self.segments = list(segments)
        labels = [s.label for s in self.segments]
        if len(set(labels)) != len(labels):
            raise ConfigError("Boundary segment labels must be unique", key="boundary")
        if sum(s.is_fallback for s in self.segments) > 1:
            raise ConfigError("At most one fallback boundary segment", key="boundary")
        self._by_label = {s.label: s for s in self.segments}

    def __repr__(self) -> str:
        return f"BoundarySpec({[s.label for s in self.segments]})"

    def __contains__(self, label: str) -> bool:
        return label in self._by_label

    def segment(self, label: str) -> BoundarySegment:
        try:
            return self._by_label[label]
        except KeyError:
            raise ConfigError(
                f"Mesh label {label!r} is not defined by the boundary spec",
                key="boundary",
            ) from None

    def label_points(self, points: np.ndarray) -> List[str]:
        """Assign a segment label to each point (typically edge midpoints).

        Raises:
            ConfigError: If a point matches no segment or more than one
                predicate segment.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        x, y = points[:, 0], points[:, 1]
        explicit = [s for s in self.segments if not s.is_fallback]
        fallback = next((s for s in self.segments if s.is_fallback), None)

        hits = np.zeros((len(points), len(explicit)), dtype=bool)
        for k, segment in enumerate(explicit):
            hits[:, k] = np.broadcast_to(
                np.asarray(segment.predicate(x, y), dtype=bool), x.shape
            )
        counts = hits.sum(axis=1)
        if np.any(counts > 1):
            i = int(np.argmax(counts > 1))
            names = [explicit[k].label for k in np.flatnonzero(hits[i])]
            raise ConfigError(
                f"Boundary edge at midpoint ({x[i]:.6g}, {y[i]:.6g}) matches "
                f"several segments {names}",
                key="boundary",
            )
        labels = []
        for i in range(len(points)):
            if counts[i] == 1:
                labels.append(explicit[int(np.argmax(hits[i]))].label)
            elif fallback is not None:
                labels.append(fallback.label)
            else:
                raise ConfigError(
                    f"Boundary edge at midpoint ({x[i]:.6g}, {y[i]:.6g}) is not "
                    "covered by any segment",
                    key="boundary",
                )
        return labels

    def relabel(self, mesh: Mesh) -> Mesh:
        """Return a copy of ``mesh`` whose boundary labels come from this spec."""
        mids = 0.5 * (
            mesh.vertices[mesh.boundary_edges[:, 0]]
            + mesh.vertices[mesh.boundary_edges[:, 1]]
        )
        return Mesh(
            mesh.vertices, mesh.triangles, mesh.boundary_edges, self.label_points(mids)
        )

    def check_labels(self, mesh: Mesh) -> None:
        """Make sure every label used by ``mesh`` is defined here."""
        for label in mesh.labels:
            self.segment(label)


def _on_line(value: np.ndarray, target: float) -> np.ndarray:
    return np.abs(value - target) <= _GEOM_TOL


def _within(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (value >= lo - _GEOM_TOL) & (value <= hi + _GEOM_TOL)


def uniform_boundary(
    label: str = "wall", profile: Optional[Tuple[str, str]] = None
) -> BoundarySpec:
    """A spec putting the whole boundary in a single segment."""
    return BoundarySpec([BoundarySegment(label, None, profile)])


def diffuser_boundary() -> BoundarySpec:
    """Unit-square diffuser: plug inflow on x=0, outflow on x=1 for 1/3 <= y <= 2/3."""
    return BoundarySpec(
        [
            BoundarySegment("inlet-0", lambda x, y: _on_line(x, 0.0), ("1", "0")),
            BoundarySegment(
                "outlet-0",
                lambda x, y: _on_line(x, 1.0) & _within(y, 1.0 / 3.0, 2.0 / 3.0),
            ),
            BoundarySegment("wall"),
        ]
    )


BYPASS_PROFILE = ("-50*(y**2 - 0.35**2)*(y**2 - 0.15**2)", "0")


def bypass_boundary() -> BoundarySpec:
    """Bypass channel on [0,1.5]x[-0.5,0.5] with two inlets and two outlets."""
    return BoundarySpec(
        [
            BoundarySegment(
                "inlet-0",
                lambda x, y: _on_line(x, 0.0) & _within(y, 0.15, 0.35),
                BYPASS_PROFILE,
            ),
            BoundarySegment(
                "inlet-1",
                lambda x, y: _on_line(x, 0.0) & _within(y, -0.35, -0.15),
                BYPASS_PROFILE,
            ),
            BoundarySegment(
                "outlet-0", lambda x, y: _on_line(x, 1.5) & _within(y, 0.15, 0.35)
            ),
            BoundarySegment(
                "outlet-1", lambda x, y: _on_line(x, 1.5) & _within(y, -0.35, -0.15)
            ),
            BoundarySegment("wall"),
        ]
    )


def generate_rect_mesh(
    x_range: Tuple[float, float],
    y_range: Tuple[float, float],
    nx: int,
    ny: int,
    spec: BoundarySpec,
) -> Mesh:
    """Generate a structured crossed-diagonal triangulation of a rectangle.

    The diagonal direction alternates cell by cell (union-jack pattern), giving
    2*nx*ny counterclockwise triangles on an (nx+1)*(ny+1) vertex grid. Vertex
    ``(i, j)`` has index ``j*(nx+1) + i``. Boundary edges are listed
    counterclockwise starting at the lower left corner.

    Args:
        x_range (Tuple[float, float]): The interval in x.
        y_range (Tuple[float, float]): The interval in y.
        nx (int): Cells in x, at least 2.
        ny (int): Cells in y, at least 2.
        spec (BoundarySpec): Labels the boundary edges by their midpoints.

    Returns:
        Mesh: The validated mesh.
    """
    if nx < 2 or ny < 2:
        raise ValueError(f"nx and ny must be at least 2, got {nx}x{ny}")
    x0, x1 = map(float, x_range)
    y0, y1 = map(float, y_range)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"Degenerate rectangle {x_range} x {y_range}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    even = (i + j) % 2 == 0
    first = np.where(
        even[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01])
    )
    second = np.where(
        even[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01])
    )
    triangles = np.stack([first, second], axis=1).reshape(-1, 3)

    def idx(ii, jj):
        return np.asarray(jj) * (nx + 1) + np.asarray(ii)

    bottom = np.column_stack([idx(np.arange(nx), 0), idx(np.arange(1, nx + 1), 0)])
    right = np.column_stack([idx(nx, np.arange(ny)), idx(nx, np.arange(1, ny + 1))])
    top = np.column_stack(
        [idx(np.arange(nx, 0, -1), ny), idx(np.arange(nx - 1, -1, -1), ny)]
    )
    left = np.column_stack(
        [idx(0, np.arange(ny, 0, -1)), idx(0, np.arange(ny - 1, -1, -1))]
    )
    boundary_edges = np.concatenate([bottom, right, top, left], axis=0)
    mids = 0.5 * (vertices[boundary_edges[:, 0]] + vertices[boundary_edges[:, 1]])
    labels = spec.label_points(mids)

    mesh = Mesh(vertices, triangles, boundary_edges, labels)
    logger.debug(
        f"Generated {nx}x{ny} mesh on {x_range}x{y_range}: "
        f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles"
    )
    return mesh


def boundary_dofs(mesh: Mesh, label_class: str) -> np.ndarray:
    """Vertex indices on boundary edges of the requested class.

    Vertices shared by a Dirichlet and a Neumann edge belong to the Dirichlet set.

    Args:
        mesh (Mesh): The mesh.
        label_class (str): ``"dirichlet"`` or ``"neumann"``.

    Returns:
        np.ndarray: Sorted unique vertex indices.
    """
    if label_class not in ("dirichlet", "neumann"):
        raise ValueError(f"label_class must be 'dirichlet' or 'neumann', got {label_class!r}")
    kinds = np.array([label_kind(label) for label in mesh.boundary_labels])
    dirichlet = np.unique(mesh.boundary_edges[kinds == "dirichlet"])
    if label_class == "dirichlet":
        return dirichlet
    neumann = np.unique(mesh.boundary_edges[kinds == "neumann"])
    return np.setdiff1d(neumann, dirichlet)


def dirichlet_values(mesh: Mesh, spec: BoundarySpec) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolate the Dirichlet velocity profiles at boundary vertices.

    Segments are applied in spec order except that no-slip segments (labels
    starting with ``wall``) are applied last, so wall values win at junctions.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Dirichlet vertex indices and their (n, 2)
        velocity values.
    """
    spec.check_labels(mesh)
    labels = np.array(mesh.boundary_labels)
    values = np.zeros((mesh.n_vertices, 2))
    order = sorted(
        (s for s in spec.segments if s.kind == "dirichlet"),
        key=lambda s: s.label.startswith("wall"),
    )
    for segment in order:
        verts = np.unique(mesh.boundary_edges[labels == segment.label])
        if verts.size == 0:
            continue
        xy = mesh.vertices[verts]
        values[verts] = segment.velocity(xy[:, 0], xy[:, 1])
    vertices = boundary_dofs(mesh, "dirichlet")
    return vertices, values[vertices]


def mesh_to_text(mesh: Mesh) -> str:
    """Serialize a mesh to the ``mesh2d 1`` text format."""
    out = io.StringIO()
    out.write("mesh2d 1\n")
    out.write(f"vertices {mesh.n_vertices}\n")
    for x, y in mesh.vertices.tolist():
        out.write(f"{x!r} {y!r}\n")
    out.write(f"triangles {mesh.n_triangles}\n")
    for a, b, c in mesh.triangles.tolist():
        out.write(f"{a} {b} {c}\n")
    out.write(f"boundary_edges {len(mesh.boundary_edges)}\n")
    for (a, b), label in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels):
        out.write(f"{a} {b} {label}\n")
    return out.getvalue()


def save_mesh(mesh: Mesh, path: str) -> None:
    """Write a mesh to ``path`` in the text format."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(mesh_to_text(mesh))
    logger.info(f"Mesh saved to {path}")


def load_mesh(source) -> Mesh:
    """Parse a mesh from the ``mesh2d 1`` text format.

    Args:
        source: ``bytes``, ``str`` text, or an open (binary or text) stream.

    Returns:
        Mesh: The validated mesh.

    Raises:
        MeshFormatError: On a syntax or referential error, with the line number.
        MeshError: On a topology or orientation violation.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MeshFormatError(f"Mesh text is not valid UTF-8: {e}") from e

    lines = [(n + 1, line.strip()) for n, line in enumerate(source.splitlines())]
    lines = [(n, line) for n, line in lines if line]
    cursor = 0

    def next_line(what: str) -> Tuple[int, List[str]]:
        nonlocal cursor
        if cursor >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshFormatError(f"Unexpected end of file, expected {what}", last + 1)
        lineno, line = lines[cursor]
        cursor += 1
        return lineno, line.split()

    def section(name: str) -> int:
        lineno, parts = next_line(f"'{name} <count>'")
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"Expected '{name} <count>'", lineno)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"Invalid {name} count {parts[1]!r}", lineno) from None
        if count < 0:
            raise MeshFormatError(f"Negative {name} count", lineno)
        return count

    lineno, parts = next_line("header")
    if parts != ["mesh2d", "1"]:
        raise MeshFormatError("Expected header 'mesh2d 1'", lineno)

    n_vertices = section("vertices")
    vertices = np.empty((n_vertices, 2))
    for k in range(n_vertices):
        lineno, parts = next_line("vertex coordinates")
        if len(parts) != 2:
            raise MeshFormatError("Vertex line needs 2 coordinates", lineno)
        try:
            vertices[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError("Invalid vertex coordinate", lineno) from None

    def indices(parts: List[str], lineno: int, what: str) -> List[int]:
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(f"Invalid vertex index in {what}", lineno) from None
        for v in values:
            if v < 0 or v >= n_vertices:
                raise MeshFormatError(f"{what} references missing vertex {v}", lineno)
        return values

    n_triangles = section("triangles")
    triangles = np.empty((n_triangles, 3), dtype=np.int64)
    for k in range(n_triangles):
        lineno, parts = next_line("triangle")
        if len(parts) != 3:
            raise MeshFormatError("Triangle line needs 3 vertex indices", lineno)
        triangles[k] = indices(parts, lineno, f"Triangle {k}")

    n_edges = section("boundary_edges")
    edges = np.empty((n_edges, 2), dtype=np.int64)
    labels = []
    for k in range(n_edges):
        lineno, parts = next_line("boundary edge")
        if len(parts) != 3:
            raise MeshFormatError("Boundary edge line needs 'i j label'", lineno)
        edges[k] = indices(parts[:2], lineno, f"Boundary edge {k}")
        if not LABEL_PATTERN.match(parts[2]):
            raise MeshFormatError(f"Invalid label {parts[2]!r}", lineno)
        labels.append(parts[2])

    if cursor < len(lines):
        raise MeshFormatError("Unexpected trailing content", lines[cursor][0])

    return Mesh(vertices, triangles, edges, labels)


def read_mesh_file(path: str) -> Mesh:
    """Load a mesh from a file path."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Mesh file not found: {path}")
    with open(path, "rb") as f:
        return load_mesh(f)
