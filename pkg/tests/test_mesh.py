#!/usr/bin/env python

"""Tests for `flowtopo.mesh` module."""

import io
import os
import tempfile
import unittest

import numpy as np

from flowtopo.mesh import (
    BoundarySegment,
    BoundarySpec,
    Mesh,
    MeshError,
    MeshFormatError,
    boundary_dofs,
    bypass_boundary,
    dirichlet_values,
    generate_rect_mesh,
    label_kind,
    load_mesh,
    mesh_to_text,
    read_mesh_file,
    save_mesh,
    uniform_boundary,
)
from flowtopo.utils import ConfigError

from .test_fixtures import diffuser_mesh, get_test_data_paths, two_triangle_mesh

SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


class TestMesh(unittest.TestCase):
    """Tests for the Mesh type and its validation."""

    def test_two_triangle_mesh(self):
        mesh = two_triangle_mesh()
        self.assertEqual(mesh.n_vertices, 4)
        self.assertEqual(mesh.n_triangles, 2)
        self.assertAlmostEqual(mesh.domain_area, 1.0)
        self.assertEqual(len(mesh.edges), 5)
        self.assertEqual(mesh.labels, ["wall"])

    def test_arrays_are_read_only(self):
        mesh = two_triangle_mesh()
        with self.assertRaises(ValueError):
            mesh.vertices[0, 0] = 5.0

    def test_clockwise_triangle_named(self):
        with self.assertRaisesRegex(MeshError, "Triangle 0"):
            Mesh(SQUARE, [[0, 2, 1], [0, 2, 3]], [[0, 1], [1, 2], [2, 3], [3, 0]], ["wall"] * 4)

    def test_unlabeled_boundary_edge_names_midpoint(self):
        with self.assertRaisesRegex(MeshError, "midpoint"):
            Mesh(SQUARE, [[0, 1, 2], [0, 2, 3]], [[0, 1], [1, 2], [2, 3]], ["wall"] * 3)

    def test_interior_edge_cannot_be_labeled(self):
        edges = [[0, 1], [1, 2], [2, 3], [3, 0], [0, 2]]
        with self.assertRaisesRegex(MeshError, "not a boundary edge"):
            Mesh(SQUARE, [[0, 1, 2], [0, 2, 3]], edges, ["wall"] * 5)

    def test_missing_vertex(self):
        with self.assertRaises(MeshError):
            Mesh(SQUARE, [[0, 1, 7]], [[0, 1]], ["wall"])

    def test_label_count_mismatch(self):
        with self.assertRaisesRegex(MeshError, "label"):
            Mesh(SQUARE, [[0, 1, 2], [0, 2, 3]], [[0, 1], [1, 2], [2, 3], [3, 0]], ["wall"])

    def test_edge_lengths(self):
        mesh, _ = diffuser_mesh(6)
        self.assertAlmostEqual(float(mesh.edge_lengths().sum()), 4.0)
        self.assertAlmostEqual(float(mesh.edge_lengths("inlet-0").sum()), 1.0)
        self.assertAlmostEqual(float(mesh.edge_lengths("outlet-0").sum()), 1.0 / 3.0)

    def test_label_kind(self):
        self.assertEqual(label_kind("outlet-1"), "neumann")
        self.assertEqual(label_kind("inlet-0"), "dirichlet")
        self.assertEqual(label_kind("wall"), "dirichlet")


class TestGenerateRectMesh(unittest.TestCase):
    """Tests for the structured mesh generator."""

    def test_counts_and_orientation(self):
        mesh = generate_rect_mesh((0, 1), (0, 1), 2, 2, uniform_boundary())
        self.assertEqual(mesh.n_vertices, 9)
        self.assertEqual(mesh.n_triangles, 8)
        self.assertEqual(len(mesh.boundary_edges), 8)
        self.assertTrue(np.all(mesh.triangle_areas > 0))
        self.assertAlmostEqual(mesh.domain_area, 1.0)

    def test_vertex_numbering(self):
        mesh = generate_rect_mesh((0, 2), (0, 1), 4, 2, uniform_boundary())
        np.testing.assert_allclose(mesh.vertices[1 * 5 + 3], [1.5, 0.5])

    def test_union_jack_pattern(self):
        mesh = generate_rect_mesh((0, 1), (0, 1), 2, 2, uniform_boundary())
        # Cell (0, 0) is cut along its main diagonal, cell (1, 0) along the other one
        self.assertEqual(mesh.triangles[0].tolist(), [0, 1, 4])
        self.assertEqual(mesh.triangles[2].tolist(), [1, 2, 4])

    def test_diffuser_labels(self):
        mesh, _ = diffuser_mesh(6)
        labels = list(mesh.boundary_labels)
        self.assertEqual(labels.count("inlet-0"), 6)
        self.assertEqual(labels.count("outlet-0"), 2)
        self.assertEqual(labels.count("wall"), 16)

    def test_bypass_labels(self):
        mesh = generate_rect_mesh((0.0, 1.5), (-0.5, 0.5), 15, 20, bypass_boundary())
        labels = list(mesh.boundary_labels)
        for label in ("inlet-0", "inlet-1", "outlet-0", "outlet-1"):
            self.assertEqual(labels.count(label), 4)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            generate_rect_mesh((0, 1), (0, 1), 1, 4, uniform_boundary())
        with self.assertRaises(ValueError):
            generate_rect_mesh((1, 1), (0, 1), 4, 4, uniform_boundary())


class TestBoundarySpec(unittest.TestCase):
    """Tests for boundary segments, labeling and Dirichlet data."""

    def test_duplicate_labels(self):
        with self.assertRaises(ConfigError):
            BoundarySpec([BoundarySegment("wall"), BoundarySegment("wall", lambda x, y: x > 0)])

    def test_two_fallbacks(self):
        with self.assertRaises(ConfigError):
            BoundarySpec([BoundarySegment("wall"), BoundarySegment("wall-b")])

    def test_invalid_label(self):
        with self.assertRaises(ConfigError):
            BoundarySegment("Inlet 0")

    def test_overlapping_segments(self):
        spec = BoundarySpec(
            [
                BoundarySegment("inlet-0", lambda x, y: x < 0.5),
                BoundarySegment("inlet-1", lambda x, y: x < 0.7),
            ]
        )
        with self.assertRaisesRegex(ConfigError, "several segments"):
            spec.label_points(np.array([[0.2, 0.0]]))

    def test_uncovered_point(self):
        spec = BoundarySpec([BoundarySegment("inlet-0", lambda x, y: x < 0.5)])
        with self.assertRaisesRegex(ConfigError, "not covered"):
            spec.label_points(np.array([[0.9, 0.0]]))

    def test_unknown_label(self):
        spec = uniform_boundary()
        self.assertIn("wall", spec)
        with self.assertRaises(ConfigError):
            spec.segment("inlet-0")

    def test_relabel(self):
        mesh = two_triangle_mesh()
        _, spec = diffuser_mesh(2)
        relabeled = spec.relabel(mesh)
        self.assertEqual(
            list(relabeled.boundary_labels), ["wall", "outlet-0", "wall", "inlet-0"]
        )

    def test_profile_expression(self):
        segment = BoundarySegment("inlet-0", lambda x, y: x == 0, ("4*y*(1-y)", "0"))
        values = segment.velocity(np.array([0.0, 0.0]), np.array([0.5, 0.25]))
        np.testing.assert_allclose(values, [[1.0, 0.0], [0.75, 0.0]])

    def test_boundary_dofs_dirichlet_wins(self):
        mesh, _ = diffuser_mesh(6)
        np.testing.assert_array_equal(boundary_dofs(mesh, "neumann"), [3 * 7 + 6])
        dirichlet = boundary_dofs(mesh, "dirichlet")
        self.assertIn(2 * 7 + 6, dirichlet)
        self.assertIn(4 * 7 + 6, dirichlet)
        self.assertEqual(len(dirichlet), 24 - 1)
        with self.assertRaises(ValueError):
            boundary_dofs(mesh, "robin")

    def test_dirichlet_values_wall_wins_at_corners(self):
        mesh, spec = diffuser_mesh(6)
        verts, values = dirichlet_values(mesh, spec)
        lookup = dict(zip(verts.tolist(), values.tolist()))
        self.assertEqual(lookup[3 * 7], [1.0, 0.0])
        self.assertEqual(lookup[0], [0.0, 0.0])
        self.assertEqual(lookup[6 * 7], [0.0, 0.0])


class TestMeshIO(unittest.TestCase):
    """Tests for the mesh text format."""

    def setUp(self):
        self.test_paths = get_test_data_paths()

    def test_text_round_trip(self):
        mesh, _ = diffuser_mesh(4)
        loaded = load_mesh(mesh_to_text(mesh))
        np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
        np.testing.assert_array_equal(loaded.boundary_edges, mesh.boundary_edges)
        self.assertEqual(loaded.boundary_labels, mesh.boundary_labels)

    def test_load_from_stream(self):
        mesh = two_triangle_mesh()
        loaded = load_mesh(io.BytesIO(mesh_to_text(mesh).encode("utf-8")))
        self.assertEqual(loaded.n_triangles, 2)

    def test_save_and_read_file(self):
        mesh, _ = diffuser_mesh(4)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sub", "diffuser.mesh")
            save_mesh(mesh, path)
            loaded = read_mesh_file(path)
        self.assertEqual(loaded.n_vertices, 25)

    def test_fixture_mesh_file(self):
        mesh = read_mesh_file(self.test_paths["test_mesh"])
        self.assertEqual(mesh.labels, ["wall", "outlet-0", "inlet-0"])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            read_mesh_file("does/not/exist.mesh")

    def test_bad_header(self):
        with self.assertRaises(MeshFormatError) as ctx:
            load_mesh("mesh3d 1\n")
        self.assertEqual(ctx.exception.lineno, 1)

    def test_missing_vertex_reference(self):
        text = (
            "mesh2d 1\nvertices 4\n0 0\n1 0\n1 1\n0 1\n"
            "triangles 2\n0 1 2\n0 2 7\n"
            "boundary_edges 4\n0 1 wall\n1 2 wall\n2 3 wall\n3 0 wall\n"
        )
        with self.assertRaises(MeshFormatError) as ctx:
            load_mesh(text)
        self.assertEqual(ctx.exception.lineno, 9)
        self.assertIn("missing vertex 7", str(ctx.exception))

    def test_truncated_file(self):
        with self.assertRaisesRegex(MeshFormatError, "Unexpected end of file"):
            load_mesh("mesh2d 1\nvertices 4\n0 0\n")

    def test_invalid_label(self):
        text = mesh_to_text(two_triangle_mesh()).replace("3 0 wall", "3 0 Wall")
        with self.assertRaises(MeshFormatError):
            load_mesh(text)

    def test_topology_error_after_parse(self):
        text = mesh_to_text(two_triangle_mesh()).replace("0 1 2\n", "0 2 1\n")
        with self.assertRaises(MeshError):
            load_mesh(text)


if __name__ == "__main__":
    unittest.main()
