#!/usr/bin/env python

"""Tests for `flowtopo` package."""

import unittest

import flowtopo
from flowtopo import driver, fem, flow, gradient_flow, mesh, phase_field, utils


class TestFlowtopo(unittest.TestCase):
    """Tests for `flowtopo` package."""

    def test_package_import(self):
        """Test that the package imports correctly."""
        self.assertIsNotNone(flowtopo)
        self.assertEqual(flowtopo.__version__, "0.1.0")

    def test_public_names(self):
        expected = [
            "Mesh",
            "BoundarySpec",
            "generate_rect_mesh",
            "load_mesh",
            "save_mesh",
            "boundary_dofs",
            "FunctionSpace",
            "quadrature_rule",
            "solve_spd",
            "solve_saddle",
            "FlowProblem",
            "FlowParams",
            "PhaseField",
            "ModelParams",
            "total_energy",
            "allen_cahn_step",
            "cahn_hilliard_step",
            "uzawa_update",
            "dissipation_check",
            "RunConfig",
            "run_optimization",
            "export_vtk",
            "export_history",
            "fluid_components",
            "plot_history",
        ]
        for name in expected:
            self.assertTrue(hasattr(flowtopo, name), f"{name} not exported")

    def test_modules_use_package_loggers(self):
        for module in (driver, fem, flow, gradient_flow, mesh, phase_field, utils):
            self.assertEqual(module.logger.name, module.__name__)


if __name__ == "__main__":
    unittest.main()
