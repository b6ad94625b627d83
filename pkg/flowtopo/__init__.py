"""Top-level package for flowtopo."""

__version__ = "0.1.0"

from .driver import (
    GEOMETRIES,
    PRESETS,
    HistoryRecord,
    RunConfig,
    RunResult,
    export_history,
    export_vtk,
    load_config,
    parse_config,
    preset_config,
    run_optimization,
)
from .fem import (
    FunctionSpace,
    QuadratureRule,
    SingularMatrixError,
    SolverError,
    eval_basis,
    p1_operators,
    quadrature_rule,
    solve_saddle,
    solve_spd,
)
from .flow import (
    FlowParams,
    FlowProblem,
    FlowState,
    NewtonConvergenceError,
    NewtonReport,
    divergence_norm,
)
from .gradient_flow import (
    SensitivityField,
    StepReport,
    allen_cahn_step,
    cahn_hilliard_step,
    dissipation_check,
    energy_gradient,
    sensitivity_density,
    uzawa_update,
)
from .mesh import (
    BoundarySegment,
    BoundarySpec,
    Mesh,
    MeshError,
    MeshFormatError,
    boundary_dofs,
    bypass_boundary,
    diffuser_boundary,
    generate_rect_mesh,
    load_mesh,
    mesh_to_text,
    save_mesh,
    uniform_boundary,
)
from .phase_field import (
    EnergyBreakdown,
    ModelParams,
    PhaseField,
    double_well,
    ginzburg_landau,
    permeability,
    project_unit_interval,
    solid_volume,
    total_energy,
)
from .utils import ConfigError, compile_expression, fluid_components, plot_history
