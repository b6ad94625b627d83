"""Run configuration, benchmark presets, the optimization loop and exports."""

import logging
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

import pandas as pd
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from tqdm import tqdm

from .flow import FlowParams, FlowProblem, FlowState, NewtonConvergenceError
from .gradient_flow import (
    StepReport,
    allen_cahn_step,
    cahn_hilliard_step,
    sensitivity_density,
    uzawa_update,
)
from .mesh import (
    BoundarySpec,
    Mesh,
    MeshError,
    bypass_boundary,
    diffuser_boundary,
    generate_rect_mesh,
    read_mesh_file,
    uniform_boundary,
)
from .phase_field import (
    EnergyBreakdown,
    ModelParams,
    PhaseField,
    phase_mass,
    project_unit_interval,
    projection_gradient_ok,
    solid_volume,
    total_energy,
)
from .utils import ConfigError, compile_expression

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "iter",
    "W_total",
    "W_gl_grad",
    "W_gl_well",
    "J_dissipation",
    "W_volume",
    "volume",
    "ell",
    "phi_min",
    "phi_max",
    "newton_iters",
    "dissipation_bound",
]

GEOMETRIES: Dict[str, Dict[str, Any]] = {
    "unit-square": {
        "x_range": (0.0, 1.0),
        "y_range": (0.0, 1.0),
        "boundary": uniform_boundary,
    },
    "diffuser": {
        "x_range": (0.0, 1.0),
        "y_range": (0.0, 1.0),
        "boundary": diffuser_boundary,
    },
    "bypass": {
        "x_range": (0.0, 1.5),
        "y_range": (-0.5, 0.5),
        "boundary": bypass_boundary,
    },
}

_DIFFUSER_AC = {
    "geometry": "diffuser",
    "nx": 96,
    "ny": 96,
    "mu": 0.01,
    "alpha0": 1000.0,
    "eps1": 0.001,
    "eps2": 0.1,
    "beta": 5.0,
    "v_target": 0.4,
    "eta1": 1.0,
    "normalize_sensitivity": True,
    "s0": 1.0,
    "s1": 0.1,
    "tau": 0.005,
    "scheme": "allen-cahn",
    "n_inner": 10,
    "use_projection": True,
    "n_outer": 100,
    "phi0": "0.5",
}

_DIFFUSER_CH = dict(
    _DIFFUSER_AC,
    scheme="cahn-hilliard",
    use_projection=False,
    s0=1.0,
    s1=0.5,
    n_inner=1,
    tau=0.0025,
)

_BYPASS_AC = {
    "geometry": "bypass",
    "nx": 144,
    "ny": 96,
    "mu": 0.01,
    "alpha0": 1000.0,
    "eps1": 0.001,
    "eps2": 0.1,
    "beta": 500.0,
    "v_target": 0.85,
    "eta1": 90.0,
    "normalize_sensitivity": True,
    "s0": 1.0,
    "s1": 0.5,
    "tau": 0.0005,
    "scheme": "allen-cahn",
    "n_inner": 10,
    "use_projection": True,
    "n_outer": 100,
    "phi0": "min(abs(y-0.3)-0.1, abs(y+0.3)-0.1)",
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "diffuser-ac": {
        "description": "Example 1 diffuser, projected Allen-Cahn flow: tau=0.005, "
        "S0=1, S1=0.1, eps1=0.001, eps2=0.1, beta=5, eta1=1, V target 0.4",
        "values": _DIFFUSER_AC,
    },
    "diffuser-ac-s1": {
        "description": "Table 1 situation 1, diffuser at tau=0.2: S0=0, S1=0, "
        "no projection (expected to blow up)",
        "values": dict(_DIFFUSER_AC, tau=0.2, s0=0.0, s1=0.0, use_projection=False),
    },
    "diffuser-ac-s2": {
        "description": "Table 1 situation 2, diffuser at tau=0.2: S0=100, S1=0, "
        "no projection",
        "values": dict(_DIFFUSER_AC, tau=0.2, s0=100.0, s1=0.0, use_projection=False),
    },
    "diffuser-ac-s3": {
        "description": "Table 1 situation 3, diffuser at tau=0.2: S0=100, S1=1, "
        "no projection",
        "values": dict(_DIFFUSER_AC, tau=0.2, s0=100.0, s1=1.0, use_projection=False),
    },
    "diffuser-ac-s4": {
        "description": "Table 1 situation 4, diffuser at tau=0.2: S0=100, S1=1, "
        "with projection (phi stays in [0, 1])",
        "values": dict(_DIFFUSER_AC, tau=0.2, s0=100.0, s1=1.0, use_projection=True),
    },
    "diffuser-ch": {
        "description": "Example 1 diffuser, Cahn-Hilliard flow: tau=0.0025, S0=1, "
        "S1=0.5, one inner step, phi0=0.5",
        "values": _DIFFUSER_CH,
    },
    "diffuser-ch-range": {
        "description": "Table 2 initial value, diffuser Cahn-Hilliard flow started "
        "from phi0=0.65",
        "values": dict(_DIFFUSER_CH, phi0="0.65"),
    },
    "bypass-ac": {
        "description": "Example 2 bypass, projected Allen-Cahn flow: tau=0.0005, "
        "S0=1, S1=0.5, beta=500, eta1=90, V target 0.85",
        "values": _BYPASS_AC,
    },
    "bypass-ch": {
        "description": "Example 2 bypass, Cahn-Hilliard flow: tau=0.00025, "
        "eps2=0.01, S0=1, S1=0.15, eta1=4",
        "values": dict(
            _BYPASS_AC,
            scheme="cahn-hilliard",
            use_projection=False,
            tau=0.00025,
            eps2=0.01,
            s0=1.0,
            s1=0.15,
            eta1=4.0,
            phi0="0.5",
        ),
    },
}


class RunConfig(BaseModel):
    """Validated configuration of one optimization run."""

    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = None
    geometry: Literal["unit-square", "diffuser", "bypass"] = "diffuser"
    mesh_file: Optional[str] = None
    nx: int = Field(96, ge=2)
    ny: int = Field(96, ge=2)
    mu: float = Field(0.01, gt=0)
    alpha0: float = Field(1000.0, ge=0)
    newton_tol: float = Field(1e-8, gt=0)
    newton_max: int = Field(20, ge=1)
    eps1: float = Field(0.001, gt=0)
    eps2: float = Field(0.1, gt=0)
    beta: float = Field(5.0, ge=0)
    v_target: float = Field(0.4, ge=0)
    eta1: float = Field(1.0, ge=0)
    normalize_sensitivity: bool = True
    s0: float = Field(1.0, ge=0)
    s1: float = Field(0.1, ge=0)
    tau: float = Field(0.005, gt=0)
    scheme: Literal["allen-cahn", "cahn-hilliard"] = "allen-cahn"
    n_inner: int = Field(10, ge=1)
    use_projection: Optional[bool] = None
    well_quadrature: Literal["nodal", "quadrature"] = "nodal"
    n_outer: int = Field(100, ge=0)
    phi0: str = "0.5"
    outdir: Optional[str] = None
    export_every: int = Field(0, ge=0)
    strict_energy: bool = False
    max_tau_halvings: int = Field(5, ge=0)

    @field_validator("phi0", mode="before")
    @classmethod
    def _phi0_expression(cls, value):
        value = str(value)
        compile_expression(value)
        return value

    @field_validator("mesh_file")
    @classmethod
    def _mesh_file_exists(cls, value):
        if value is not None and not os.path.exists(value):
            raise ConfigError(f"Mesh file not found: {value}", key="mesh_file")
        return value

    @model_validator(mode="after")
    def _resolve_projection(self):
        if self.use_projection is None:
            self.use_projection = self.scheme == "allen-cahn"
        elif self.use_projection and self.scheme == "cahn-hilliard":
            raise ConfigError(
                "use_projection cannot be combined with scheme = cahn-hilliard",
                key="use_projection",
            )
        if self.mesh_file is None:
            geometry = GEOMETRIES[self.geometry]
            (x0, x1), (y0, y1) = geometry["x_range"], geometry["y_range"]
            if self.v_target > (x1 - x0) * (y1 - y0):
                raise ConfigError(
                    f"v_target {self.v_target} exceeds the domain area",
                    key="v_target",
                )
        return self

    def flow_params(self) -> FlowParams:
        return FlowParams(
            mu=self.mu,
            alpha0=self.alpha0,
            newton_tol=self.newton_tol,
            newton_max=self.newton_max,
        )

    def model_params(self) -> ModelParams:
        return ModelParams(
            eps1=self.eps1,
            eps2=self.eps2,
            beta=self.beta,
            v_target=self.v_target,
            alpha0=self.alpha0,
            eta1=self.eta1,
            normalize_sensitivity=self.normalize_sensitivity,
            s0=self.s0,
            s1=self.s1,
            tau=self.tau,
            scheme=self.scheme,
            n_inner=self.n_inner,
            use_projection=bool(self.use_projection),
            well_quadrature=self.well_quadrature,
        )

    def to_text(self) -> str:
        """Render the resolved configuration in the config file format."""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _validation_to_config_error(
    error: ValidationError, linenos: Dict[str, int]
) -> ConfigError:
    first = error.errors()[0]
    original = (first.get("ctx") or {}).get("error")
    loc = first.get("loc") or ()
    key = str(loc[0]) if loc else None
    if isinstance(original, ConfigError):
        key = original.key or key
        message = str(original).split("] ", 1)[-1]
    else:
        message = first.get("msg", str(error))
    return ConfigError(message, key=key, lineno=linenos.get(key) if key else None)


def parse_config(text, **overrides) -> RunConfig:
    """Parse a ``key = value`` configuration text.

    ``preset = <name>`` (anywhere in the file) loads the preset values first;
    the remaining keys override them, and ``overrides`` override the file.

    Args:
        text (bytes | str): The configuration text (UTF-8).
        **overrides: Extra key/value pairs applied last.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: On a syntax error, unknown or duplicate key, or invalid value.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"Config is not valid UTF-8: {e}") from e

    known = set(RunConfig.model_fields)
    values: Dict[str, str] = {}
    linenos: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Expected 'key = value', got {raw.strip()!r}", lineno=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError("Unknown configuration key", key=key, lineno=lineno)
        if key in values:
            raise ConfigError("Duplicate configuration key", key=key, lineno=lineno)
        if not value:
            raise ConfigError("Missing value", key=key, lineno=lineno)
        values[key] = value
        linenos[key] = lineno

    merged: Dict[str, Any] = {}
    preset = overrides.get("preset", values.get("preset"))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}",
                key="preset",
                lineno=linenos.get("preset"),
            )
        merged.update(PRESETS[preset]["values"])
    merged.update(values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in overrides:
        if key not in known:
            raise ConfigError("Unknown configuration key", key=key)

    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise _validation_to_config_error(e, linenos) from None


def load_config(path: str, **overrides) -> RunConfig:
    """Read and parse a configuration file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "rb") as f:
        return parse_config(f.read(), **overrides)


def preset_config(name: str, **overrides) -> RunConfig:
    """Build the configuration of a named preset with optional overrides."""
    return parse_config(f"preset = {name}\n", **overrides)


def build_mesh(config: RunConfig) -> Tuple[Mesh, BoundarySpec]:
    """Generate or load the mesh of a configuration together with its boundary spec."""
    geometry = GEOMETRIES[config.geometry]
    boundary = geometry["boundary"]()
    if config.mesh_file:
        try:
            mesh = read_mesh_file(config.mesh_file)
        except MeshError as e:
            raise ConfigError(
                f"Invalid mesh file {config.mesh_file}: {e}", key="mesh_file"
            ) from e
        boundary.check_labels(mesh)
        if config.v_target > mesh.domain_area:
            raise ConfigError(
                f"v_target {config.v_target} exceeds the domain area {mesh.domain_area}",
                key="v_target",
            )
    else:
        mesh = generate_rect_mesh(
            geometry["x_range"], geometry["y_range"], config.nx, config.ny, boundary
        )
    return mesh, boundary


class HistoryRecord(BaseModel):
    """One outer iteration of the run history."""

    iteration: int
    energy: EnergyBreakdown
    volume: float
    mass: float
    ell: float
    phi_min: float
    phi_max: float
    newton_iters: int
    tau: float
    steps: List[StepReport] = Field(default_factory=list)

    def row(self) -> Dict[str, Any]:
        e = self.energy
        return {
            "iter": self.iteration,
            "W_total": e.total,
            "W_gl_grad": e.gl_gradient,
            "W_gl_well": e.gl_well,
            "J_dissipation": e.dissipation,
            "W_volume": e.volume_penalty,
            "volume": self.volume,
            "ell": self.ell,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
            "newton_iters": self.newton_iters,
            "dissipation_bound": e.dissipation_bound,
        }


class RunResult:
    """Final fields and history of an optimization run.

    Attributes:
        phase (PhaseField): Final phase field.
        state (FlowState): Flow solved for the final phase field (None if the
            first state solve failed).
        history (List[HistoryRecord]): One record per outer iteration.
        status (str): ``completed``, ``newton_failed`` or ``energy_violation``.
        config (RunConfig): The configuration that was run.
    """

    def __init__(
        self,
        phase: PhaseField,
        state: Optional[FlowState],
        history: List[HistoryRecord],
        status: str,
        config: RunConfig,
    ):
        self.phase = phase
        self.state = state
        self.history = history
        self.status = status
        self.config = config

    def __repr__(self) -> str:
        return f"RunResult(status={self.status!r}, iterations={len(self.history)})"

    @property
    def energies(self) -> List[EnergyBreakdown]:
        return [record.energy for record in self.history]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.row() for r in self.history], columns=HISTORY_COLUMNS)


class _Optimizer:
    """State of one run of the outer loop."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.mesh, self.boundary = build_mesh(config)
        self.problem = FlowProblem(self.mesh, self.boundary, config.flow_params())
        self.params = config.model_params()
        self.allen_cahn = self.params.scheme == "allen-cahn"

    def evolve(
        self, phase: PhaseField, forcing, ell: float
    ) -> Tuple[PhaseField, float, float, List[StepReport]]:
        """Steps 3 and 4 of an outer iteration with the forcing frozen."""
        params = self.params
        reports: List[StepReport] = []
        for k in range(params.n_inner):
            logger.info(f"Step 3: gradient flow (inner step {k + 1}/{params.n_inner})")
            if self.allen_cahn:
                new_phase, report = allen_cahn_step(phase, forcing, params)
                if params.use_projection:
                    logger.info("Step 3(2): projection")
                    projected = project_unit_interval(new_phase)
                    report.projection_gradient_ok = projection_gradient_ok(
                        new_phase, projected
                    )
                    new_phase = projected
            else:
                new_phase, _, report = cahn_hilliard_step(phase, forcing, params)
            reports.append(report)
            phase = new_phase
        if self.allen_cahn:
            logger.info("Step 4: multiplier update")
            ell = uzawa_update(ell, phase, params)
        bound = float(sum(r.dissipation_bound for r in reports))
        return phase, ell, bound, reports

    def export_fields(self, phase: PhaseField, state: FlowState, tag: str) -> None:
        outdir = self.config.outdir
        if outdir:
            export_vtk(phase, state, os.path.join(outdir, f"fields_{tag}.vtk"))

    def run(self, verbose: bool = False) -> RunResult:
        config = self.config
        problem = self.problem
        phase = PhaseField.from_expression(self.mesh, config.phi0)
        if self.allen_cahn:
            phase = project_unit_interval(phase)

        history: List[HistoryRecord] = []
        state: Optional[FlowState] = None
        ell = 0.0
        bound = 0.0
        steps: List[StepReport] = []
        previous = None
        halvings = 0
        status = "completed"
        n = 0

        logger.info(
            f"Starting {config.scheme} run on {self.mesh}: N={config.n_outer}, "
            f"N_phi={self.params.n_inner}, tau={self.params.tau}"
        )
        progress = tqdm(total=config.n_outer + 1, disable=not verbose, desc="Outer iterations")
        try:
            while True:
                logger.info(f"Iteration {n}: Step 1: solve state")
                try:
                    state_new, report = problem.solve_navier_stokes(phase, guess=state)
                except NewtonConvergenceError as e:
                    if previous is None or halvings >= config.max_tau_halvings:
                        logger.error(f"Newton failed at iteration {n}: {e}")
                        status = "newton_failed"
                        break
                    halvings += 1
                    tau = self.params.tau / 2.0
                    self.params = self.params.model_copy(update={"tau": tau})
                    logger.warning(
                        f"Newton failed at iteration {n}; halving tau to {tau:.3e} "
                        f"({halvings}/{config.max_tau_halvings}) and retrying"
                    )
                    prev_phase, prev_forcing, prev_ell = previous
                    phase, ell, bound, steps = self.evolve(prev_phase, prev_forcing, prev_ell)
                    continue
                state = state_new

                energy = total_energy(phase, state, self.params, problem, bound)
                record = HistoryRecord(
                    iteration=n,
                    energy=energy,
                    volume=solid_volume(phase),
                    mass=phase_mass(phase),
                    ell=ell,
                    phi_min=phase.min,
                    phi_max=phase.max,
                    newton_iters=report.iterations,
                    tau=self.params.tau,
                    steps=steps,
                )
                history.append(record)
                progress.update(1)
                progress.set_postfix(W=f"{energy.total:.6e}")
                logger.info(
                    f"Iteration {n}: W={energy.total:.10e} J={energy.dissipation:.6e} "
                    f"V={record.volume:.6f} ell={ell:.6e} "
                    f"phi in [{phase.min:.4f}, {phase.max:.4f}] newton={report.iterations}"
                )

                if config.export_every and n % config.export_every == 0:
                    self.export_fields(phase, state, f"{n:04d}")

                if config.strict_energy and n > 0:
                    tolerance = 1e-9 * max(1.0, abs(history[0].energy.total))
                    increase = energy.total - history[-2].energy.total
                    if increase > tolerance:
                        logger.error(
                            f"Energy increased by {increase:.3e} at iteration {n} "
                            f"(tolerance {tolerance:.3e})"
                        )
                        status = "energy_violation"
                        break

                if n == config.n_outer:
                    break

                logger.info(f"Iteration {n}: Step 2: solve adjoint")
                adjoint = problem.solve_adjoint(state, phase)
                forcing = sensitivity_density(phase, state, adjoint, self.params, ell, problem)
                previous = (phase, forcing, ell)
                phase, ell, bound, steps = self.evolve(phase, forcing, ell)
                n += 1
        finally:
            progress.close()

        if state is not None:
            self.export_fields(phase, state, "final")
        result = RunResult(phase, state, history, status, config)
        if config.outdir:
            export_history(result, os.path.join(config.outdir, "history.csv"))
        logger.info(f"Run finished with status {status} after {len(history)} records")
        return result


def run_optimization(config: RunConfig, verbose: bool = False) -> RunResult:
    """Run the Allen-Cahn or Cahn-Hilliard optimization loop of a configuration.

    Each outer iteration solves the state, records the energy, solves the
    adjoint, takes ``n_inner`` gradient-flow steps with the forcing frozen (with
    projection for Allen-Cahn) and, for Allen-Cahn, updates the multiplier.
    Newton failures halve ``tau`` and retry the last phase update.

    Args:
        config (RunConfig): The validated configuration.
        verbose (bool): Show a progress bar.

    Returns:
        RunResult: Final fields, history and exit status.
    """
    package_logger = logging.getLogger("flowtopo")
    handler = None
    previous_level = package_logger.level
    if config.outdir:
        os.makedirs(config.outdir, exist_ok=True)
        handler = logging.FileHandler(
            os.path.join(config.outdir, "run.log"), mode="w", encoding="utf-8"
        )
        handler.setLevel(logging.INFO)
        handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        package_logger.addHandler(handler)
        if package_logger.getEffectiveLevel() > logging.INFO:
            package_logger.setLevel(logging.INFO)
    try:
        return _Optimizer(config).run(verbose=verbose)
    except Exception as e:
        logger.error(f"Run failed: {e}")
        raise
    finally:
        if handler is not None:
            package_logger.removeHandler(handler)
            handler.close()
            package_logger.setLevel(previous_level)


def _format(value: float) -> str:
    return "%.17g" % value


def export_vtk(
    phase: PhaseField, state: FlowState, path: str, title: str = "flowtopo fields"
) -> None:
    """Write phi, pressure and vertex velocity as a legacy ASCII VTK unstructured grid.

    Args:
        phase (PhaseField): The phase field.
        state (FlowState): The flow state on the same mesh.
        path (str): Output file path.
        title (str): Title line of the file.
    """
    mesh = phase.mesh
    if state.mesh is not mesh:
        raise ValueError("Phase field and flow state live on different meshes")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)

    V, T = mesh.n_vertices, mesh.n_triangles
    velocity = state.vertex_velocity()
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {V} double",
    ]
    lines.extend(f"{_format(x)} {_format(y)} 0" for x, y in mesh.vertices.tolist())
    lines.append(f"CELLS {T} {4 * T}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist())
    lines.append(f"CELL_TYPES {T}")
    lines.extend("5" for _ in range(T))
    lines.append(f"POINT_DATA {V}")
    lines.append("SCALARS phi double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(_format(v) for v in phase.values.tolist())
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(_format(v) for v in state.pressure.tolist())
    lines.append("VECTORS velocity double")
    lines.extend(f"{_format(u)} {_format(v)} 0" for u, v in velocity.tolist())

    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"VTK written to {path}")


def export_history(result: RunResult, path: str) -> None:
    """Write the run history as CSV with full double precision."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    result.to_dataframe().to_csv(path, index=False, float_format="%.16e")
    logger.info(f"History written to {path}")
