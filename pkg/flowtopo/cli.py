"""Command-line interface for flowtopo."""

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .driver import (
    GEOMETRIES,
    PRESETS,
    build_mesh,
    load_config,
    parse_config,
    run_optimization,
)
from .mesh import MeshError, save_mesh
from .utils import ConfigError

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtopo",
        description="Phase-field topology optimization of Navier-Stokes flows",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an optimization from a config file")
    run.add_argument("--config", required=True, help="Config file (key = value lines)")
    run.add_argument("--outdir", help="Output directory for VTK, history.csv and run.log")
    run.add_argument(
        "--strict-energy",
        action="store_true",
        help="Stop with status energy_violation when the total energy increases",
    )
    run.add_argument(
        "--export-every", type=int, help="Write VTK fields every K outer iterations"
    )

    sub.add_parser("presets", help="List the built-in presets")

    check = sub.add_parser("check", help="Validate a config file and print it resolved")
    check.add_argument("--config", required=True, help="Config file")

    mesh_gen = sub.add_parser("mesh-gen", help="Write the generated mesh of a preset")
    mesh_gen.add_argument(
        "--preset",
        required=True,
        help=f"Preset or geometry name ({', '.join(sorted(PRESETS) + sorted(GEOMETRIES))})",
    )
    mesh_gen.add_argument("--out", required=True, help="Output mesh file")
    mesh_gen.add_argument("--nx", type=int, help="Override cells in x")
    mesh_gen.add_argument("--ny", type=int, help="Override cells in y")
    return parser


def _run(args) -> int:
    overrides = {"outdir": args.outdir, "export_every": args.export_every}
    if args.strict_energy:
        overrides["strict_energy"] = True
    config = load_config(args.config, **overrides)
    result = run_optimization(config, verbose=True)
    print(f"status: {result.status}")
    if result.history:
        last = result.history[-1]
        print(
            f"iterations: {last.iteration}  W_total: {last.energy.total:.10e}  "
            f"volume: {last.volume:.6f}"
        )
    return 0 if result.status == "completed" else 1


def _presets() -> int:
    for name, preset in PRESETS.items():
        print(f"{name}: {preset['description']}")
    return 0


def _check(args) -> int:
    config = load_config(args.config)
    mesh, _ = build_mesh(config)
    logger.info(f"Config {args.config} is valid ({mesh})")
    print(config.to_text(), end="")
    return 0


def _mesh_gen(args) -> int:
    overrides = {"nx": args.nx, "ny": args.ny}
    if args.preset in PRESETS:
        config = parse_config(f"preset = {args.preset}\n", **overrides)
    elif args.preset in GEOMETRIES:
        config = parse_config(f"geometry = {args.preset}\n", **overrides)
    else:
        raise ConfigError(f"Unknown preset or geometry {args.preset!r}", key="preset")
    mesh, _ = build_mesh(config)
    save_mesh(mesh, args.out)
    print(f"wrote {mesh} to {args.out}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the ``flowtopo`` console script.

    Args:
        argv (List[str], optional): Arguments, defaults to ``sys.argv[1:]``.

    Returns:
        int: Process exit code.
    """
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    handlers = {
        "run": _run,
        "presets": lambda _: _presets(),
        "check": _check,
        "mesh-gen": _mesh_gen,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, MeshError, FileNotFoundError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
