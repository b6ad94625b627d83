"""The utils module contains common functions and classes used by the other modules."""

# Standard Library
import ast
import logging
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

# Third-Party Libraries
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Configuration parse or semantic error.

    Args:
        message (str): Human readable description.
        key (str, optional): The offending configuration key. Defaults to None.
        lineno (int, optional): 1-based line number in the config text. Defaults to None.
    """

    def __init__(
        self, message: str, key: Optional[str] = None, lineno: Optional[int] = None
    ):
        prefix = ""
        if lineno is not None:
            prefix += f"line {lineno}: "
        if key is not None:
            prefix += f"[{key}] "
        super().__init__(prefix + message)
        self.key = key
        self.lineno = lineno


_EXPRESSION_FUNCTIONS: Dict[str, Callable] = {
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
}

_EXPRESSION_CONSTANTS: Dict[str, float] = {"pi": float(np.pi)}

_EXPRESSION_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
)


def compile_expression(
    text: Union[str, float, int], variables: Sequence[str] = ("x", "y")
) -> Callable[..., np.ndarray]:
    """Compile a closed-form expression of the coordinates into a numpy function.

    Only arithmetic (``+ - * / **``), numeric literals, ``pi`` and the functions
    ``abs, min, max, sqrt, exp, log, sin, cos, tanh`` are accepted. ``min`` and
    ``max`` act elementwise.

    Args:
        text (str | float): The expression, e.g. ``"min(abs(y-0.3)-0.1, abs(y+0.3)-0.1)"``.
            Plain numbers are accepted and give a constant function.
        variables (Sequence[str]): Names bound to the positional arguments.

    Returns:
        Callable: ``f(x, y)`` returning a float array broadcast to ``np.shape(x)``.

    Raises:
        ConfigError: If the expression does not parse or uses a forbidden construct.
    """
    source = str(text).strip()
    if not source:
        raise ConfigError("Empty expression")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as e:
        raise ConfigError(f"Invalid expression {source!r}: {e.msg}") from e

    allowed_names = set(variables) | set(_EXPRESSION_FUNCTIONS) | set(_EXPRESSION_CONSTANTS)
    for node in ast.walk(tree):
        if not isinstance(node, _EXPRESSION_NODES):
            raise ConfigError(
                f"Unsupported syntax {type(node).__name__} in expression {source!r}"
            )
        if isinstance(node, ast.Name) and node.id not in allowed_names:
            raise ConfigError(f"Unknown name {node.id!r} in expression {source!r}")
        if isinstance(node, ast.Constant) and (
            isinstance(node.value, bool) or not isinstance(node.value, (int, float))
        ):
            raise ConfigError(f"Only numeric literals are allowed in {source!r}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _EXPRESSION_FUNCTIONS:
                raise ConfigError(f"Unsupported function call in expression {source!r}")
            if node.keywords:
                raise ConfigError(f"Keyword arguments are not allowed in {source!r}")

    code = compile(tree, "<expression>", "eval")

    def evaluate(*args: Any) -> np.ndarray:
        if len(args) != len(variables):
            raise TypeError(f"Expected {len(variables)} coordinate arrays, got {len(args)}")
        namespace: Dict[str, Any] = dict(_EXPRESSION_FUNCTIONS)
        namespace.update(_EXPRESSION_CONSTANTS)
        arrays = [np.asarray(a, dtype=float) for a in args]
        namespace.update(zip(variables, arrays))
        with np.errstate(all="ignore"):
            value = eval(code, {"__builtins__": {}}, namespace)
        shape = np.broadcast_shapes(*(a.shape for a in arrays))
        return np.array(np.broadcast_to(np.asarray(value, dtype=float), shape))

    evaluate.source = source
    return evaluate


def fluid_components(phase: Any, threshold: float = 0.5) -> List[Dict[str, Any]]:
    """Label connected fluid regions of a phase field.

    Vertices with ``phi > threshold`` count as fluid; two fluid vertices are
    connected when they share a mesh edge.

    Args:
        phase (PhaseField): The phase field to analyse.
        threshold (float): Fluid/solid cut value. Defaults to 0.5.

    Returns:
        List[Dict]: One entry per component, largest first, with keys ``size``
        (vertex count), ``vertices`` (index array) and ``labels`` (sorted
        boundary labels whose edges have a fluid vertex in the component).
    """
    mesh = phase.mesh
    fluid = np.asarray(phase.values) > threshold
    edges = mesh.edges
    keep = fluid[edges[:, 0]] & fluid[edges[:, 1]]
    e = edges[keep]
    n = mesh.n_vertices
    graph = coo_matrix(
        (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)
    ).tocsr()
    _, labels = connected_components(graph, directed=False)

    touched: Dict[int, set] = {}
    for (i, j), label in zip(mesh.boundary_edges, mesh.boundary_labels):
        for v in (i, j):
            if fluid[v]:
                touched.setdefault(int(labels[v]), set()).add(label)

    components = []
    for comp in np.unique(labels[fluid]):
        vertices = np.flatnonzero(fluid & (labels == comp))
        components.append(
            {
                "size": int(vertices.size),
                "vertices": vertices,
                "labels": sorted(touched.get(int(comp), set())),
            }
        )
    components.sort(key=lambda c: (-c["size"], int(c["vertices"][0])))
    return components


def plot_history(
    history: Any,
    figsize: Tuple[int, int] = (12, 4),
    v_target: Optional[float] = None,
    save_path: Optional[str] = None,
    show: bool = False,
    kwargs: Optional[Dict] = None,
):
    """Plot total energy and volume error against the outer iteration.

    Args:
        history: A ``RunResult``, a ``pandas.DataFrame`` with the history columns,
            or the path of a ``history.csv`` file.
        figsize (Tuple[int, int]): The figure size.
        v_target (float, optional): Target solid volume; when given the right
            panel shows ``|V - v_target|`` instead of ``V``.
        save_path (str, optional): Where to save the figure.
        show (bool): Whether to call ``plt.show()``.
        kwargs (dict, optional): Extra keyword arguments for ``plt.savefig``.

    Returns:
        matplotlib.figure.Figure: The figure.
    """
    if kwargs is None:
        kwargs = {}
    if isinstance(history, (str, os.PathLike)):
        df = pd.read_csv(history)
    elif isinstance(history, pd.DataFrame):
        df = history
    else:
        df = history.to_dataframe()

    fig, axes = plt.subplots(1, 2, figsize=figsize)

    axes[0].plot(df["iter"], df["W_total"], label="W total")
    axes[0].plot(df["iter"], df["J_dissipation"], label="J dissipation", linestyle="--")
    axes[0].set_title("Energy")
    axes[0].set_xlabel("Outer iteration")
    axes[0].set_ylabel("Energy")
    axes[0].legend()
    axes[0].grid(True)

    if v_target is not None:
        axes[1].semilogy(df["iter"], np.abs(df["volume"] - v_target) + 1e-16)
        axes[1].set_title("Volume error")
        axes[1].set_ylabel("|V - V target|")
    else:
        axes[1].plot(df["iter"], df["volume"])
        axes[1].set_title("Solid volume")
        axes[1].set_ylabel("V")
    axes[1].set_xlabel("Outer iteration")
    axes[1].grid(True)

    fig.tight_layout()

    if save_path:
        if "dpi" not in kwargs:
            kwargs["dpi"] = 150
        if "bbox_inches" not in kwargs:
            kwargs["bbox_inches"] = "tight"
        fig.savefig(save_path, **kwargs)
        logger.info(f"History plot saved to {save_path}")

    if show:
        plt.show()

    return fig


def read_vtk_point_data(path: str) -> Dict[str, np.ndarray]:
    """Read a VTK file written by ``export_vtk`` back into arrays.

    Parsing is delegated to meshio.

    Args:
        path (str): The file path.

    Returns:
        Dict[str, np.ndarray]: ``points`` (N, 3), ``cells`` (M, 3) and one entry
        per point data array (scalars as (N,), vectors as (N, 3)).

    Raises:
        ImportError: If meshio is not installed.
    """
    try:
        import meshio
    except ImportError:
        raise ImportError("The meshio package is required to read VTK files")

    if not os.path.exists(path):
        raise FileNotFoundError(f"VTK file not found: {path}")

    mesh = meshio.read(path)
    n_points = len(mesh.points)
    data: Dict[str, np.ndarray] = {
        "points": np.asarray(mesh.points, dtype=float),
        "cells": np.asarray(mesh.cells_dict["triangle"], dtype=np.int64),
    }
    for name, values in mesh.point_data.items():
        values = np.asarray(values, dtype=float)
        data[name] = values.reshape(n_points) if values.size == n_points else values
    return data
