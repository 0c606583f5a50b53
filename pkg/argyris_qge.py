#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
argyris-qge: C1 Argyris Finite Elements for Streamfunction Models
=================================================================

A conforming finite element solver for fourth-order streamfunction equations
(biharmonic, linear Stommel, linear Stommel-Munk and the stationary one-layer
quasi-geostrophic equations) on structured triangulations of rectangles, built
on the 21-DOF quintic Argyris element.

Quick Start:
-----------
    >>> from argyris_qge import ProblemSpec, ModelKind, run_study
    >>>
    >>> # Biharmonic problem with the manufactured solution (x(x-1)y(y-1))^2
    >>> problem = ProblemSpec(ModelKind.BIHARMONIC, solution_id="biharmonic-square")
    >>> table = run_study(problem, ["1/2", "1/4", "1/8", "1/16"])
    >>> for record in table.records:
    ...     print(record.h, record.dofs, record.e0, record.rate0)

Key Features:
------------
    ✓ Quintic Argyris element with globally oriented normal-derivative DOFs
    ✓ Structured right-isosceles meshes with row-major vertex numbering
    ✓ Vectorised sparse assembly (scipy.sparse) of Δ-Δ, ∇-∇, transport and
      trilinear QGE forms, plus the Newton Jacobian of the trilinear term
    ✓ Clamped, Dirichlet-value and lifted Dirichlet boundary handling
    ✓ Newton solver with residual / increment / iteration stopping criteria
    ✓ Manufactured solutions with symbolic (sympy) derivatives and forcings
    ✓ L2 / H1 / H2 error tables with observed convergence rates

Models (nondimensional):
-----------------------
    biharmonic:    Δ²ψ = f
    stommel:       ε_S Δψ + ψ_x = f
    stommel-munk:  ε_S Δψ − ε_M Δ²ψ + ψ_x = f
    qge:           Re⁻¹ Δ²ψ + J(ψ, Δψ) − Ro⁻¹ ψ_x = Ro⁻¹ F

CLI Usage:
---------
    $ argyris-qge study --model biharmonic --solution biharmonic-square --h 1/2,1/4,1/8
    $ argyris-qge study --preset test5 -o test5.csv
    $ argyris-qge solve --preset test5 --h 1/8 -o psi.csv --newton-log newton.csv
    $ argyris-qge export-matrix --model biharmonic --solution biharmonic-square --h 1/4 \\
          --dump-matrix a0.mtx
    $ argyris-qge sample --preset test3 --h 1/8 --sample-grid 41 -o grid.csv
    $ argyris-qge --help

References:
----------
    [1] Argyris, Fried, Scharpf (1968): The TUBA family of plate elements
    [2] Domínguez, Sayas (2008): Algorithm 884, a simple Matlab implementation
        of the Argyris element
    [3] Full docs: README.md, DESIGN.md, docs/ folder
"""

from __future__ import annotations

__version__ = "1.0.0"
__author__ = "argyris-qge contributors"
__license__ = "GPL-3.0-or-later"
__copyright__ = "Copyright (C) 2026 argyris-qge contributors"

# Public API exports
__all__ = [
    # Mesh
    'Mesh',
    'EdgeOrientation',
    'VertexTag',
    'EdgeClass',
    'EdgeTag',
    'build_structured_mesh',
    'edge_normal',
    'classify_boundary',
    'locate_points',
    'write_mesh_csv',
    'BoundaryTags',

    # Quadrature
    'QuadratureRule',
    'triangle_rule',
    'integrate',

    # Argyris element
    'ReferenceBasis',
    'ArgyrisTransform',
    'FemField',
    'Differentiable',
    'build_reference_basis',
    'build_transform',
    'eval_basis',
    'interpolate',
    'eval_field',
    'ElementClasses',
    'ElementTables',
    'element_classes',
    'element_tables',

    # Assembly
    'BoundaryMode',
    'BoundarySpec',
    'DofMap',
    'ReducedSystem',
    'build_dofmap',
    'assemble_biharmonic',
    'assemble_laplace',
    'assemble_transport',
    'assemble_load',
    'trilinear_residual',
    'trilinear_jacobian',
    'apply_constraints',
    'write_matrix_market',

    # Solver
    'NewtonReport',
    'solve_linear',
    'newton_solve',
    'write_newton_log',
    'StopReason',

    # Problems
    'ModelKind',
    'ProblemSpec',
    'ManufacturedSolution',
    'SymbolicField',
    'PotentialVorticityField',
    'SolveResult',
    'PRESETS',
    'Preset',
    'SOLUTION_CATALOG',
    'SYM_X',
    'SYM_Y',
    'forcing_expression',
    'system_matrix',
    'rossby_number',
    'reynolds_number',
    'stommel_number',
    'munk_scale',
    'jacobian_operator',
    'manufactured',
    'problem_from_preset',
    'potential_vorticity',
    'velocity',
    'solve_problem',

    # Analysis
    'ErrorRecord',
    'ErrorTable',
    'SparsityReport',
    'error_norms',
    'convergence_rate',
    'run_study',
    'sparsity_report',
    'sample_grid',
    'dof_blocks',
    'write_sample_csv',
    'write_coefficients_csv',

    # CLI
    'RunConfig',
    'create_parser',
    'cmd_study',
    'cmd_solve',
    'cmd_export_matrix',
    'cmd_sample',
    'main',

    # Exceptions
    'ArgyrisError',
    'ValidationError',
    'GeometryError',
    'ElementError',
    'SolverError',
    'SingularMatrixError',
    'ConvergenceError',
    'FileIOError',

    # Configuration
    'Config',
    'Colors',
    'set_verbosity',

    # Validation functions
    'validate_positive',
    'validate_leg',
    'validate_degree',
    'validate_point_order',
    'parse_fraction',

    # Performance profiling
    'Profiler',
    'profile_operation',
    'format_time',
]

import os
import csv
import sys
import math
import time
import logging
import argparse
import functools
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum, IntEnum
from typing import (
    Any, Callable, ClassVar, Dict, Iterable, List, Optional, Protocol, Sequence,
    Tuple, Union,
)

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi, roots_legendre
import sympy

LegLike = Union[str, float, int, Fraction]


def _default_max_workers() -> int:
    raw = os.environ.get("ARGYRIS_QG_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ============================================================================
# GLOBAL CONFIGURATION - Numerical tolerances and behavior tuning
# ============================================================================

class Config:
    """
    Global configuration for argyris-qge behavior.

    Attributes:
        VERBOSE_LOGGING (bool): Log INFO messages (mesh sizes, solves, Newton steps)
        USE_COLORS (bool): Enable colored terminal output (auto-detected)
        ENABLE_PROFILING (bool): Time assembly and solves with Profiler
        DEFAULT_QUAD_DEGREE (int): Exactness degree of the assembly quadrature
        ASSEMBLY_CHUNK (int): Triangles per vectorised assembly batch
        GEOMETRY_TOL (float): Relative tolerance for leg divisibility and point location
        DEGENERATE_DET (float): Smallest accepted |det B| of an affine map
        SOLVE_RTOL (float): Relative residual contract of the linear solver
        NEWTON_TOL_RES (float): Newton residual stopping tolerance
        NEWTON_TOL_INC (float): Newton increment stopping tolerance
        NEWTON_MAX_ITER (int): Newton iteration cap
        NEWTON_DIVERGENCE_STREAK (int): Consecutive residual increases flagged as divergence
        FLOAT_FORMAT (str): printf format for every float written to CSV
        MAX_WORKERS (int): Worker cap for concurrent study rows (ARGYRIS_QG_THREADS)

    Example:
        >>> Config.VERBOSE_LOGGING = True
        >>> Config.DEFAULT_QUAD_DEGREE = 14
        >>> Config.reset_defaults()
    """
    # UI settings
    VERBOSE_LOGGING: ClassVar[bool] = False
    USE_COLORS: ClassVar[bool] = True
    ENABLE_PROFILING: ClassVar[bool] = False

    # Discretisation
    DEFAULT_QUAD_DEGREE: ClassVar[int] = 12
    ASSEMBLY_CHUNK: ClassVar[int] = 1024
    GEOMETRY_TOL: ClassVar[float] = 1e-12
    DEGENERATE_DET: ClassVar[float] = 1e-14

    # Solvers
    SOLVE_RTOL: ClassVar[float] = 1e-10
    NEWTON_TOL_RES: ClassVar[float] = 1e-8
    NEWTON_TOL_INC: ClassVar[float] = 1e-8
    NEWTON_MAX_ITER: ClassVar[int] = 10
    NEWTON_DIVERGENCE_STREAK: ClassVar[int] = 3

    # Output
    FLOAT_FORMAT: ClassVar[str] = "%.6e"
    MAX_WORKERS: ClassVar[int] = _default_max_workers()

    @classmethod
    def reset_defaults(cls) -> None:
        """Reset all configuration to default values."""
        defaults: Dict[str, object] = {
            "VERBOSE_LOGGING": False,
            "USE_COLORS": True,
            "ENABLE_PROFILING": False,
            "DEFAULT_QUAD_DEGREE": 12,
            "ASSEMBLY_CHUNK": 1024,
            "GEOMETRY_TOL": 1e-12,
            "DEGENERATE_DET": 1e-14,
            "SOLVE_RTOL": 1e-10,
            "NEWTON_TOL_RES": 1e-8,
            "NEWTON_TOL_INC": 1e-8,
            "NEWTON_MAX_ITER": 10,
            "NEWTON_DIVERGENCE_STREAK": 3,
            "FLOAT_FORMAT": "%.6e",
            "MAX_WORKERS": _default_max_workers(),
        }
        for name, value in defaults.items():
            setattr(cls, name, value)


# ============================================================================
# LOGGING CONFIGURATION
# ============================================================================

_default_log_level = logging.INFO if Config.VERBOSE_LOGGING else logging.WARNING
logging.basicConfig(
    level=_default_log_level,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('argyris-qge')
logger.setLevel(_default_log_level)


def set_verbosity(verbose: bool) -> None:
    """Switch the package logger between INFO and WARNING."""
    Config.VERBOSE_LOGGING = verbose
    logger.setLevel(logging.INFO if verbose else logging.WARNING)


# ============================================================================
# TERMINAL COLORS - CLI status lines (auto-detects TTY)
# ============================================================================

class Colors:
    """
    ANSI color helpers for terminal output.

    Disabled on non-TTY streams or when Config.USE_COLORS = False, so piped
    output and CSV written to stdout stay clean.

    Example:
        >>> print(Colors.success("Study finished"))
        [OK] Study finished
    """
    _RESET = '\033[0m'
    _BOLD = '\033[1m'
    _RED = '\033[91m'
    _GREEN = '\033[92m'
    _YELLOW = '\033[93m'
    _BLUE = '\033[94m'

    @classmethod
    def _is_enabled(cls) -> bool:
        if not Config.USE_COLORS:
            return False
        return hasattr(sys.stderr, 'isatty') and sys.stderr.isatty()

    @classmethod
    def success(cls, text: str) -> str:
        """Format text as success (green with checkmark)."""
        if cls._is_enabled():
            return f"{cls._GREEN}✓{cls._RESET} {text}"
        return f"[OK] {text}"

    @classmethod
    def error(cls, text: str) -> str:
        """Format text as error (red with X)."""
        if cls._is_enabled():
            return f"{cls._RED}✗{cls._RESET} {text}"
        return f"[ERROR] {text}"

    @classmethod
    def warning(cls, text: str) -> str:
        """Format text as warning (yellow with !)."""
        if cls._is_enabled():
            return f"{cls._YELLOW}⚠{cls._RESET} {text}"
        return f"[WARN] {text}"

    @classmethod
    def info(cls, text: str) -> str:
        """Format text as info (blue with i)."""
        if cls._is_enabled():
            return f"{cls._BLUE}ℹ{cls._RESET} {text}"
        return f"[INFO] {text}"

    @classmethod
    def bold(cls, text: str) -> str:
        if cls._is_enabled():
            return f"{cls._BOLD}{text}{cls._RESET}"
        return text


# ============================================================================
# CUSTOM EXCEPTIONS - Hierarchical exception system
# ============================================================================

class ArgyrisError(Exception):
    """
    Base exception for all argyris-qge errors.

    Attributes:
        message: Human-readable error description
        code: Process exit code the CLI reports for this error

    Example:
        >>> raise ArgyrisError("Operation failed", code=1)
    """
    def __init__(self, message: str, code: int = 1) -> None:
        super().__init__(message)
        self.message = message
        self.code = code

    def __str__(self) -> str:
        return self.message


class ValidationError(ArgyrisError):
    """
    Raised when input validation fails.

    Invalid leg lengths, unknown manufactured solutions, missing or
    out-of-range parameters and malformed config files all end here.
    """
    def __init__(self, message: str) -> None:
        super().__init__(message, code=2)


class GeometryError(ArgyrisError):
    """Raised for degenerate triangles and points outside a triangle or the domain."""
    def __init__(self, message: str) -> None:
        super().__init__(message, code=2)


class ElementError(ArgyrisError):
    """
    Raised when the Argyris functional matrix cannot be inverted.

    This signals a broken DOF definition, never bad user input.
    """
    def __init__(self, message: str) -> None:
        super().__init__(message, code=1)


class SolverError(ArgyrisError):
    """Raised when a linear solve fails or violates its residual contract."""
    def __init__(self, message: str, code: int = 1) -> None:
        super().__init__(message, code)


class SingularMatrixError(SolverError):
    """
    Raised when the sparse LU factorization hits a zero pivot.

    Attributes:
        pivot: Index of the first empty row/column found in the matrix, or None
            when the singularity is numerical rather than structural
    """
    def __init__(self, message: str, pivot: Optional[int] = None) -> None:
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(ArgyrisError):
    """Raised when a Newton iteration that must converge does not."""
    def __init__(self, message: str) -> None:
        super().__init__(message, code=1)


class FileIOError(ArgyrisError):
    """Raised when an output artifact cannot be written."""
    def __init__(self, message: str) -> None:
        super().__init__(message, code=1)


# ============================================================================
# VALIDATION FUNCTIONS - Input checking with descriptive errors
# ============================================================================

def validate_positive(name: str, value: Optional[float]) -> float:
    """
    Validate that a model parameter is present and strictly positive.

    Args:
        name: Parameter name used in the error message
        value: Value to check

    Returns:
        The value as float

    Raises:
        ValidationError: If value is None, not finite, or <= 0

    Example:
        >>> validate_positive("Re", 1.667)
        1.667
    """
    if value is None:
        raise ValidationError(f"{name} is required")
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return value


def parse_fraction(text: LegLike) -> Fraction:
    """
    Parse a mesh leg such as "1/32", "0.125" or 0.25 into a Fraction.

    Raises:
        ValidationError: If the text is not a positive rational number
    """
    if isinstance(text, Fraction):
        value = text
    else:
        try:
            value = Fraction(str(text).strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValidationError(f"invalid mesh leg {text!r}: {exc}") from None
    if value <= 0:
        raise ValidationError(f"mesh leg must be positive, got {text!r}")
    return value


def validate_leg(length: float, h: LegLike) -> int:
    """
    Validate that a side of length `length` splits into whole legs of size h.

    Returns:
        The number of cells along that side

    Raises:
        ValidationError: If length/h is not a positive integer to 1e-12 relative

    Example:
        >>> validate_leg(3.0, "1/2")
        6
    """
    leg = float(parse_fraction(h))
    length = validate_positive("domain length", length)
    ratio = length / leg
    cells = int(round(ratio))
    if cells < 1 or abs(ratio - cells) > Config.GEOMETRY_TOL * max(1.0, ratio):
        raise ValidationError(
            f"leg h={h} does not divide side length {length} (ratio {ratio!r})"
        )
    return cells


def validate_degree(min_degree: int) -> int:
    """Validate a requested quadrature exactness degree (1..20)."""
    if isinstance(min_degree, bool) or int(min_degree) != min_degree:
        raise ValidationError(f"quadrature degree must be an integer, got {min_degree!r}")
    min_degree = int(min_degree)
    if not 1 <= min_degree <= 20:
        raise ValidationError(f"unsupported quadrature degree {min_degree} (valid: 1..20)")
    return min_degree


def validate_point_order(order: int) -> int:
    """Validate a derivative order for point evaluation (0, 1 or 2)."""
    if isinstance(order, bool) or order not in (0, 1, 2):
        raise ValidationError(f"derivative order must be 0, 1 or 2, got {order!r}")
    return int(order)


# ============================================================================
# UTILITY FUNCTIONS - Formatting and profiling
# ============================================================================

def format_time(seconds: float) -> str:
    """
    Render a wall-clock duration for study and benchmark reports.

    Sub-second timings keep millisecond resolution; longer runs (fine-mesh
    studies take minutes to hours) are split into h/m/s.

    Example:
        >>> format_time(0.0042), format_time(3.5), format_time(3725)
        ('4.2ms', '3.50s', '1h 02m 05s')
    """
    if seconds < 1.0:
        return f"{seconds * 1e3:.1f}ms"
    if seconds < 60.0:
        return f"{seconds:.2f}s"
    minutes, secs = divmod(int(round(seconds)), 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours}h {minutes:02d}m {secs:02d}s"
    return f"{minutes}m {secs:02d}s"


def format_float(value: Optional[float]) -> str:
    """Render a float with Config.FLOAT_FORMAT; None and NaN become empty cells."""
    if value is None or not math.isfinite(value):
        return ""
    return Config.FLOAT_FORMAT % (value + 0.0)


class Profiler:
    """
    Simple profiler for measuring performance.

    Example:
        >>> with Profiler("assemble_biharmonic") as p:
        ...     matrix = assemble_biharmonic(mesh, dofmap)
        >>> print(p.elapsed)
    """
    def __init__(self, name: str = ""):
        self.name = name
        self.elapsed = 0.0
        self._start = 0.0

    def __enter__(self) -> 'Profiler':
        if Config.ENABLE_PROFILING:
            self._start = time.perf_counter()
        return self

    def __exit__(self, *args: Any) -> None:
        if Config.ENABLE_PROFILING:
            self.elapsed = time.perf_counter() - self._start
            logger.info("[PROFILE] %s: %s", self.name, format_time(self.elapsed))


def profile_operation(func: Callable[..., Any]) -> Callable[..., Any]:
    """
    Decorator for profiling functions.

    Example:
        >>> @profile_operation
        ... def assemble():
        ...     pass
    """
    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        with Profiler(func.__name__):
            result: Any = func(*args, **kwargs)
        return result
    return wrapper


# ============================================================================
# MESH - Structured right-isosceles triangulations of rectangles
#
# Vertices are numbered row-major (x fastest). Each cell (i, j) is split by
# its lower-left to upper-right diagonal into a lower triangle (v00, v10, v11)
# and an upper triangle (v00, v11, v01). Local edge k is opposite local
# vertex k. Edges are numbered horizontal, then vertical, then oblique.
# ============================================================================

class VertexTag(IntEnum):
    """Boundary classification of a mesh vertex."""
    INTERIOR = 0
    EDGE_X0 = 1
    EDGE_X1 = 2
    EDGE_Y0 = 3
    EDGE_Y1 = 4
    CORNER = 5


class EdgeClass(IntEnum):
    """Direction class of a mesh edge."""
    HORIZONTAL = 0
    VERTICAL = 1
    OBLIQUE = 2


class EdgeTag(IntEnum):
    """Boundary classification of a mesh edge."""
    INTERIOR = 0
    BOUNDARY = 1


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class EdgeOrientation:
    """
    Mesh-global orientation of every edge.

    The tangent runs from the lower-indexed endpoint to the higher-indexed one;
    the normal is the tangent rotated by −90° (clockwise).

    Attributes:
        tangents: (E, 2) unit tangents
        normals: (E, 2) unit normals
    """
    tangents: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_edges(cls, vertices: np.ndarray, edges: np.ndarray) -> 'EdgeOrientation':
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        tangents = vertices[hi] - vertices[lo]
        tangents = tangents / np.linalg.norm(tangents, axis=1)[:, None]
        normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])
        return cls(_readonly(tangents), _readonly(normals))


@dataclass(frozen=True)
class BoundaryTags:
    """Per-vertex VertexTag values and per-edge EdgeTag values."""
    vertex_tags: np.ndarray
    edge_tags: np.ndarray


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Immutable structured triangulation of [0, lx] × [0, ly].

    Attributes:
        lx, ly: Domain extents
        h: Leg length as an exact fraction
        nx, ny: Cells along x and y
        vertices: (V, 2) coordinates, row-major
        triangles: (T, 3) counterclockwise vertex indices
        triangle_edges: (T, 3) edge index opposite each local vertex
        edges: (E, 2) endpoint indices, lower index first
        edge_class: (E,) EdgeClass values
        edge_midpoints: (E, 2) midpoint coordinates
        edge_triangles: (E, 2) adjacent triangles, -1 for the missing side of boundary edges
        vertex_tags: (V,) VertexTag values
        edge_tags: (E,) EdgeTag values
        orientation: Global tangents and normals

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/2")
        >>> mesh.n_vertices, mesh.n_triangles, mesh.n_edges
        (9, 8, 16)
    """
    lx: float
    ly: float
    h: Fraction
    nx: int
    ny: int
    vertices: np.ndarray
    triangles: np.ndarray
    triangle_edges: np.ndarray
    edges: np.ndarray
    edge_class: np.ndarray
    edge_midpoints: np.ndarray
    edge_triangles: np.ndarray
    vertex_tags: np.ndarray
    edge_tags: np.ndarray
    orientation: EdgeOrientation

    @property
    def leg(self) -> float:
        return self.lx / self.nx

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def class_counts(self) -> Tuple[int, int, int]:
        """Number of horizontal, vertical and oblique edges."""
        return (self.nx * (self.ny + 1), (self.nx + 1) * self.ny, self.nx * self.ny)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _boundary_tags(vertices: np.ndarray, edges: np.ndarray, lx: float, ly: float) -> BoundaryTags:
    tol = Config.GEOMETRY_TOL * max(lx, ly)
    x, y = vertices[:, 0], vertices[:, 1]
    on_x0 = np.abs(x) <= tol
    on_x1 = np.abs(x - lx) <= tol
    on_y0 = np.abs(y) <= tol
    on_y1 = np.abs(y - ly) <= tol

    vtags = np.full(vertices.shape[0], VertexTag.INTERIOR, dtype=np.int8)
    vtags[on_y0] = VertexTag.EDGE_Y0
    vtags[on_y1] = VertexTag.EDGE_Y1
    vtags[on_x0] = VertexTag.EDGE_X0
    vtags[on_x1] = VertexTag.EDGE_X1
    vtags[(on_x0 | on_x1) & (on_y0 | on_y1)] = VertexTag.CORNER

    a, b = edges[:, 0], edges[:, 1]
    same_line = ((on_x0[a] & on_x0[b]) | (on_x1[a] & on_x1[b])
                 | (on_y0[a] & on_y0[b]) | (on_y1[a] & on_y1[b]))
    etags = np.where(same_line, EdgeTag.BOUNDARY, EdgeTag.INTERIOR).astype(np.int8)
    return BoundaryTags(_readonly(vtags), _readonly(etags))


def _edge_triangles(triangle_edges: np.ndarray, n_edges: int) -> np.ndarray:
    flat = triangle_edges.ravel()
    owners = np.repeat(np.arange(triangle_edges.shape[0]), 3)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_edges)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    result = np.full((n_edges, 2), -1, dtype=np.int64)
    result[:, 0] = owners[order[starts]]
    shared = counts == 2
    result[shared, 1] = owners[order[starts[shared] + 1]]
    return result


def build_structured_mesh(lx: float, ly: float, h: LegLike) -> Mesh:
    """
    Build the structured right-isosceles triangulation of [0, lx] × [0, ly].

    Args:
        lx: Domain length along x
        ly: Domain length along y
        h: Leg length, e.g. "1/32", Fraction(1, 32) or 0.25

    Returns:
        Mesh with (lx/h+1)(ly/h+1) vertices and 2(lx/h)(ly/h) triangles

    Raises:
        ValidationError: If h does not divide both sides

    Example:
        >>> mesh = build_structured_mesh(3.0, 1.0, "1/2")
        >>> mesh.n_vertices, mesh.n_triangles, mesh.n_edges
        (21, 24, 44)
    """
    leg = parse_fraction(h)
    nx = validate_leg(lx, leg)
    ny = validate_leg(ly, leg)
    lx, ly = float(lx), float(ly)

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return j * (nx + 1) + i

    # Edges: horizontal (i, j) -> j*nx + i, vertical (i, j) -> j*(nx+1) + i, oblique per cell.
    hj, hi = np.divmod(np.arange(nx * (ny + 1)), nx)
    vj, vi = np.divmod(np.arange((nx + 1) * ny), nx + 1)
    oj, oi = np.divmod(np.arange(nx * ny), nx)
    n_h, n_v = nx * (ny + 1), (nx + 1) * ny
    edges = np.vstack([
        np.column_stack([vid(hi, hj), vid(hi + 1, hj)]),
        np.column_stack([vid(vi, vj), vid(vi, vj + 1)]),
        np.column_stack([vid(oi, oj), vid(oi + 1, oj + 1)]),
    ]).astype(np.int64)
    edge_class = np.concatenate([
        np.full(n_h, EdgeClass.HORIZONTAL, dtype=np.int8),
        np.full(n_v, EdgeClass.VERTICAL, dtype=np.int8),
        np.full(nx * ny, EdgeClass.OBLIQUE, dtype=np.int8),
    ])

    def h_edge(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return j * nx + i

    def v_edge(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return n_h + j * (nx + 1) + i

    def o_edge(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return n_h + n_v + j * nx + i

    cj, ci = oj, oi
    v00, v10 = vid(ci, cj), vid(ci + 1, cj)
    v11, v01 = vid(ci + 1, cj + 1), vid(ci, cj + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    lower_edges = np.column_stack([v_edge(ci + 1, cj), o_edge(ci, cj), h_edge(ci, cj)])
    upper_edges = np.column_stack([h_edge(ci, cj + 1), v_edge(ci, cj), o_edge(ci, cj)])

    n_cells = nx * ny
    triangles = np.empty((2 * n_cells, 3), dtype=np.int64)
    triangle_edges = np.empty((2 * n_cells, 3), dtype=np.int64)
    triangles[0::2], triangles[1::2] = lower, upper
    triangle_edges[0::2], triangle_edges[1::2] = lower_edges, upper_edges

    tags = _boundary_tags(vertices, edges, lx, ly)
    mesh = Mesh(
        lx=lx, ly=ly, h=leg, nx=nx, ny=ny,
        vertices=_readonly(vertices),
        triangles=_readonly(triangles),
        triangle_edges=_readonly(triangle_edges),
        edges=_readonly(edges),
        edge_class=_readonly(edge_class),
        edge_midpoints=_readonly(0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])),
        edge_triangles=_readonly(_edge_triangles(triangle_edges, edges.shape[0])),
        vertex_tags=tags.vertex_tags,
        edge_tags=tags.edge_tags,
        orientation=EdgeOrientation.from_edges(vertices, edges),
    )
    logger.info(
        "mesh %gx%g h=%s: %d vertices, %d triangles, %d edges",
        lx, ly, leg, mesh.n_vertices, mesh.n_triangles, mesh.n_edges,
    )
    return mesh


def edge_normal(mesh: Mesh, edge: int) -> np.ndarray:
    """
    Return the global unit normal of an edge.

    Raises:
        ValidationError: If the edge index is out of range

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/2")
        >>> edge_normal(mesh, 0)
        array([ 0., -1.])
    """
    if not 0 <= int(edge) < mesh.n_edges:
        raise ValidationError(f"edge index {edge} out of range [0, {mesh.n_edges})")
    return mesh.orientation.normals[int(edge)].copy()


def classify_boundary(mesh: Mesh) -> BoundaryTags:
    """Recompute vertex and edge boundary tags from the mesh geometry."""
    return _boundary_tags(mesh.vertices, mesh.edges, mesh.lx, mesh.ly)


def locate_points(mesh: Mesh, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Find the triangle containing each point by cell-index arithmetic.

    Points on shared edges resolve to the lower triangle of the lower-left
    cell; the domain boundary is included with tolerance Config.GEOMETRY_TOL.

    Raises:
        GeometryError: If any point lies outside the domain
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tol = Config.GEOMETRY_TOL * max(mesh.lx, mesh.ly)
    outside = (x < -tol) | (x > mesh.lx + tol) | (y < -tol) | (y > mesh.ly + tol)
    if np.any(outside):
        k = int(np.flatnonzero(outside.ravel())[0])
        raise GeometryError(
            f"point ({x.ravel()[k]}, {y.ravel()[k]}) outside domain "
            f"[0, {mesh.lx}] x [0, {mesh.ly}]"
        )
    leg = mesh.leg
    sx, sy = x / leg, y / leg
    i = np.clip(np.floor(sx), 0, mesh.nx - 1).astype(np.int64)
    j = np.clip(np.floor(sy), 0, mesh.ny - 1).astype(np.int64)
    upper = (sy - j) > (sx - i)
    return 2 * (j * mesh.nx + i) + upper.astype(np.int64)


def write_mesh_csv(mesh: Mesh, directory: str) -> List[str]:
    """
    Dump vertices.csv, triangles.csv and edges.csv into `directory`.

    Returns:
        Paths of the written files

    Raises:
        FileIOError: If the directory cannot be created or written
    """
    try:
        os.makedirs(directory, exist_ok=True)
        paths = [os.path.join(directory, name)
                 for name in ("vertices.csv", "triangles.csv", "edges.csv")]
        with open(paths[0], "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["id", "x", "y"])
            for k, (px, py) in enumerate(mesh.vertices):
                writer.writerow([k, format_float(px), format_float(py)])
        with open(paths[1], "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["id", "v0", "v1", "v2"])
            for k, tri in enumerate(mesh.triangles):
                writer.writerow([k, *(int(v) for v in tri)])
        with open(paths[2], "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["id", "v0", "v1", "class", "tag"])
            for k, (a, b) in enumerate(mesh.edges):
                writer.writerow([
                    k, int(a), int(b),
                    EdgeClass(mesh.edge_class[k]).name.lower(),
                    EdgeTag(mesh.edge_tags[k]).name.lower(),
                ])
    except OSError as exc:
        raise FileIOError(f"cannot write mesh CSV to {directory}: {exc}") from exc
    return paths


# ============================================================================
# QUADRATURE - Collapsed Gauss rules on the reference triangle
# ============================================================================

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """
    Quadrature rule on the reference triangle (0,0), (1,0), (0,1).

    Attributes:
        points: (Q, 3) barycentric coordinates
        weights: (Q,) weights summing to 1/2
        degree: Declared exactness degree
    """
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def xy(self) -> np.ndarray:
        """Reference Cartesian coordinates (x̂, ŷ) = (λ1, λ2)."""
        return self.points[:, 1:3]

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


@functools.lru_cache(maxsize=None)
def triangle_rule(min_degree: int) -> QuadratureRule:
    """
    Return a rule exact for every polynomial of total degree ≤ min_degree.

    The rule is a conical product: Gauss-Jacobi (α=1, β=0) nodes in the
    collapsed direction times Gauss-Legendre nodes along each ray, which is
    exact through degree 2n−1 with n = ceil((min_degree+1)/2) points per
    direction.

    Raises:
        ValidationError: If min_degree is outside 1..20

    Example:
        >>> rule = triangle_rule(12)
        >>> rule.degree, rule.size
        (13, 49)
    """
    min_degree = validate_degree(min_degree)
    n = (min_degree + 2) // 2
    t, wt = roots_jacobi(n, 1.0, 0.0)
    s, ws = roots_legendre(n)
    u = 0.5 * (1.0 + t)
    v = 0.5 * (1.0 + s)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    weights = np.outer(0.25 * wt, 0.5 * ws).ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(_readonly(points), _readonly(weights), 2 * n - 1)


def integrate(rule: QuadratureRule, vertices: np.ndarray,
              f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """
    Integrate f over the triangle with the given (3, 2) vertices.

    Example:
        >>> tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        >>> round(integrate(triangle_rule(1), tri, lambda x, y: x), 12)
        0.166666666667
    """
    vertices = np.asarray(vertices, dtype=float)
    jac = np.column_stack([vertices[1] - vertices[0], vertices[2] - vertices[0]])
    det = abs(float(np.linalg.det(jac)))
    phys = vertices[0] + rule.xy @ jac.T
    values = np.broadcast_to(np.asarray(f(phys[:, 0], phys[:, 1]), dtype=float), (rule.size,))
    return float(det * np.dot(rule.weights, values))


# ============================================================================
# ARGYRIS ELEMENT - Reference basis, affine transformation, interpolation
#
# Nodal functionals per vertex: value, ∂x, ∂y, ∂xx, ∂xy, ∂yy (18 in total),
# then the normal derivative at the midpoint of local edges 0, 1, 2 measured
# along the mesh-global normal. Physical basis functions are combinations
# φ_i = Σ_j M_ij (φ̂_j ∘ F⁻¹) with M = G⁻ᵀ, where G applies the physical
# functionals to the pulled-back reference basis. G contains the tangential
# coupling between mapped reference normals and physical normals.
# ============================================================================

DERIVATIVE_ORDERS: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
D_VAL, D_X, D_Y, D_XX, D_XY, D_YY = range(6)
N_LOCAL_DOFS = 21
_COMPONENTS_FOR_ORDER = {0: 1, 1: 3, 2: 6}

# Monomials x^a y^b with a+b <= 5, ordered by total degree.
EXPONENTS: Tuple[Tuple[int, int], ...] = tuple(
    (a, d - a) for d in range(6) for a in range(d, -1, -1)
)
REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
LOCAL_EDGES: Tuple[Tuple[int, int], ...] = ((1, 2), (0, 2), (0, 1))
REFERENCE_MIDPOINTS = np.array(
    [0.5 * (REFERENCE_VERTICES[a] + REFERENCE_VERTICES[b]) for a, b in LOCAL_EDGES]
)
REFERENCE_NORMALS = np.array([
    [1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)],
    [1.0, 0.0],
    [0.0, -1.0],
])


def _components(order: int) -> int:
    return _COMPONENTS_FOR_ORDER[validate_point_order(order)]


def _falling(a: int, p: int) -> int:
    return math.factorial(a) // math.factorial(a - p) if a >= p else 0


def _monomial_table(x: np.ndarray, y: np.ndarray, order: int) -> np.ndarray:
    """(ncomp, 21, P) derivatives of the P5 monomials at the points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xp = np.stack([x ** k for k in range(6)])
    yp = np.stack([y ** k for k in range(6)])
    ncomp = _components(order)
    table = np.zeros((ncomp, N_LOCAL_DOFS, x.shape[0]))
    for c, (p, q) in enumerate(DERIVATIVE_ORDERS[:ncomp]):
        for m, (a, b) in enumerate(EXPONENTS):
            coef = _falling(a, p) * _falling(b, q)
            if coef:
                table[c, m] = coef * xp[a - p] * yp[b - q]
    return table


def _nodal_functionals(vertex_table: np.ndarray, midpoint_table: np.ndarray,
                       normals: np.ndarray) -> np.ndarray:
    """
    Apply the 21 nodal functionals to n functions.

    Args:
        vertex_table: (6, n, 3) derivatives at the three vertices
        midpoint_table: (>=3, n, 3) derivatives at the three edge midpoints
        normals: (3, 2) normals of local edges 0, 1, 2

    Returns:
        (21, n) matrix, row k = functional k
    """
    rows = [vertex_table[c, :, a] for a in range(3) for c in range(6)]
    rows += [
        normals[e, 0] * midpoint_table[D_X, :, e] + normals[e, 1] * midpoint_table[D_Y, :, e]
        for e in range(3)
    ]
    return np.stack(rows)


def _push_forward(table: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """
    Convert derivatives w.r.t. reference coordinates into physical ones.

    `inverse` is B⁻¹, either (2, 2) or (P, 2, 2) for per-point maps.
    """
    a, b = inverse[..., 0, 0], inverse[..., 0, 1]
    c, d = inverse[..., 1, 0], inverse[..., 1, 1]
    out = np.empty_like(table)
    out[0] = table[0]
    if table.shape[0] >= 3:
        out[1] = a * table[1] + c * table[2]
        out[2] = b * table[1] + d * table[2]
    if table.shape[0] == 6:
        hxx, hxy, hyy = table[3], table[4], table[5]
        out[3] = a * a * hxx + 2.0 * a * c * hxy + c * c * hyy
        out[4] = a * b * hxx + (a * d + b * c) * hxy + c * d * hyy
        out[5] = b * b * hxx + 2.0 * b * d * hxy + d * d * hyy
    return out


@dataclass(frozen=True, eq=False)
class ReferenceBasis:
    """
    Quintic Argyris basis on the reference triangle.

    Attributes:
        coefficients: (21, 21) monomial coefficients, row i = basis function i
        functional_matrix: (21, 21) functionals applied to monomials
        normals: (3, 2) reference edge normals used by the midpoint functionals
    """
    coefficients: np.ndarray
    functional_matrix: np.ndarray
    normals: np.ndarray

    def evaluate(self, x: np.ndarray, y: np.ndarray, order: int = 2) -> np.ndarray:
        """(ncomp, 21, P) derivatives of the reference basis at reference points."""
        return np.einsum("im,cmp->cip", self.coefficients, _monomial_table(x, y, order))

    def delta_matrix(self) -> np.ndarray:
        """Functional k applied to basis function i, indexed [k, i]."""
        return self.functional_matrix @ self.coefficients.T


@functools.lru_cache(maxsize=1)
def build_reference_basis() -> ReferenceBasis:
    """
    Construct the reference Argyris basis by inverting the functional matrix.

    Raises:
        ElementError: If the functional matrix is singular

    Example:
        >>> basis = build_reference_basis()
        >>> float(np.abs(basis.delta_matrix() - np.eye(21)).max()) < 1e-9
        True
    """
    vertex_table = _monomial_table(REFERENCE_VERTICES[:, 0], REFERENCE_VERTICES[:, 1], 2)
    midpoint_table = _monomial_table(REFERENCE_MIDPOINTS[:, 0], REFERENCE_MIDPOINTS[:, 1], 1)
    phi = _nodal_functionals(vertex_table, midpoint_table, REFERENCE_NORMALS)
    try:
        condition = np.linalg.cond(phi)
        if not np.isfinite(condition) or condition > 1e12:
            raise ElementError(f"Argyris functional matrix is singular (cond={condition:.3e})")
        coefficients = np.linalg.inv(phi).T
    except np.linalg.LinAlgError as exc:
        raise ElementError(f"Argyris functional matrix is singular: {exc}") from exc
    return ReferenceBasis(_readonly(coefficients), _readonly(phi), _readonly(REFERENCE_NORMALS.copy()))


@dataclass(frozen=True, eq=False)
class ArgyrisTransform:
    """
    Map between the reference basis and the nodal basis of one physical triangle.

    Attributes:
        vertices: (3, 2) physical vertices
        jacobian: B = [P1−P0, P2−P0], so x = B x̂ + offset
        offset: P0
        inverse: B⁻¹
        det: Signed determinant of B
        normals: (3, 2) global normals of local edges 0, 1, 2
        matrix: (21, 21) M with φ_i = Σ_j M_ij φ̂_j ∘ F⁻¹
    """
    vertices: np.ndarray
    jacobian: np.ndarray
    offset: np.ndarray
    inverse: np.ndarray
    det: float
    normals: np.ndarray
    matrix: np.ndarray

    @classmethod
    def from_vertices(cls, vertices: np.ndarray, normals: np.ndarray,
                      basis: Optional[ReferenceBasis] = None) -> 'ArgyrisTransform':
        """
        Build the transform for a triangle given its vertices and edge normals.

        Raises:
            GeometryError: If |det B| < Config.DEGENERATE_DET
        """
        basis = basis or build_reference_basis()
        vertices = np.asarray(vertices, dtype=float)
        normals = np.asarray(normals, dtype=float)
        jac = np.column_stack([vertices[1] - vertices[0], vertices[2] - vertices[0]])
        det = float(jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0])
        if abs(det) < Config.DEGENERATE_DET:
            raise GeometryError(f"degenerate triangle (|det B| = {abs(det):.3e})")
        inverse = np.linalg.inv(jac)
        at_vertices = _push_forward(
            basis.evaluate(REFERENCE_VERTICES[:, 0], REFERENCE_VERTICES[:, 1], 2), inverse)
        at_midpoints = _push_forward(
            basis.evaluate(REFERENCE_MIDPOINTS[:, 0], REFERENCE_MIDPOINTS[:, 1], 1), inverse)
        gram = _nodal_functionals(at_vertices, at_midpoints, normals)
        matrix = np.linalg.inv(gram).T
        return cls(vertices, jac, vertices[0].copy(), inverse, det, normals, matrix)

    @property
    def area(self) -> float:
        return 0.5 * abs(self.det)

    def to_reference(self, points: np.ndarray) -> np.ndarray:
        """Map (P, 2) physical points to reference coordinates."""
        return (np.asarray(points, dtype=float) - self.offset) @ self.inverse.T

    def basis_tables(self, xh: np.ndarray, yh: np.ndarray, order: int = 2,
                     basis: Optional[ReferenceBasis] = None) -> np.ndarray:
        """(ncomp, 21, P) physical basis derivatives at the given reference points."""
        basis = basis or build_reference_basis()
        pushed = _push_forward(basis.evaluate(xh, yh, order), self.inverse)
        return np.einsum("ij,cjp->cip", self.matrix, pushed)


def build_transform(mesh: Mesh, triangle: int,
                    orientation: Optional[EdgeOrientation] = None) -> ArgyrisTransform:
    """
    Build the Argyris transform of one mesh triangle.

    Raises:
        ValidationError: If the triangle index is out of range
    """
    if not 0 <= int(triangle) < mesh.n_triangles:
        raise ValidationError(f"triangle index {triangle} out of range [0, {mesh.n_triangles})")
    orientation = orientation or mesh.orientation
    t = int(triangle)
    return ArgyrisTransform.from_vertices(
        mesh.vertices[mesh.triangles[t]],
        orientation.normals[mesh.triangle_edges[t]],
    )


def eval_basis(transform: ArgyrisTransform, points: np.ndarray, order: int = 2) -> np.ndarray:
    """
    Evaluate the 21 physical basis functions at points inside the triangle.

    Args:
        transform: Triangle transform
        points: (P, 2) or (2,) physical points
        order: 0 (values), 1 (+ gradient) or 2 (+ Hessian)

    Returns:
        (ncomp, 21, P) array with components value, ∂x, ∂y, ∂xx, ∂xy, ∂yy

    Raises:
        GeometryError: If a point lies outside the triangle
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ref = transform.to_reference(points)
    bary = np.column_stack([1.0 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]])
    tol = Config.GEOMETRY_TOL
    if np.any((bary < -tol) | (bary > 1.0 + tol)):
        raise GeometryError("point outside triangle")
    return transform.basis_tables(ref[:, 0], ref[:, 1], order)


@dataclass(frozen=True, eq=False)
class ElementClasses:
    """
    Congruence classes of mesh triangles.

    Triangles with the same Jacobian and edge normals share one transform;
    a structured mesh has exactly two classes (lower and upper).
    """
    class_of: np.ndarray
    transforms: Tuple[ArgyrisTransform, ...]

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == c)


@functools.lru_cache(maxsize=16)
def element_classes(mesh: Mesh) -> ElementClasses:
    """Group the triangles of a mesh into congruence classes."""
    corners = mesh.vertices[mesh.triangles]
    jac = np.concatenate([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=1)
    normals = mesh.orientation.normals[mesh.triangle_edges].reshape(-1, 6)
    key = np.round(np.concatenate([jac / mesh.leg, normals], axis=1), 10)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    transforms = tuple(build_transform(mesh, int(t)) for t in first)
    return ElementClasses(_readonly(np.asarray(inverse).reshape(-1)), transforms)


@dataclass(frozen=True, eq=False)
class ElementTables:
    """
    Physical basis tables at the quadrature points of every triangle.

    Attributes:
        rule: Quadrature rule
        classes: Congruence classes of the mesh
        tables: (C, 6, 21, Q) basis derivatives per class
        det: (T,) |det B| per triangle
        points: (T, Q, 2) physical quadrature points
    """
    rule: QuadratureRule
    classes: ElementClasses
    tables: np.ndarray
    det: np.ndarray
    points: np.ndarray

    def batches(self) -> Iterable[Tuple[int, np.ndarray]]:
        """Yield (class, triangle indices) in chunks of Config.ASSEMBLY_CHUNK."""
        chunk = max(1, int(Config.ASSEMBLY_CHUNK))
        for c in range(len(self.classes.transforms)):
            members = self.classes.members(c)
            for start in range(0, members.shape[0], chunk):
                yield c, members[start:start + chunk]

    def weights(self, triangles: np.ndarray) -> np.ndarray:
        """(len(triangles), Q) quadrature weights including |det B|."""
        return self.det[triangles, None] * self.rule.weights[None, :]


@functools.lru_cache(maxsize=16)
def element_tables(mesh: Mesh, degree: int) -> ElementTables:
    """Build (and cache) quadrature tables of a mesh for a given exactness degree."""
    rule = triangle_rule(degree)
    classes = element_classes(mesh)
    xh, yh = rule.xy[:, 0], rule.xy[:, 1]
    tables = np.stack([tr.basis_tables(xh, yh, 2) for tr in classes.transforms])
    corners = mesh.vertices[mesh.triangles]
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    points = (corners[:, None, 0, :]
              + xh[None, :, None] * e1[:, None, :]
              + yh[None, :, None] * e2[:, None, :])
    return ElementTables(rule, classes, _readonly(tables), _readonly(det), _readonly(points))


def _tables_for(mesh: Mesh, rule: Optional[QuadratureRule]) -> ElementTables:
    return element_tables(mesh, rule.degree if rule is not None else Config.DEFAULT_QUAD_DEGREE)


class Differentiable(Protocol):
    """A scalar field that can report any partial derivative at numpy points."""

    def partial(self, nx: int, ny: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...


@dataclass(eq=False)
class FemField:
    """
    Finite element function over a DofMap.

    Attributes:
        mesh: Underlying mesh
        dofmap: Global DOF numbering
        coefficients: (6V + E,) coefficient per global DOF
    """
    mesh: Mesh
    dofmap: 'DofMap'
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float).copy()
        if self.coefficients.shape != (self.dofmap.n_dofs,):
            raise ValidationError(
                f"coefficient vector has shape {self.coefficients.shape}, "
                f"expected ({self.dofmap.n_dofs},)"
            )

    @classmethod
    def zeros(cls, mesh: Mesh, dofmap: 'DofMap') -> 'FemField':
        return cls(mesh, dofmap, np.zeros(dofmap.n_dofs))

    def evaluate(self, x: np.ndarray, y: np.ndarray, order: int = 2) -> np.ndarray:
        return eval_field(self, x, y, order)

    def value(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return eval_field(self, x, y, 0)[0]


def _nodal_values(mesh: Mesh, f: Differentiable) -> np.ndarray:
    n_vertex = 6 * mesh.n_vertices
    values = np.empty(n_vertex + mesh.n_edges)
    vx, vy = mesh.vertices[:, 0], mesh.vertices[:, 1]
    for c, (p, q) in enumerate(DERIVATIVE_ORDERS):
        values[c:n_vertex:6] = f.partial(p, q, vx, vy)
    mx, my = mesh.edge_midpoints[:, 0], mesh.edge_midpoints[:, 1]
    normals = mesh.orientation.normals
    values[n_vertex:] = (normals[:, 0] * f.partial(1, 0, mx, my)
                         + normals[:, 1] * f.partial(0, 1, mx, my))
    return values


def interpolate(mesh: Mesh, f: Differentiable, dofmap: Optional['DofMap'] = None) -> FemField:
    """
    Argyris interpolant of f: every DOF is the exact nodal functional of f.

    Args:
        mesh: Mesh to interpolate on
        f: Field providing derivatives through order 2
        dofmap: DOF numbering; an unconstrained map is built when omitted

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/4")
        >>> field = interpolate(mesh, SymbolicField(SYM_X**5))
        >>> round(float(field.value(0.3, 0.2)[0]), 10)
        0.00243
    """
    dofmap = dofmap or build_dofmap(mesh)
    return FemField(mesh, dofmap, _nodal_values(mesh, f))


def eval_field(field: FemField, x: Union[float, np.ndarray], y: Union[float, np.ndarray],
               order: int = 2) -> np.ndarray:
    """
    Evaluate a FemField and its derivatives at arbitrary domain points.

    Returns:
        (ncomp, P) array; ncomp = 1, 3 or 6 for order 0, 1 or 2

    Raises:
        GeometryError: If a point lies outside the domain
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
    x, y = np.broadcast_arrays(x, y)
    mesh = field.mesh
    ncomp = _components(order)
    triangles = locate_points(mesh, x, y)
    classes = element_classes(mesh)
    point_class = classes.class_of[triangles]
    result = np.zeros((ncomp, x.shape[0]))
    l2g = field.dofmap.local_to_global
    for c, transform in enumerate(classes.transforms):
        sel = np.flatnonzero(point_class == c)
        if sel.size == 0:
            continue
        tri = triangles[sel]
        origin = mesh.vertices[mesh.triangles[tri, 0]]
        ref = (np.column_stack([x[sel], y[sel]]) - origin) @ transform.inverse.T
        tables = transform.basis_tables(ref[:, 0], ref[:, 1], order)
        local = field.coefficients[l2g[tri]]
        result[:, sel] = np.einsum("cip,pi->cp", tables, local)
    return result


# ============================================================================
# ASSEMBLY - DOF numbering, sparse operators, loads and boundary constraints
#
# Global numbering: vertex v owns DOFs 6v..6v+5 in the order value, ∂x, ∂y,
# ∂xx, ∂xy, ∂yy; the midpoint normal-derivative DOFs follow, horizontal
# edges first, then vertical, then oblique (6V + edge index).
# ============================================================================

class BoundaryMode(str, Enum):
    """Boundary treatment applied through the DOF map."""
    CLAMPED = "clamped"
    DIRICHLET_VALUE = "dirichlet-value"
    LIFTED_DIRICHLET = "lifted-dirichlet"
    NONE = "none"

    @classmethod
    def parse(cls, value: Union[str, 'BoundaryMode']) -> 'BoundaryMode':
        try:
            return cls(value)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown boundary mode {value!r} (valid: {valid})") from None


# Vertex DOFs fixed per boundary class. x-boundaries are the lines x = 0 and x = Lx.
_CLAMPED_VERTEX_DOFS = {
    "x": (D_VAL, D_X, D_Y, D_XY, D_YY),
    "y": (D_VAL, D_X, D_Y, D_XX, D_XY),
    "corner": (D_VAL, D_X, D_Y, D_XX, D_XY, D_YY),
}
_DIRICHLET_VERTEX_DOFS = {
    "x": (D_VAL, D_Y, D_YY),
    "y": (D_VAL, D_X, D_XX),
    "corner": (D_VAL, D_X, D_Y, D_XX, D_YY),
}


@dataclass(frozen=True)
class BoundarySpec:
    """
    Boundary mode plus, for lifted Dirichlet data, the field providing it.

    Attributes:
        mode: BoundaryMode
        lifting: Field whose nodal functionals give the prescribed values
    """
    mode: BoundaryMode = BoundaryMode.CLAMPED
    lifting: Optional[Differentiable] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", BoundaryMode.parse(self.mode))
        if self.mode is BoundaryMode.LIFTED_DIRICHLET and self.lifting is None:
            raise ValidationError("lifted-dirichlet boundary mode requires a lifting field")

    def vertex_rule(self) -> Optional[Dict[str, Tuple[int, ...]]]:
        if self.mode is BoundaryMode.CLAMPED:
            return _CLAMPED_VERTEX_DOFS
        if self.mode in (BoundaryMode.DIRICHLET_VALUE, BoundaryMode.LIFTED_DIRICHLET):
            return _DIRICHLET_VERTEX_DOFS
        return None

    @property
    def constrains_edges(self) -> bool:
        return self.mode is BoundaryMode.CLAMPED


@dataclass(frozen=True, eq=False)
class DofMap:
    """
    Global DOF numbering of the Argyris space over a mesh.

    Attributes:
        mesh: Mesh the numbering belongs to
        bc: Boundary specification that produced the constraints
        n_dofs: 6V + E
        class_offsets: Start of the vertex, horizontal, vertical and oblique
            blocks, followed by n_dofs
        local_to_global: (T, 21) global DOF of each local DOF
        constrained: (n_dofs,) boolean mask
        prescribed: (n_dofs,) value imposed on constrained DOFs (0 elsewhere)
    """
    mesh: Mesh
    bc: BoundarySpec
    n_dofs: int
    class_offsets: Tuple[int, ...]
    local_to_global: np.ndarray
    constrained: np.ndarray
    prescribed: np.ndarray

    @property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.constrained)

    @property
    def n_free(self) -> int:
        return int(self.n_dofs - np.count_nonzero(self.constrained))

    @property
    def n_constrained(self) -> int:
        return int(np.count_nonzero(self.constrained))

    def vertex_dof(self, vertex: int, component: int) -> int:
        return 6 * int(vertex) + int(component)

    def edge_dof(self, edge: int) -> int:
        return 6 * self.mesh.n_vertices + int(edge)


def build_dofmap(mesh: Mesh, bc: Union[BoundarySpec, BoundaryMode, str, None] = None) -> DofMap:
    """
    Number the DOFs of a mesh and flag the constrained ones.

    Args:
        mesh: Mesh to number
        bc: BoundarySpec, a mode, or None for no constraints

    Returns:
        DofMap with 6V + E DOFs

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/2")
        >>> dofmap = build_dofmap(mesh, BoundaryMode.CLAMPED)
        >>> dofmap.n_dofs, dofmap.n_constrained
        (70, 52)
    """
    if bc is None:
        spec = BoundarySpec(BoundaryMode.NONE)
    elif isinstance(bc, BoundarySpec):
        spec = bc
    else:
        spec = BoundarySpec(BoundaryMode.parse(bc))

    n_vertex = 6 * mesh.n_vertices
    n_dofs = n_vertex + mesh.n_edges
    n_h, n_v, _ = mesh.class_counts
    offsets = (0, n_vertex, n_vertex + n_h, n_vertex + n_h + n_v, n_dofs)

    tri = mesh.triangles
    l2g = np.empty((mesh.n_triangles, N_LOCAL_DOFS), dtype=np.int64)
    for a in range(3):
        for c in range(6):
            l2g[:, 6 * a + c] = 6 * tri[:, a] + c
    l2g[:, 18:] = n_vertex + mesh.triangle_edges

    constrained = np.zeros(n_dofs, dtype=bool)
    rule = spec.vertex_rule()
    if rule is not None:
        tags = mesh.vertex_tags
        groups = {
            "x": np.flatnonzero((tags == VertexTag.EDGE_X0) | (tags == VertexTag.EDGE_X1)),
            "y": np.flatnonzero((tags == VertexTag.EDGE_Y0) | (tags == VertexTag.EDGE_Y1)),
            "corner": np.flatnonzero(tags == VertexTag.CORNER),
        }
        for group, vertices in groups.items():
            for c in rule[group]:
                constrained[6 * vertices + c] = True
        if spec.constrains_edges:
            constrained[n_vertex + np.flatnonzero(mesh.edge_tags == EdgeTag.BOUNDARY)] = True

    prescribed = np.zeros(n_dofs)
    if spec.mode is BoundaryMode.LIFTED_DIRICHLET and spec.lifting is not None:
        prescribed[constrained] = _nodal_values(mesh, spec.lifting)[constrained]

    dofmap = DofMap(
        mesh=mesh, bc=spec, n_dofs=n_dofs, class_offsets=offsets,
        local_to_global=_readonly(l2g),
        constrained=_readonly(constrained),
        prescribed=_readonly(prescribed),
    )
    logger.info(
        "dofmap (%s): %d DOFs, %d constrained, %d free",
        spec.mode.value, n_dofs, dofmap.n_constrained, dofmap.n_free,
    )
    return dofmap


def _scatter_matrix(dofmap: DofMap, rows: List[np.ndarray], cols: List[np.ndarray],
                    values: List[np.ndarray]) -> sp.csr_matrix:
    n = dofmap.n_dofs
    if not values:
        return sp.csr_matrix((n, n))
    coo = sp.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    matrix = coo.tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def _local_indices(dofmap: DofMap, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    l2g = dofmap.local_to_global[triangles]
    rows = np.broadcast_to(l2g[:, :, None], l2g.shape + (N_LOCAL_DOFS,))
    cols = np.broadcast_to(l2g[:, None, :], l2g.shape + (N_LOCAL_DOFS,))
    return rows.ravel(), cols.ravel()


def _assemble_constant(mesh: Mesh, dofmap: DofMap, rule: Optional[QuadratureRule],
                       kernel: Callable[[np.ndarray, np.ndarray], np.ndarray],
                       name: str) -> sp.csr_matrix:
    """Assemble a constant-coefficient bilinear form from per-class reference matrices."""
    tables = _tables_for(mesh, rule)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    values: List[np.ndarray] = []
    for c, triangles in tables.batches():
        local = kernel(tables.tables[c], tables.rule.weights)
        r, k = _local_indices(dofmap, triangles)
        rows.append(r)
        cols.append(k)
        values.append((tables.det[triangles, None, None] * local[None]).ravel())
    matrix = _scatter_matrix(dofmap, rows, cols, values)
    logger.info("%s: n=%d nnz=%d", name, matrix.shape[0], matrix.nnz)
    return matrix


def _laplacian_table(table: np.ndarray) -> np.ndarray:
    return table[D_XX] + table[D_YY]


@profile_operation
def assemble_biharmonic(mesh: Mesh, dofmap: DofMap,
                        rule: Optional[QuadratureRule] = None) -> sp.csr_matrix:
    """
    Assemble A_ij = ∫ Δφ_i Δφ_j.

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/4")
        >>> a0 = assemble_biharmonic(mesh, build_dofmap(mesh))
        >>> a0.shape
        (206, 206)
    """
    def kernel(table: np.ndarray, weights: np.ndarray) -> np.ndarray:
        lap = _laplacian_table(table)
        return (lap * weights) @ lap.T
    return _assemble_constant(mesh, dofmap, rule, kernel, "assemble_biharmonic")


@profile_operation
def assemble_laplace(mesh: Mesh, dofmap: DofMap,
                     rule: Optional[QuadratureRule] = None) -> sp.csr_matrix:
    """Assemble L_ij = ∫ ∇φ_i · ∇φ_j."""
    def kernel(table: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return (table[D_X] * weights) @ table[D_X].T + (table[D_Y] * weights) @ table[D_Y].T
    return _assemble_constant(mesh, dofmap, rule, kernel, "assemble_laplace")


@profile_operation
def assemble_transport(mesh: Mesh, dofmap: DofMap,
                       rule: Optional[QuadratureRule] = None) -> sp.csr_matrix:
    """Assemble B_ij = ∫ ∂xφ_j φ_i (unscaled, unsigned)."""
    def kernel(table: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return (table[D_VAL] * weights) @ table[D_X].T
    return _assemble_constant(mesh, dofmap, rule, kernel, "assemble_transport")


def _evaluate_scalar(f: Union[Callable[[np.ndarray, np.ndarray], np.ndarray], float],
                     x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if callable(f):
        values = f(x, y)
    else:
        values = f
    return np.broadcast_to(np.asarray(values, dtype=float), x.shape)


@profile_operation
def assemble_load(mesh: Mesh, dofmap: DofMap, rule: Optional[QuadratureRule],
                  f: Union[Callable[[np.ndarray, np.ndarray], np.ndarray], float]) -> np.ndarray:
    """
    Assemble ℓ_i = ∫ f φ_i.

    Args:
        f: Vectorised callable f(x, y) or a constant
    """
    tables = _tables_for(mesh, rule)
    load = np.zeros(dofmap.n_dofs)
    for c, triangles in tables.batches():
        pts = tables.points[triangles]
        values = _evaluate_scalar(f, pts[..., 0], pts[..., 1]) * tables.weights(triangles)
        local = values @ tables.tables[c, D_VAL].T
        load += np.bincount(dofmap.local_to_global[triangles].ravel(),
                            weights=local.ravel(), minlength=dofmap.n_dofs)
    return load


def _coefficients(psi: Union[FemField, np.ndarray], dofmap: DofMap) -> np.ndarray:
    values = psi.coefficients if isinstance(psi, FemField) else np.asarray(psi, dtype=float)
    if values.shape != (dofmap.n_dofs,):
        raise ValidationError(
            f"field has {values.shape[0]} coefficients, dofmap has {dofmap.n_dofs}"
        )
    return values


def _field_at_quadrature(tables: ElementTables, c: int, dofmap: DofMap,
                         triangles: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """(6, n, Q) derivatives of a field at the quadrature points of the given triangles."""
    local = coefficients[dofmap.local_to_global[triangles]]
    return np.einsum("ciq,ni->cnq", tables.tables[c], local)


def trilinear_residual(mesh: Mesh, dofmap: DofMap, rule: Optional[QuadratureRule],
                       psi: Union[FemField, np.ndarray]) -> np.ndarray:
    """
    Assemble N(ψ)_i = ∫ Δψ (ψ_y ∂xφ_i − ψ_x ∂yφ_i).

    N is homogeneous of degree 2 and ψᵀN(ψ) = 0 whenever ψ vanishes with its
    normal derivative on the boundary.
    """
    coefficients = _coefficients(psi, dofmap)
    tables = _tables_for(mesh, rule)
    result = np.zeros(dofmap.n_dofs)
    for c, triangles in tables.batches():
        field_q = _field_at_quadrature(tables, c, dofmap, triangles, coefficients)
        g = tables.weights(triangles) * (field_q[D_XX] + field_q[D_YY])
        table = tables.tables[c]
        local = (g * field_q[D_Y]) @ table[D_X].T - (g * field_q[D_X]) @ table[D_Y].T
        result += np.bincount(dofmap.local_to_global[triangles].ravel(),
                              weights=local.ravel(), minlength=dofmap.n_dofs)
    return result


def trilinear_jacobian(mesh: Mesh, dofmap: DofMap, rule: Optional[QuadratureRule],
                       psi: Union[FemField, np.ndarray]) -> sp.csr_matrix:
    """
    Assemble K(ψ)_ij = a1(φ_j, ψ, φ_i) + a1(ψ, φ_j, φ_i), the derivative of N at ψ.

    With a1(ζ, ψ, χ) = ∫ Δζ (ψ_y χ_x − ψ_x χ_y), so N(ψ + δ) − N(ψ) = K(ψ)δ + N(δ).
    """
    coefficients = _coefficients(psi, dofmap)
    tables = _tables_for(mesh, rule)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    values: List[np.ndarray] = []
    for c, triangles in tables.batches():
        field_q = _field_at_quadrature(tables, c, dofmap, triangles, coefficients)
        wdet = tables.weights(triangles)
        table = tables.tables[c]
        phx, phy = table[D_X], table[D_Y]
        lap = _laplacian_table(table)

        # a1(φ_j, ψ, φ_i)
        transport = wdet[:, None, :] * (field_q[D_Y][:, None, :] * phx[None]
                                        - field_q[D_X][:, None, :] * phy[None])
        term1 = transport @ lap.T
        # a1(ψ, φ_j, φ_i)
        g = wdet * (field_q[D_XX] + field_q[D_YY])
        p1 = (g[:, None, :] * phx[None]) @ phy.T
        local = term1 + p1 - np.transpose(p1, (0, 2, 1))

        r, k = _local_indices(dofmap, triangles)
        rows.append(r)
        cols.append(k)
        values.append(local.ravel())
    return _scatter_matrix(dofmap, rows, cols, values)


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """
    Linear system restricted to the free DOFs.

    Attributes:
        matrix: Free-free block (CSR)
        rhs: Right-hand side with the prescribed values moved across
        free: Global indices of the free DOFs
        constrained: Global indices of the constrained DOFs
        prescribed: Full-length vector of prescribed values
    """
    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    constrained: np.ndarray
    prescribed: np.ndarray

    @property
    def size(self) -> int:
        return int(self.free.shape[0])

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        """Reinflate a free-DOF vector into a full coefficient vector."""
        reduced = np.asarray(reduced, dtype=float)
        if reduced.shape != (self.size,):
            raise ValidationError(f"reduced vector has shape {reduced.shape}, expected ({self.size},)")
        full = self.prescribed.copy()
        full[self.free] = reduced
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full, dtype=float)[self.free]


def apply_constraints(matrix: sp.spmatrix, rhs: np.ndarray, dofmap: DofMap) -> ReducedSystem:
    """
    Eliminate constrained rows and columns, moving prescribed values to the rhs.

    Raises:
        ValidationError: If the matrix, rhs and dofmap dimensions disagree
    """
    rhs = np.asarray(rhs, dtype=float)
    if matrix.shape != (dofmap.n_dofs, dofmap.n_dofs) or rhs.shape != (dofmap.n_dofs,):
        raise ValidationError(
            f"dimension mismatch: matrix {matrix.shape}, rhs {rhs.shape}, "
            f"dofmap {dofmap.n_dofs}"
        )
    free = dofmap.free_dofs
    constrained = dofmap.constrained_dofs
    prescribed = np.array(dofmap.prescribed, dtype=float)
    csr = sp.csr_matrix(matrix)
    reduced_rhs = rhs[free]
    if np.any(prescribed != 0.0):
        reduced_rhs = reduced_rhs - (csr @ prescribed)[free]
    reduced = csr[free][:, free].tocsr()
    reduced.sort_indices()
    return ReducedSystem(reduced, reduced_rhs, free, constrained, prescribed)


def write_matrix_market(matrix: sp.spmatrix, path: str, comment: str = "") -> str:
    """
    Write a sparse matrix in MatrixMarket coordinate format.

    Raises:
        FileIOError: If the file cannot be written
    """
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as handle:
            scipy.io.mmwrite(handle, sp.coo_matrix(matrix), comment=comment, symmetry="general")
    except OSError as exc:
        raise FileIOError(f"cannot write MatrixMarket file {path}: {exc}") from exc
    logger.info("wrote %s (%dx%d, nnz=%d)", path, matrix.shape[0], matrix.shape[1], matrix.nnz)
    return path


# ============================================================================
# SOLVER - Sparse direct solves and the Newton iteration
# ============================================================================

class StopReason(str, Enum):
    """Why a Newton iteration stopped."""
    RESIDUAL = "residual"
    INCREMENT = "increment"
    MAX_ITERATIONS = "max-iterations"
    DIVERGED = "diverged"
    SINGULAR = "singular"


@dataclass
class NewtonReport:
    """
    Per-iteration record of a Newton solve.

    Residual and increment norms are Euclidean over the free DOFs; entry k is
    measured after the k-th update.
    """
    residuals: List[float] = field(default_factory=list)
    increments: List[float] = field(default_factory=list)
    converged: bool = False
    reason: StopReason = StopReason.MAX_ITERATIONS
    initial_residual: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else self.initial_residual

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(k + 1, r, d) for k, (r, d) in enumerate(zip(self.residuals, self.increments))]


def _first_empty_pivot(matrix: sp.csc_matrix) -> Optional[int]:
    magnitude = abs(matrix)
    empty_rows = np.flatnonzero(np.asarray(magnitude.sum(axis=1)).ravel() == 0.0)
    empty_cols = np.flatnonzero(np.asarray(magnitude.sum(axis=0)).ravel() == 0.0)
    candidates = [int(v[0]) for v in (empty_rows, empty_cols) if v.size]
    return min(candidates) if candidates else None


def solve_linear(matrix: sp.spmatrix, rhs: np.ndarray, strict: bool = False) -> np.ndarray:
    """
    Solve A x = b with SuperLU after symmetric diagonal equilibration.

    Up to two steps of iterative refinement are applied. A relative residual
    above Config.SOLVE_RTOL is logged, or raised when strict=True.

    Raises:
        ValidationError: If A is not square or b does not match
        SingularMatrixError: If the factorization hits a zero pivot
        SolverError: On a residual violation with strict=True

    Example:
        >>> solve_linear(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0]))
        array([1., 1.])
    """
    rhs = np.asarray(rhs, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {matrix.shape}")
    if rhs.shape != (matrix.shape[0],):
        raise ValidationError(f"rhs has shape {rhs.shape}, expected ({matrix.shape[0]},)")
    n = matrix.shape[0]
    if n == 0:
        return np.zeros(0)

    csc = sp.csc_matrix(matrix, dtype=float)
    b_norm = float(np.linalg.norm(rhs))

    pivot = _first_empty_pivot(csc)
    if pivot is not None:
        raise SingularMatrixError(f"matrix is structurally singular at row/column {pivot}", pivot)

    diag = np.abs(csc.diagonal())
    scale = np.where(diag > 0.0, 1.0 / np.sqrt(np.where(diag > 0.0, diag, 1.0)), 1.0)
    scaling = sp.diags(scale)
    scaled = (scaling @ csc @ scaling).tocsc()

    with Profiler("solve_linear"):
        try:
            lu = spla.splu(scaled)
        except RuntimeError as exc:
            raise SingularMatrixError(f"sparse LU failed: {exc}", _first_empty_pivot(scaled)) from exc

        if b_norm == 0.0:
            return np.zeros(n)

        x = scale * lu.solve(scale * rhs)
        residual = rhs - csc @ x
        steps = 0
        for steps in range(1, 3):
            x = x + scale * lu.solve(scale * residual)
            residual = rhs - csc @ x
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("sparse LU produced non-finite values (numerically singular)")

    relative = float(np.linalg.norm(residual)) / b_norm
    logger.info("solve_linear: n=%d rel_residual=%.3e refinement=%d", n, relative, steps)
    if relative > Config.SOLVE_RTOL:
        message = (f"linear solve residual {relative:.3e} exceeds "
                   f"{Config.SOLVE_RTOL:.1e} (n={n})")
        if strict:
            raise SolverError(message)
        logger.warning(message)
    return x


def newton_solve(problem: 'ProblemSpec', mesh: Mesh, dofmap: DofMap,
                 psi0: Optional[FemField] = None,
                 tol_res: Optional[float] = None,
                 tol_inc: Optional[float] = None,
                 max_iter: Optional[int] = None,
                 rule: Optional[QuadratureRule] = None,
                 forcing: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                 ) -> Tuple[FemField, NewtonReport]:
    """
    Solve the stationary QGE R(ψ) = 0 by Newton's method.

    R(ψ) = Re⁻¹A0ψ + N(ψ) − Ro⁻¹Bψ − Ro⁻¹ℓ_F on the free DOFs. The iteration
    starts from ψ0, or from the solution of the problem with the nonlinear
    term dropped, and performs at least one update.

    Args:
        problem: ProblemSpec of kind qge
        mesh: Mesh
        dofmap: DofMap with the boundary constraints
        psi0: Optional initial iterate; its constrained values are overwritten
        tol_res: Residual tolerance (Config.NEWTON_TOL_RES)
        tol_inc: Increment tolerance (Config.NEWTON_TOL_INC)
        max_iter: Iteration cap (Config.NEWTON_MAX_ITER)
        rule: Quadrature rule (Config.DEFAULT_QUAD_DEGREE)
        forcing: F(x, y); defaults to the manufactured forcing of `problem`

    Returns:
        (final iterate, NewtonReport); a failed iteration returns the last
        iterate with converged=False
    """
    if problem.kind is not ModelKind.QGE:
        raise ValidationError(f"newton_solve requires a qge problem, got {problem.kind.value}")
    tol_res = Config.NEWTON_TOL_RES if tol_res is None else validate_positive("tol_res", tol_res)
    tol_inc = Config.NEWTON_TOL_INC if tol_inc is None else validate_positive("tol_inc", tol_inc)
    max_iter = Config.NEWTON_MAX_ITER if max_iter is None else int(max_iter)
    if max_iter < 1:
        raise ValidationError(f"max_iter must be at least 1, got {max_iter}")
    forcing = forcing if forcing is not None else problem.forcing()
    re, ro = float(problem.re), float(problem.ro)

    linear = (assemble_biharmonic(mesh, dofmap, rule) / re
              - assemble_transport(mesh, dofmap, rule) / ro).tocsr()
    rhs = assemble_load(mesh, dofmap, rule, forcing) / ro
    base = apply_constraints(linear, rhs, dofmap)
    free = base.free

    report = NewtonReport()
    if psi0 is None:
        try:
            psi = base.expand(solve_linear(base.matrix, base.rhs))
        except SingularMatrixError as exc:
            logger.warning("newton: linearised initial solve failed: %s", exc)
            report.reason = StopReason.SINGULAR
            return FemField(mesh, dofmap, base.prescribed.copy()), report
    else:
        psi = _coefficients(psi0, dofmap).copy()
        psi[base.constrained] = base.prescribed[base.constrained]

    def residual_of(coefficients: np.ndarray) -> np.ndarray:
        full = linear @ coefficients + trilinear_residual(mesh, dofmap, rule, coefficients) - rhs
        return full[free]

    residual = residual_of(psi)
    report.initial_residual = float(np.linalg.norm(residual))
    growth = 0
    previous = report.initial_residual
    for k in range(1, max_iter + 1):
        jacobian = (linear + trilinear_jacobian(mesh, dofmap, rule, psi)).tocsr()
        try:
            delta = solve_linear(jacobian[free][:, free], -residual)
        except SingularMatrixError as exc:
            logger.warning("newton: singular Jacobian at iteration %d: %s", k, exc)
            report.reason = StopReason.SINGULAR
            break
        psi[free] += delta
        residual = residual_of(psi)
        r_norm = float(np.linalg.norm(residual))
        d_norm = float(np.linalg.norm(delta))
        report.residuals.append(r_norm)
        report.increments.append(d_norm)
        logger.info("newton %d: residual=%.3e increment=%.3e", k, r_norm, d_norm)

        if r_norm <= tol_res:
            report.converged, report.reason = True, StopReason.RESIDUAL
            break
        if d_norm <= tol_inc:
            report.converged, report.reason = True, StopReason.INCREMENT
            break
        growth = growth + 1 if r_norm > previous else 0
        previous = r_norm
        if growth >= Config.NEWTON_DIVERGENCE_STREAK:
            report.reason = StopReason.DIVERGED
            logger.warning("newton: residual grew %d consecutive iterations", growth)
            break
    else:
        report.reason = StopReason.MAX_ITERATIONS

    if not report.converged:
        logger.warning("newton stopped without convergence (%s) after %d iterations, residual %.3e",
                       report.reason.value, report.iterations, report.final_residual)
    return FemField(mesh, dofmap, psi), report


def write_newton_log(report: NewtonReport, path: str) -> str:
    """
    Write the Newton log as CSV with header iteration,residual,increment.

    Raises:
        FileIOError: If the file cannot be written
    """
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["iteration", "residual", "increment"])
            for k, r, d in report.rows():
                writer.writerow([k, format_float(r), format_float(d)])
    except OSError as exc:
        raise FileIOError(f"cannot write Newton log {path}: {exc}") from exc
    return path


# ============================================================================
# PROBLEMS - Models, physical parameters and manufactured solutions
# ============================================================================

SYM_X, SYM_Y = sympy.symbols("x y", real=True)


class ModelKind(str, Enum):
    """Streamfunction model solved on the Argyris space."""
    BIHARMONIC = "biharmonic"
    STOMMEL = "stommel"
    STOMMEL_MUNK = "stommel-munk"
    QGE = "qge"

    @classmethod
    def parse(cls, value: Union[str, 'ModelKind']) -> 'ModelKind':
        try:
            return cls(value)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown model {value!r} (valid: {valid})") from None


PARAMETER_NAMES: Tuple[str, ...] = ("eps_s", "eps_m", "re", "ro")
_MODEL_PARAMETERS: Dict[ModelKind, Tuple[str, ...]] = {
    ModelKind.BIHARMONIC: (),
    ModelKind.STOMMEL: ("eps_s",),
    ModelKind.STOMMEL_MUNK: ("eps_s", "eps_m"),
    ModelKind.QGE: ("re", "ro"),
}


def _require_positive(**values: float) -> List[float]:
    return [validate_positive(name, value) for name, value in values.items()]


def rossby_number(U: float, beta: float, L: float) -> float:
    """
    Ro = U / (β L²).

    Example:
        >>> rossby_number(2.0, 0.5, 2.0)
        1.0
    """
    U, beta, L = _require_positive(U=U, beta=beta, L=L)
    return U / (beta * L * L)


def reynolds_number(U: float, L: float, A: float) -> float:
    """Re = U L / A."""
    U, L, A = _require_positive(U=U, L=L, A=A)
    return U * L / A


def stommel_number(gamma: float, beta: float, L: float) -> float:
    """ε_S = γ / (β L)."""
    gamma, beta, L = _require_positive(gamma=gamma, beta=beta, L=L)
    return gamma / (beta * L)


def munk_scale(A: float, beta: float, L: float) -> float:
    """ε_M = A / (β L³), which equals Ro / Re for the same U, β, L, A."""
    A, beta, L = _require_positive(A=A, beta=beta, L=L)
    return A / (beta * L ** 3)


def jacobian_operator(psi_grad: Sequence[Any], q_grad: Sequence[Any]) -> Any:
    """
    J(ψ, q) = ψ_x q_y − ψ_y q_x from the two gradients.

    Works on floats, numpy arrays and sympy expressions.

    Example:
        >>> jacobian_operator((2, 3), (-1, 4))
        11
    """
    return psi_grad[0] * q_grad[1] - psi_grad[1] * q_grad[0]


class SymbolicField:
    """
    Scalar field given by a sympy expression in SYM_X, SYM_Y.

    Partial derivatives are differentiated symbolically and compiled with
    lambdify on first use; results broadcast to the shape of the inputs.
    """

    def __init__(self, expr: sympy.Expr) -> None:
        self.expr = sympy.sympify(expr)
        self._compiled: Dict[Tuple[int, int], Callable[..., Any]] = {}

    def __repr__(self) -> str:
        return f"SymbolicField({self.expr})"

    def derivative(self, nx: int, ny: int) -> sympy.Expr:
        expr = self.expr
        if nx:
            expr = sympy.diff(expr, SYM_X, nx)
        if ny:
            expr = sympy.diff(expr, SYM_Y, ny)
        return expr

    def _function(self, nx: int, ny: int) -> Callable[..., Any]:
        key = (int(nx), int(ny))
        if key not in self._compiled:
            self._compiled[key] = sympy.lambdify(
                (SYM_X, SYM_Y), self.derivative(*key), modules="numpy", cse=True,
            )
        return self._compiled[key]

    def partial(self, nx: int, ny: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        values = np.asarray(self._function(nx, ny)(x, y), dtype=float)
        return np.broadcast_to(values, x.shape).copy()

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.partial(0, 0, x, y)


def _laplacian(expr: sympy.Expr) -> sympy.Expr:
    return sympy.diff(expr, SYM_X, 2) + sympy.diff(expr, SYM_Y, 2)


def forcing_expression(kind: ModelKind, psi: sympy.Expr, parameters: Dict[str, float]) -> sympy.Expr:
    """
    Apply the model operator to ψ.

    biharmonic:    Δ²ψ
    stommel:       ε_S Δψ + ψ_x
    stommel-munk:  ε_S Δψ − ε_M Δ²ψ + ψ_x
    qge:           Ro (Re⁻¹ Δ²ψ + J(ψ, Δψ)) − ψ_x, the F of Re⁻¹Δ²ψ + J(ψ,Δψ) − Ro⁻¹ψ_x = Ro⁻¹F
    """
    kind = ModelKind.parse(kind)
    lap = _laplacian(psi)
    psi_x = sympy.diff(psi, SYM_X)
    if kind is ModelKind.BIHARMONIC:
        return _laplacian(lap)
    if kind is ModelKind.STOMMEL:
        return parameters["eps_s"] * lap + psi_x
    if kind is ModelKind.STOMMEL_MUNK:
        return parameters["eps_s"] * lap - parameters["eps_m"] * _laplacian(lap) + psi_x
    grad_psi = (psi_x, sympy.diff(psi, SYM_Y))
    grad_lap = (sympy.diff(lap, SYM_X), sympy.diff(lap, SYM_Y))
    nonlinear = jacobian_operator(grad_psi, grad_lap)
    return parameters["ro"] * (_laplacian(lap) / parameters["re"] + nonlinear) - psi_x


def _biharmonic_square(_: Dict[str, float]) -> sympy.Expr:
    return (SYM_X * (SYM_X - 1) * SYM_Y * (SYM_Y - 1)) ** 2


def _stommel_vallis(params: Dict[str, float]) -> sympy.Expr:
    eps = sympy.Float(params["eps_s"])
    return (1 - SYM_X - sympy.exp(-SYM_X / eps)) * sympy.sin(sympy.pi * SYM_Y)


def _stommel_myers(params: Dict[str, float]) -> sympy.Expr:
    eps = params["eps_s"]
    if eps <= 0.0:
        raise ValidationError(f"stommel-myers requires eps_s > 0, got {eps}")
    root = math.sqrt(1.0 + 4.0 * math.pi ** 2 * eps ** 2)
    r1 = sympy.Float((-1.0 + root) / (2.0 * eps))
    r2 = sympy.Float((-1.0 - root) / (2.0 * eps))
    pi = sympy.pi
    layer = ((1 + sympy.exp(r2)) * sympy.exp(r1 * SYM_X)
             - (1 + sympy.exp(r1)) * sympy.exp(r2 * SYM_X)) / (sympy.exp(r1) - sympy.exp(r2))
    interior = 2 * pi * eps * sympy.sin(pi * SYM_X) + sympy.cos(pi * SYM_X)
    return sympy.sin(pi * SYM_Y) / (pi * (1 + 4 * pi ** 2 * eps ** 2)) * (interior + layer)


def _cascon_sin(_: Dict[str, float]) -> sympy.Expr:
    return sympy.sin(sympy.pi * SYM_X / 3) ** 2 * sympy.sin(sympy.pi * SYM_Y) ** 2


def _cascon_exp(_: Dict[str, float]) -> sympy.Expr:
    return ((1 - SYM_X / 3) * (1 - sympy.exp(-20 * SYM_X)) * sympy.sin(sympy.pi * SYM_Y)) ** 2


@dataclass(frozen=True)
class CatalogEntry:
    """Closed-form solution builder with its natural domain, model and parameters."""
    solution_id: str
    builder: Callable[[Dict[str, float]], sympy.Expr]
    lx: float
    ly: float
    model: ModelKind
    defaults: Dict[str, float]
    uses: Tuple[str, ...]
    description: str


_CASCON_DEFAULTS = {"eps_s": 0.05, "eps_m": 6e-5, "re": 1.667, "ro": 1e-4}

SOLUTION_CATALOG: Dict[str, CatalogEntry] = {
    entry.solution_id: entry for entry in (
        CatalogEntry("biharmonic-square", _biharmonic_square, 1.0, 1.0, ModelKind.BIHARMONIC,
                     {}, (), "(x(x-1)y(y-1))^2 on the unit square"),
        CatalogEntry("stommel-vallis", _stommel_vallis, 1.0, 1.0, ModelKind.STOMMEL,
                     {"eps_s": 0.04}, ("eps_s",),
                     "(1 - x - exp(-x/eps_s)) sin(pi y), western boundary layer"),
        CatalogEntry("stommel-myers", _stommel_myers, 1.0, 1.0, ModelKind.STOMMEL,
                     {"eps_s": 0.05}, ("eps_s",),
                     "two-root boundary-layer solution, homogeneous on the boundary"),
        CatalogEntry("cascon-sin", _cascon_sin, 3.0, 1.0, ModelKind.STOMMEL_MUNK,
                     dict(_CASCON_DEFAULTS), (), "sin^2(pi x/3) sin^2(pi y) on [0,3]x[0,1]"),
        CatalogEntry("cascon-exp", _cascon_exp, 3.0, 1.0, ModelKind.STOMMEL_MUNK,
                     dict(_CASCON_DEFAULTS), (),
                     "[(1-x/3)(1-exp(-20x)) sin(pi y)]^2 on [0,3]x[0,1]"),
    )
}


def _catalog_entry(solution_id: str) -> CatalogEntry:
    try:
        return SOLUTION_CATALOG[solution_id]
    except KeyError:
        valid = ", ".join(sorted(SOLUTION_CATALOG))
        raise ValidationError(f"unknown solution {solution_id!r} (valid: {valid})") from None


@dataclass(frozen=True, eq=False)
class ManufacturedSolution:
    """
    Exact streamfunction with its model forcing.

    Attributes:
        solution_id: Catalog id
        kind: Model whose operator produced the forcing
        psi: ψ with symbolic derivatives of any order
        forcing: Model operator applied to ψ
        lx, ly: Natural domain
        parameters: Parameter values used by ψ and the forcing
    """
    solution_id: str
    kind: ModelKind
    psi: SymbolicField
    forcing: SymbolicField
    lx: float
    ly: float
    parameters: Dict[str, float]

    def partial(self, nx: int, ny: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.psi.partial(nx, ny, x, y)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.psi(x, y)

    def boundary_max(self, lx: Optional[float] = None, ly: Optional[float] = None,
                     samples: int = 129) -> float:
        """Largest |ψ| over a sampling of the rectangle boundary."""
        lx = self.lx if lx is None else lx
        ly = self.ly if ly is None else ly
        s = np.linspace(0.0, 1.0, samples)
        xs = np.concatenate([s * lx, s * lx, np.zeros(samples), np.full(samples, lx)])
        ys = np.concatenate([np.zeros(samples), np.full(samples, ly), s * ly, s * ly])
        return float(np.max(np.abs(self.psi(xs, ys))))


@functools.lru_cache(maxsize=64)
def _manufactured_cached(solution_id: str, kind: ModelKind,
                         items: Tuple[Tuple[str, float], ...]) -> ManufacturedSolution:
    entry = _catalog_entry(solution_id)
    parameters = dict(items)
    psi = entry.builder(parameters)
    forcing = forcing_expression(kind, psi, parameters)
    return ManufacturedSolution(
        solution_id=solution_id, kind=kind,
        psi=SymbolicField(psi), forcing=SymbolicField(forcing),
        lx=entry.lx, ly=entry.ly, parameters=parameters,
    )


def manufactured(solution_id: str, kind: Union[ModelKind, str, None] = None,
                 **parameters: float) -> ManufacturedSolution:
    """
    Look up a catalog solution and build its forcing for a model.

    Args:
        solution_id: One of SOLUTION_CATALOG
        kind: Model operator for the forcing (the entry's natural model by default)
        **parameters: eps_s, eps_m, re, ro overrides; catalog defaults fill the rest

    Raises:
        ValidationError: Unknown id, unknown parameter or missing model parameter

    Example:
        >>> solution = manufactured("biharmonic-square")
        >>> float(solution.forcing(0.5, 0.5))
        5.0
    """
    entry = _catalog_entry(solution_id)
    model = entry.model if kind is None else ModelKind.parse(kind)
    unknown = set(parameters) - set(PARAMETER_NAMES)
    if unknown:
        raise ValidationError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
    values = dict(entry.defaults)
    values.update({k: float(v) for k, v in parameters.items() if v is not None})
    needed = set(_MODEL_PARAMETERS[model]) | set(entry.uses)
    for name in sorted(needed):
        if name not in values:
            raise ValidationError(f"parameter {name} is required for {model.value}/{solution_id}")
        validate_positive(name, values[name])
    items = tuple(sorted((k, values[k]) for k in needed))
    return _manufactured_cached(solution_id, model, items)


@dataclass(frozen=True)
class ProblemSpec:
    """
    A model, its parameters, a manufactured solution and a boundary mode.

    Only parameters the model uses may be set; missing ones fall back to
    the solution's catalog defaults. Domain extents default to the
    solution's natural domain.

    Example:
        >>> problem = ProblemSpec(ModelKind.QGE, "cascon-sin", re=1.667, ro=1e-4)
        >>> problem.boundary_mode().value
        'clamped'
    """
    kind: ModelKind
    solution_id: str
    eps_s: Optional[float] = None
    eps_m: Optional[float] = None
    re: Optional[float] = None
    ro: Optional[float] = None
    lx: Optional[float] = None
    ly: Optional[float] = None
    bc: Optional[BoundaryMode] = None

    def __post_init__(self) -> None:
        kind = ModelKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        entry = _catalog_entry(self.solution_id)
        relevant = _MODEL_PARAMETERS[kind]
        for name in PARAMETER_NAMES:
            value = getattr(self, name)
            if name not in relevant:
                if value is not None:
                    raise ValidationError(f"parameter {name} is not used by model {kind.value}")
                continue
            if value is None:
                value = entry.defaults.get(name)
                if value is None:
                    raise ValidationError(f"parameter {name} is required for model {kind.value}")
            object.__setattr__(self, name, validate_positive(name, value))
        object.__setattr__(self, "lx", validate_positive("lx", entry.lx if self.lx is None else self.lx))
        object.__setattr__(self, "ly", validate_positive("ly", entry.ly if self.ly is None else self.ly))
        if self.bc is not None:
            object.__setattr__(self, "bc", BoundaryMode.parse(self.bc))

    @classmethod
    def from_parameters(cls, kind: Union[ModelKind, str], solution_id: str,
                        strict: bool = False, **kwargs: Any) -> 'ProblemSpec':
        """
        Build a ProblemSpec, dropping parameters the model does not use.

        With strict=True irrelevant parameters raise ValidationError instead
        of being dropped with a warning.
        """
        model = ModelKind.parse(kind)
        relevant = _MODEL_PARAMETERS[model]
        for name in PARAMETER_NAMES:
            if kwargs.get(name) is not None and name not in relevant:
                if strict:
                    raise ValidationError(f"parameter {name} is not used by model {model.value}")
                logger.warning("ignoring parameter %s: not used by model %s", name, model.value)
                kwargs[name] = None
        return cls(model, solution_id, **kwargs)

    @property
    def parameters(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in _MODEL_PARAMETERS[self.kind]}

    def solution(self) -> ManufacturedSolution:
        return manufactured(self.solution_id, self.kind, **self.parameters)

    def forcing(self) -> SymbolicField:
        return self.solution().forcing

    def epsilon_m_from_qge(self) -> float:
        """Munk scale implied by the QGE parameters, ε_M = Ro / Re."""
        if self.kind is not ModelKind.QGE:
            raise ValidationError(f"epsilon_m_from_qge needs a qge problem, got {self.kind.value}")
        return float(self.ro) / float(self.re)

    def boundary_mode(self) -> BoundaryMode:
        """
        Resolve the boundary mode: an explicit bc wins; the Stommel model uses
        dirichlet-value, lifted when ψ does not vanish on the boundary; the
        fourth-order models are clamped.
        """
        if self.bc is not None:
            return self.bc
        if self.kind is ModelKind.STOMMEL:
            solution = self.solution()
            scale = max(1.0, float(np.max(np.abs(solution.psi(0.5 * self.lx, 0.5 * self.ly)))))
            if solution.boundary_max(self.lx, self.ly) > Config.GEOMETRY_TOL * scale:
                return BoundaryMode.LIFTED_DIRICHLET
            return BoundaryMode.DIRICHLET_VALUE
        return BoundaryMode.CLAMPED

    def boundary_spec(self) -> BoundarySpec:
        mode = self.boundary_mode()
        lifting = self.solution().psi if mode is BoundaryMode.LIFTED_DIRICHLET else None
        return BoundarySpec(mode, lifting)

    def describe(self) -> str:
        params = " ".join(f"{k}={v:g}" for k, v in self.parameters.items())
        return f"{self.kind.value}/{self.solution_id} on [0,{self.lx:g}]x[0,{self.ly:g}] {params}".rstrip()


@dataclass(frozen=True)
class Preset:
    """A reference study: problem, mesh sequence and its expected finest-mesh rates."""
    name: str
    kind: ModelKind
    solution_id: str
    parameters: Dict[str, float]
    h_values: Tuple[str, ...]
    reference_rates: Tuple[float, float, float]
    description: str

    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.kind, self.solution_id, **self.parameters)


_H_TO_16 = ("1/2", "1/4", "1/8", "1/16")
_H_TO_32 = _H_TO_16 + ("1/32",)

PRESETS: Dict[str, Preset] = {
    preset.name: preset for preset in (
        Preset("biharmonic", ModelKind.BIHARMONIC, "biharmonic-square", {}, _H_TO_16,
               (6.434, 5.294, 4.192), "clamped biharmonic on the unit square"),
        Preset("test1a", ModelKind.STOMMEL, "stommel-vallis", {"eps_s": 0.04}, _H_TO_32,
               (5.788, 4.804, 3.903), "linear Stommel, boundary layer, lifted boundary data"),
        Preset("test1b", ModelKind.STOMMEL, "stommel-vallis", {"eps_s": 1.0}, _H_TO_32,
               (6.035, 5.023, 4.018), "linear Stommel without boundary layer"),
        Preset("test2", ModelKind.STOMMEL, "stommel-myers", {"eps_s": 0.05}, _H_TO_32,
               (5.894, 4.867, 3.948), "linear Stommel, two-root boundary layer"),
        Preset("test3", ModelKind.STOMMEL_MUNK, "cascon-sin", {"eps_s": 0.05, "eps_m": 6e-5},
               _H_TO_32, (6.091, 5.056, 4.024), "linear Stommel-Munk, smooth solution"),
        Preset("test4", ModelKind.STOMMEL_MUNK, "cascon-exp", {"eps_s": 0.05, "eps_m": 6e-5},
               _H_TO_32, (5.656, 4.641, 3.627), "linear Stommel-Munk, boundary layer"),
        Preset("test5", ModelKind.QGE, "cascon-sin", {"re": 1.667, "ro": 1e-4}, _H_TO_32,
               (6.108, 5.061, 4.024), "stationary QGE, smooth solution"),
        Preset("test6", ModelKind.QGE, "cascon-exp", {"re": 1.667, "ro": 1e-4}, _H_TO_32,
               (5.829, 4.650, 3.628), "stationary QGE, boundary layer"),
    )
}


def problem_from_preset(name: str) -> ProblemSpec:
    """
    Raises:
        ValidationError: If the preset name is unknown
    """
    try:
        return PRESETS[name].problem()
    except KeyError:
        valid = ", ".join(PRESETS)
        raise ValidationError(f"unknown preset {name!r} (valid: {valid})") from None


class PotentialVorticityField:
    """Sampler of q = −Ro Δψʰ + y over a FemField."""

    def __init__(self, psi: FemField, ro: float) -> None:
        self.psi = psi
        self.ro = validate_positive("Ro", ro)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.atleast_1d(np.asarray(x, dtype=float)),
                                   np.atleast_1d(np.asarray(y, dtype=float)))
        derivs = eval_field(self.psi, x, y, 2)
        return -self.ro * (derivs[D_XX] + derivs[D_YY]) + y.ravel()


def potential_vorticity(psi: FemField, ro: float) -> PotentialVorticityField:
    return PotentialVorticityField(psi, ro)


def velocity(psi: FemField, x: Union[float, np.ndarray],
             y: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Velocity (u, v) = (ψ_y, −ψ_x) of a streamfunction at domain points.

    Raises:
        GeometryError: If a point lies outside the domain
    """
    derivs = eval_field(psi, x, y, 1)
    return derivs[D_Y], -derivs[D_X]


def system_matrix(problem: ProblemSpec, mesh: Mesh, dofmap: DofMap,
                  rule: Optional[QuadratureRule] = None) -> sp.csr_matrix:
    """
    Linear part of the model operator in weak form.

    biharmonic A0; stommel −ε_S L + B; stommel-munk −ε_S L − ε_M A0 + B;
    qge Re⁻¹A0 − Ro⁻¹B (the trilinear term is handled by newton_solve).
    """
    kind = problem.kind
    if kind is ModelKind.BIHARMONIC:
        return assemble_biharmonic(mesh, dofmap, rule)
    transport = assemble_transport(mesh, dofmap, rule)
    if kind is ModelKind.QGE:
        return (assemble_biharmonic(mesh, dofmap, rule) / float(problem.re)
                - transport / float(problem.ro)).tocsr()
    matrix = transport - float(problem.eps_s) * assemble_laplace(mesh, dofmap, rule)
    if kind is ModelKind.STOMMEL_MUNK:
        matrix = matrix - float(problem.eps_m) * assemble_biharmonic(mesh, dofmap, rule)
    return matrix.tocsr()


@dataclass(eq=False)
class SolveResult:
    """Outcome of one solve on one mesh."""
    problem: ProblemSpec
    mesh: Mesh
    dofmap: DofMap
    field: FemField
    report: Optional[NewtonReport] = None
    system: Optional[ReducedSystem] = None

    @property
    def converged(self) -> bool:
        return self.report is None or self.report.converged


def solve_problem(problem: ProblemSpec, h: LegLike,
                  rule: Optional[QuadratureRule] = None,
                  tol_res: Optional[float] = None,
                  tol_inc: Optional[float] = None,
                  max_iter: Optional[int] = None) -> SolveResult:
    """
    Build the mesh for leg h, assemble the model and solve it.

    Linear models are solved directly; qge runs newton_solve.

    Raises:
        ValidationError: If h does not divide the domain
        SolverError: If the linear system is singular
    """
    mesh = build_structured_mesh(problem.lx, problem.ly, h)
    dofmap = build_dofmap(mesh, problem.boundary_spec())
    forcing = problem.forcing()
    if problem.kind is ModelKind.QGE:
        field, report = newton_solve(problem, mesh, dofmap, tol_res=tol_res, tol_inc=tol_inc,
                                     max_iter=max_iter, rule=rule, forcing=forcing)
        return SolveResult(problem, mesh, dofmap, field, report)

    matrix = system_matrix(problem, mesh, dofmap, rule)
    load = assemble_load(mesh, dofmap, rule, forcing)
    system = apply_constraints(matrix, load, dofmap)
    coefficients = system.expand(solve_linear(system.matrix, system.rhs))
    return SolveResult(problem, mesh, dofmap, FemField(mesh, dofmap, coefficients), None, system)


# ============================================================================
# ANALYSIS - Error norms, convergence rates, studies and sparsity
# ============================================================================

STUDY_HEADER: Tuple[str, ...] = ("h", "dofs", "e0", "rate0", "e1", "rate1", "e2", "rate2",
                                 "status")
SAMPLE_HEADER: Tuple[str, ...] = ("x", "y", "psi", "u", "v")


@dataclass
class ErrorRecord:
    """
    Errors of one mesh in a study.

    e0, e1, e2 are the L², H¹ and H² norms of ψ − ψʰ (full norms, every
    multi-index |α| ≤ k counted once). A row that failed keeps None errors
    and carries the failure message in `status`.
    """
    h: Fraction
    dofs: int
    e0: Optional[float] = None
    e1: Optional[float] = None
    e2: Optional[float] = None
    rate0: Optional[float] = None
    rate1: Optional[float] = None
    rate2: Optional[float] = None
    status: str = "ok"
    newton_iterations: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def errors(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return (self.e0, self.e1, self.e2)

    @property
    def rates(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return (self.rate0, self.rate1, self.rate2)

    def csv_row(self) -> List[str]:
        return [format_float(float(self.h)), str(self.dofs),
                format_float(self.e0), format_float(self.rate0),
                format_float(self.e1), format_float(self.rate1),
                format_float(self.e2), format_float(self.rate2), self.status]


@dataclass
class ErrorTable:
    """Ordered study rows (h strictly decreasing) for one problem."""
    problem: ProblemSpec
    records: List[ErrorRecord] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(record.ok for record in self.records)

    @property
    def final(self) -> ErrorRecord:
        if not self.records:
            raise ValidationError("error table is empty")
        return self.records[-1]

    def chain_rates(self) -> None:
        """Recompute every rate from consecutive rows."""
        previous: Optional[ErrorRecord] = None
        for record in self.records:
            rates: List[Optional[float]] = [None, None, None]
            if previous is not None:
                for k in range(3):
                    e_prev, e_cur = previous.errors[k], record.errors[k]
                    if e_prev is not None and e_cur is not None:
                        rates[k] = convergence_rate(e_prev, e_cur, previous.h, record.h)
            record.rate0, record.rate1, record.rate2 = rates
            previous = record

    def write_csv(self, path: str) -> str:
        """
        Write the table as CSV with header h,dofs,e0,rate0,e1,rate1,e2,rate2,status.

        status is "ok" or the failure message; a failed row leaves its error
        and rate cells empty.

        Raises:
            FileIOError: If the file cannot be written
        """
        try:
            with open(path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(STUDY_HEADER)
                for record in self.records:
                    writer.writerow(record.csv_row())
        except OSError as exc:
            raise FileIOError(f"cannot write study CSV {path}: {exc}") from exc
        return path

    def format(self) -> str:
        """Fixed-width text rendering for the terminal."""
        lines = [f"{self.problem.describe()}",
                 f"{'h':>8} {'dofs':>7} {'e0':>13} {'rate0':>7} {'e1':>13} "
                 f"{'rate1':>7} {'e2':>13} {'rate2':>7}"]
        for r in self.records:
            if not r.ok:
                lines.append(f"{str(r.h):>8} {r.dofs:>7}  {r.status}")
                continue
            cells = [f"{str(r.h):>8}", f"{r.dofs:>7}"]
            for err, rate in zip(r.errors, r.rates):
                cells.append(f"{err:>13.4e}" if err is not None else f"{'':>13}")
                cells.append(f"{rate:>7.3f}" if rate is not None else f"{'':>7}")
            lines.append(" ".join(cells))
        return "\n".join(lines)


def error_norms(psi_h: FemField, exact: Differentiable,
                rule: Optional[QuadratureRule] = None) -> Tuple[float, float, float]:
    """
    L², H¹ and H² norms of exact − ψʰ by elementwise quadrature.

    Example:
        >>> mesh = build_structured_mesh(1.0, 1.0, "1/4")
        >>> exact = SymbolicField(SYM_X ** 3 * SYM_Y ** 2)
        >>> max(error_norms(interpolate(mesh, exact), exact)) < 1e-9
        True
    """
    mesh = psi_h.mesh
    tables = _tables_for(mesh, rule)
    sums = np.zeros(6)
    for c, triangles in tables.batches():
        approx = _field_at_quadrature(tables, c, psi_h.dofmap, triangles, psi_h.coefficients)
        pts = tables.points[triangles]
        wdet = tables.weights(triangles)
        for comp, (p, q) in enumerate(DERIVATIVE_ORDERS):
            diff = exact.partial(p, q, pts[..., 0], pts[..., 1]) - approx[comp]
            sums[comp] += float(np.sum(wdet * diff * diff))
    e0 = math.sqrt(sums[0])
    e1 = math.sqrt(sums[0] + sums[1] + sums[2])
    e2 = math.sqrt(float(np.sum(sums)))
    return e0, e1, e2


def convergence_rate(e_prev: float, e_cur: float, h_prev: LegLike, h_cur: LegLike) -> Optional[float]:
    """
    Observed order log(E_prev/E_cur) / log(h_prev/h_cur).

    Returns None when either error is zero, negative or not finite.

    Raises:
        ValidationError: Unless h_prev > h_cur > 0

    Example:
        >>> round(convergence_rate(0.01018, 0.0004461, "1/16", "1/32"), 3)
        4.512
    """
    hp, hc = parse_fraction(h_prev), parse_fraction(h_cur)
    if not hp > hc:
        raise ValidationError(f"convergence rate needs h_prev > h_cur, got {hp} and {hc}")
    if e_prev is None or e_cur is None:
        return None
    if not (math.isfinite(e_prev) and math.isfinite(e_cur)) or e_prev <= 0.0 or e_cur <= 0.0:
        return None
    return math.log(e_prev / e_cur) / math.log(float(hp) / float(hc))


def _dof_count(lx: float, ly: float, h: Fraction) -> int:
    nx, ny = validate_leg(lx, h), validate_leg(ly, h)
    vertices = (nx + 1) * (ny + 1)
    edges = nx * (ny + 1) + (nx + 1) * ny + nx * ny
    return 6 * vertices + edges


def _study_row(problem: ProblemSpec, h: Fraction, rule: Optional[QuadratureRule],
               tol_res: Optional[float], tol_inc: Optional[float],
               max_iter: Optional[int]) -> ErrorRecord:
    dofs = _dof_count(problem.lx, problem.ly, h)
    try:
        with Profiler(f"study row h={h}"):
            result = solve_problem(problem, h, rule, tol_res, tol_inc, max_iter)
            e0, e1, e2 = error_norms(result.field, problem.solution(), rule)
    except (SolverError, ConvergenceError, ElementError) as exc:
        logger.warning("study row h=%s failed: %s", h, exc)
        return ErrorRecord(h, dofs, status=f"failed: {exc}")
    record = ErrorRecord(h, result.dofmap.n_dofs, e0, e1, e2)
    if result.report is not None:
        record.newton_iterations = result.report.iterations
        if not result.report.converged:
            record.status = f"failed: newton {result.report.reason.value}"
    logger.info("study row h=%s dofs=%d e0=%.3e e1=%.3e e2=%.3e",
                h, record.dofs, e0, e1, e2)
    return record


def run_study(problem: ProblemSpec, h_values: Sequence[LegLike],
              rule: Optional[QuadratureRule] = None,
              workers: Optional[int] = None,
              tol_res: Optional[float] = None,
              tol_inc: Optional[float] = None,
              max_iter: Optional[int] = None) -> ErrorTable:
    """
    Solve on each mesh and tabulate errors with chained rates.

    Every h is validated before any solve. A row whose solve fails keeps a
    failure status and the remaining rows still run. With workers > 1 rows
    run on a thread pool; row order always follows h_values.

    Raises:
        ValidationError: Empty list, h not strictly decreasing or not dividing the domain
    """
    legs = [parse_fraction(h) for h in h_values]
    if not legs:
        raise ValidationError("run_study needs at least one mesh leg")
    for h in legs:
        validate_leg(problem.lx, h)
        validate_leg(problem.ly, h)
    if any(a <= b for a, b in zip(legs, legs[1:])):
        raise ValidationError(f"mesh legs must be strictly decreasing: {', '.join(map(str, legs))}")

    workers = Config.MAX_WORKERS if workers is None else max(1, int(workers))
    logger.info("study %s: %d meshes, %d worker(s)", problem.describe(), len(legs), workers)

    def row(h: Fraction) -> ErrorRecord:
        return _study_row(problem, h, rule, tol_res, tol_inc, max_iter)

    if workers > 1 and len(legs) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(legs))) as pool:
            records = list(pool.map(row, legs))
    else:
        records = [row(h) for h in legs]

    table = ErrorTable(problem, records)
    table.chain_rates()
    return table


@dataclass(frozen=True)
class SparsityReport:
    """
    Structure of a sparse matrix.

    Attributes:
        n: Dimension
        nnz: Stored entries
        half_bandwidth: max |i − j| over stored entries
        profile: Σ_i (i − first stored column of row i), lower envelope
        block_bandwidths: Half-bandwidth of each named diagonal block
    """
    n: int
    nnz: int
    half_bandwidth: int
    profile: int
    block_bandwidths: Dict[str, int] = field(default_factory=dict)

    @property
    def banded(self) -> bool:
        """Every diagonal block has half-bandwidth below n/4."""
        widths = list(self.block_bandwidths.values()) or [self.half_bandwidth]
        return max(widths) < self.n / 4


def dof_blocks(dofmap: DofMap) -> Dict[str, Tuple[int, int]]:
    """Index ranges of the vertex DOFs, each midpoint class, and all midpoint DOFs."""
    o = dofmap.class_offsets
    return {
        "vertex": (o[0], o[1]),
        "horizontal": (o[1], o[2]),
        "vertical": (o[2], o[3]),
        "oblique": (o[3], o[4]),
        "edge": (o[1], o[4]),
    }


def _half_bandwidth(coo: sp.coo_matrix) -> int:
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row - coo.col)))


def sparsity_report(matrix: sp.spmatrix,
                    blocks: Optional[Dict[str, Tuple[int, int]]] = None) -> SparsityReport:
    """
    Count stored entries and measure bandwidth and profile.

    Example:
        >>> sparsity_report(sp.identity(5, format="csr")).half_bandwidth
        0
    """
    csr = sp.csr_matrix(matrix)
    csr.sum_duplicates()
    coo = csr.tocoo()
    n = int(csr.shape[0])
    first = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first, coo.row, coo.col)
    rows = np.arange(n)
    has_entries = first != np.iinfo(np.int64).max
    profile = int(np.sum(np.maximum(0, rows[has_entries] - first[has_entries])))
    block_widths: Dict[str, int] = {}
    for name, (start, stop) in (blocks or {}).items():
        if not 0 <= start <= stop <= n:
            raise ValidationError(f"block {name} [{start}, {stop}) outside matrix of size {n}")
        block_widths[name] = _half_bandwidth(csr[start:stop, start:stop].tocoo())
    return SparsityReport(n, int(csr.nnz), _half_bandwidth(coo), profile, block_widths)


def sample_grid(psi: FemField, n: int) -> np.ndarray:
    """
    Sample ψ and its velocity on an n×n uniform grid over the domain.

    Returns:
        (n*n, 5) array with columns x, y, psi, u, v; x varies fastest

    Raises:
        ValidationError: If n < 2
    """
    if isinstance(n, bool) or int(n) != n or int(n) < 2:
        raise ValidationError(f"sample grid size must be an integer >= 2, got {n!r}")
    n = int(n)
    mesh = psi.mesh
    gx, gy = np.meshgrid(np.linspace(0.0, mesh.lx, n), np.linspace(0.0, mesh.ly, n))
    x, y = gx.ravel(), gy.ravel()
    derivs = eval_field(psi, x, y, 1)
    return np.column_stack([x, y, derivs[D_VAL], derivs[D_Y], -derivs[D_X]])


def write_sample_csv(samples: np.ndarray, path: str) -> str:
    """
    Raises:
        FileIOError: If the file cannot be written
    """
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(SAMPLE_HEADER)
            for row in samples:
                writer.writerow([format_float(float(v)) for v in row])
    except OSError as exc:
        raise FileIOError(f"cannot write sample CSV {path}: {exc}") from exc
    return path


def write_coefficients_csv(psi: FemField, path: str) -> str:
    """
    Write the coefficient vector as CSV with header dof,value.

    Raises:
        FileIOError: If the file cannot be written
    """
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["dof", "value"])
            for k, value in enumerate(psi.coefficients):
                writer.writerow([k, format_float(float(value))])
    except OSError as exc:
        raise FileIOError(f"cannot write coefficients CSV {path}: {exc}") from exc
    return path


# ============================================================================
# CLI - Command-line interface
# ============================================================================

def _split_h(text: Union[str, Sequence[str], None]) -> Tuple[str, ...]:
    if text is None:
        return ()
    if isinstance(text, str):
        parts = text.split(",")
    else:
        parts = [p for item in text for p in str(item).split(",")]
    return tuple(p.strip() for p in parts if p.strip())


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text in ("", "none", "None") else float(text)


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text in ("", "none", "None") else int(text)


def _parse_optional_str(text: str) -> Optional[str]:
    return None if text in ("", "none", "None") else text


@dataclass
class RunConfig:
    """
    Settings of one CLI command.

    Serialised as flat key=value lines (`#` comments and blank lines are
    ignored); flags given on the command line override file values.

    Example:
        >>> config = RunConfig(command="study", preset="test5", h=("1/2", "1/4"))
        >>> RunConfig.from_text(config.to_text()) == config
        True
    """
    command: str = "study"
    preset: Optional[str] = None
    model: Optional[str] = None
    solution: Optional[str] = None
    eps_s: Optional[float] = None
    eps_m: Optional[float] = None
    re: Optional[float] = None
    ro: Optional[float] = None
    lx: Optional[float] = None
    ly: Optional[float] = None
    bc: Optional[str] = None
    h: Tuple[str, ...] = ()
    quad_degree: int = 12
    tol_res: float = 1e-8
    tol_inc: float = 1e-8
    max_iter: int = 10
    workers: Optional[int] = None
    output: Optional[str] = None
    newton_log: Optional[str] = None
    dump_mesh: Optional[str] = None
    dump_matrix: Optional[str] = None
    sample_grid: Optional[int] = None
    full_matrix: bool = False

    _PARSERS: ClassVar[Dict[str, Callable[[str], Any]]] = {
        "command": str,
        "preset": _parse_optional_str,
        "model": _parse_optional_str,
        "solution": _parse_optional_str,
        "eps_s": _parse_optional_float,
        "eps_m": _parse_optional_float,
        "re": _parse_optional_float,
        "ro": _parse_optional_float,
        "lx": _parse_optional_float,
        "ly": _parse_optional_float,
        "bc": _parse_optional_str,
        "h": _split_h,
        "quad_degree": int,
        "tol_res": float,
        "tol_inc": float,
        "max_iter": int,
        "workers": _parse_optional_int,
        "output": _parse_optional_str,
        "newton_log": _parse_optional_str,
        "dump_mesh": _parse_optional_str,
        "dump_matrix": _parse_optional_str,
        "sample_grid": _parse_optional_int,
        "full_matrix": lambda text: text.strip().lower() in ("1", "true", "yes", "on"),
    }

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> 'RunConfig':
        """
        Raises:
            ValidationError: Unknown keys, malformed lines or bad values
        """
        values: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in cls._PARSERS:
                raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = cls._PARSERS[key](value)
            except ValueError as exc:
                raise ValidationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        try:
            with open(path, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ValidationError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_text(text, source=path)

    def merge(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Return a copy with every non-None, non-empty override applied."""
        known = {f.name for f in fields(self)}
        changes = {k: v for k, v in overrides.items()
                   if k in known and v is not None and v != ()}
        return replace(self, **changes)

    def to_problem(self) -> ProblemSpec:
        """
        Raises:
            ValidationError: Missing model/solution, unknown names or bad parameters
        """
        params: Dict[str, Any] = {}
        kind: Optional[str] = None
        solution = self.solution
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValidationError(f"unknown preset {self.preset!r} (valid: {', '.join(PRESETS)})")
            preset = PRESETS[self.preset]
            kind = preset.kind.value
            solution = solution or preset.solution_id
            params.update(preset.parameters)
        if self.model is not None:
            kind = self.model
        if solution is None:
            raise ValidationError("a manufactured solution is required (--solution or --preset)")
        if kind is None:
            kind = _catalog_entry(solution).model.value
        for name in PARAMETER_NAMES:
            if getattr(self, name) is not None:
                params[name] = getattr(self, name)
        return ProblemSpec.from_parameters(kind, solution, lx=self.lx, ly=self.ly,
                                           bc=self.bc, **params)

    def h_values(self) -> Tuple[Fraction, ...]:
        legs = self.h
        if not legs and self.preset in PRESETS:
            legs = PRESETS[self.preset].h_values
        if not legs:
            raise ValidationError("no mesh leg given (--h)")
        return tuple(parse_fraction(h) for h in legs)

    def single_h(self) -> Fraction:
        if not self.h:
            raise ValidationError(f"{self.command} needs exactly one mesh leg (--h)")
        legs = self.h_values()
        if len(legs) != 1:
            raise ValidationError(f"{self.command} needs exactly one mesh leg, got {len(legs)}")
        return legs[0]

    def rule(self) -> QuadratureRule:
        return triangle_rule(self.quad_degree)

    def validate(self) -> None:
        validate_positive("tol_res", self.tol_res)
        validate_positive("tol_inc", self.tol_inc)
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.workers is not None and self.workers < 1:
            raise ValidationError(f"workers must be at least 1, got {self.workers}")
        validate_degree(self.quad_degree)


def _dump_artifacts(config: RunConfig, problem: ProblemSpec, mesh: Mesh, dofmap: DofMap,
                    rule: QuadratureRule, quiet: bool) -> None:
    if config.dump_mesh:
        paths = write_mesh_csv(mesh, config.dump_mesh)
        if not quiet:
            print(Colors.success(f"Mesh written to: {', '.join(paths)}"))
    if config.dump_matrix:
        matrix = system_matrix(problem, mesh, dofmap, rule)
        if not config.full_matrix:
            matrix = apply_constraints(matrix, np.zeros(dofmap.n_dofs), dofmap).matrix
        write_matrix_market(matrix, config.dump_matrix, comment=problem.describe())
        if not quiet:
            print(Colors.success(f"Matrix written to: {config.dump_matrix}"))


def _prepare(config: RunConfig) -> Tuple[ProblemSpec, QuadratureRule]:
    config.validate()
    problem = config.to_problem()
    return problem, config.rule()


def cmd_study(config: RunConfig, quiet: bool = False) -> int:
    """Run a convergence study and write the error table. Exit 1 if any row failed."""
    problem, rule = _prepare(config)
    legs = config.h_values()
    for h in legs:
        validate_leg(problem.lx, h)
        validate_leg(problem.ly, h)
    if not quiet:
        print(Colors.info(f"Study: {Colors.bold(problem.describe())}"))
        print(f"  Meshes: {', '.join(str(h) for h in legs)}")

    start = time.perf_counter()
    table = run_study(problem, legs, rule, workers=config.workers,
                      tol_res=config.tol_res, tol_inc=config.tol_inc, max_iter=config.max_iter)
    if config.output:
        table.write_csv(config.output)
    if config.dump_mesh or config.dump_matrix:
        mesh = build_structured_mesh(problem.lx, problem.ly, legs[-1])
        _dump_artifacts(config, problem, mesh, build_dofmap(mesh, problem.boundary_spec()),
                        rule, quiet)

    if not quiet:
        print()
        print(table.format())
        print()
        if config.output:
            print(Colors.success(f"Error table written to: {config.output}"))
        print(f"  Time: {format_time(time.perf_counter() - start)}")
    if not table.all_ok:
        failed = sum(1 for r in table.records if not r.ok)
        print(Colors.error(f"{failed} study row(s) failed"), file=sys.stderr)
        return 1
    return 0


def cmd_solve(config: RunConfig, quiet: bool = False) -> int:
    """Solve on one mesh; write coefficients and the Newton log. Exit 1 if Newton fails."""
    problem, rule = _prepare(config)
    h = config.single_h()
    validate_leg(problem.lx, h)
    validate_leg(problem.ly, h)

    result = solve_problem(problem, h, rule, config.tol_res, config.tol_inc, config.max_iter)
    e0, e1, e2 = error_norms(result.field, problem.solution(), rule)
    if config.output:
        write_coefficients_csv(result.field, config.output)
    if config.newton_log and result.report is not None:
        write_newton_log(result.report, config.newton_log)
    _dump_artifacts(config, problem, result.mesh, result.dofmap, rule, quiet)

    if not quiet:
        print(Colors.info(f"Solved: {Colors.bold(problem.describe())} h={h}"))
        print(f"  DOFs:        {result.dofmap.n_dofs:,} ({result.dofmap.n_free:,} free)")
        print(f"  Boundary:    {result.dofmap.bc.mode.value}")
        print(f"  Errors:      e0={e0:.4e} e1={e1:.4e} e2={e2:.4e}")
        if result.report is not None:
            print(f"  Newton:      {result.report.iterations} iteration(s), "
                  f"residual {result.report.final_residual:.3e} ({result.report.reason.value})")
        if config.output:
            print(Colors.success(f"Coefficients written to: {config.output}"))
    if not result.converged:
        print(Colors.error(f"Newton did not converge ({result.report.reason.value})"),  # type: ignore[union-attr]
              file=sys.stderr)
        return 1
    return 0


def cmd_export_matrix(config: RunConfig, quiet: bool = False) -> int:
    """Export the model's linear operator (free-DOF block unless --full) as MatrixMarket."""
    problem, rule = _prepare(config)
    h = config.single_h()
    path = config.dump_matrix or config.output
    if not path:
        raise ValidationError("export-matrix needs an output path (-o or --dump-matrix)")
    mesh = build_structured_mesh(problem.lx, problem.ly, h)
    dofmap = build_dofmap(mesh, problem.boundary_spec())
    matrix = system_matrix(problem, mesh, dofmap, rule)
    blocks: Optional[Dict[str, Tuple[int, int]]] = dof_blocks(dofmap)
    if not config.full_matrix:
        matrix = apply_constraints(matrix, np.zeros(dofmap.n_dofs), dofmap).matrix
        blocks = None
    write_matrix_market(matrix, path, comment=problem.describe())
    if config.dump_mesh:
        write_mesh_csv(mesh, config.dump_mesh)
    report = sparsity_report(matrix, blocks)
    if not quiet:
        print(Colors.success(f"Matrix written to: {path}"))
        print(f"  Dimension:      {report.n:,}")
        print(f"  Nonzeros:       {report.nnz:,}")
        print(f"  Half-bandwidth: {report.half_bandwidth:,}")
        print(f"  Profile:        {report.profile:,}")
        for name, width in report.block_bandwidths.items():
            print(f"  Block {name + ':':<10} {width:,}")
    return 0


def cmd_sample(config: RunConfig, quiet: bool = False) -> int:
    """Solve on one mesh and sample x, y, psi, u, v on a uniform grid."""
    problem, rule = _prepare(config)
    h = config.single_h()
    validate_leg(problem.lx, h)
    validate_leg(problem.ly, h)
    if config.sample_grid is None:
        raise ValidationError("sample needs --sample-grid N")
    if config.sample_grid < 2:
        raise ValidationError(f"sample grid size must be >= 2, got {config.sample_grid}")
    if not config.output:
        raise ValidationError("sample needs an output path (-o)")

    result = solve_problem(problem, h, rule, config.tol_res, config.tol_inc, config.max_iter)
    write_sample_csv(sample_grid(result.field, config.sample_grid), config.output)
    if config.newton_log and result.report is not None:
        write_newton_log(result.report, config.newton_log)
    _dump_artifacts(config, problem, result.mesh, result.dofmap, rule, quiet)
    if not quiet:
        print(Colors.success(f"Samples written to: {config.output} "
                             f"({config.sample_grid}x{config.sample_grid} grid)"))
    if not result.converged:
        print(Colors.error("Newton did not converge"), file=sys.stderr)
        return 1
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, bool], int]] = {
    "study": cmd_study,
    "solve": cmd_solve,
    "export-matrix": cmd_export_matrix,
    "sample": cmd_sample,
}


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser with the four subcommands and shared options."""
    common = argparse.ArgumentParser(add_help=False)
    problem = common.add_argument_group("problem")
    problem.add_argument('--config', metavar='PATH', help='key=value config file (flags override it)')
    problem.add_argument('--preset', choices=sorted(PRESETS), help='reference study preset')
    problem.add_argument('--model', choices=[m.value for m in ModelKind], help='model to solve')
    problem.add_argument('--solution', metavar='ID',
                         help=f"manufactured solution ({', '.join(SOLUTION_CATALOG)})")
    problem.add_argument('--eps-s', dest='eps_s', type=float, metavar='V', help='Stommel number')
    problem.add_argument('--eps-m', dest='eps_m', type=float, metavar='V', help='Munk scale')
    problem.add_argument('--re', type=float, metavar='V', help='Reynolds number')
    problem.add_argument('--ro', type=float, metavar='V', help='Rossby number')
    problem.add_argument('--lx', type=float, metavar='L', help='domain length in x')
    problem.add_argument('--ly', type=float, metavar='L', help='domain length in y')
    problem.add_argument('--bc', choices=[m.value for m in BoundaryMode], help='boundary mode')

    numerics = common.add_argument_group("numerics")
    numerics.add_argument('--h', metavar='LIST', help='mesh leg(s), e.g. 1/2,1/4,1/8')
    numerics.add_argument('--quad-degree', dest='quad_degree', type=int, metavar='D',
                          help='quadrature exactness degree (default: 12)')
    numerics.add_argument('--tol-res', dest='tol_res', type=float, metavar='TOL',
                          help='Newton residual tolerance (default: 1e-8)')
    numerics.add_argument('--tol-inc', dest='tol_inc', type=float, metavar='TOL',
                          help='Newton increment tolerance (default: 1e-8)')
    numerics.add_argument('--max-iter', dest='max_iter', type=int, metavar='N',
                          help='Newton iteration cap (default: 10)')
    numerics.add_argument('--workers', type=int, metavar='N',
                          help='concurrent study rows (default: ARGYRIS_QG_THREADS or 1)')

    output = common.add_argument_group("output")
    output.add_argument('-o', '--output', metavar='PATH', help='main output file')
    output.add_argument('--newton-log', dest='newton_log', metavar='PATH',
                        help='Newton log CSV (iteration,residual,increment)')
    output.add_argument('--dump-mesh', dest='dump_mesh', metavar='DIR',
                        help='write vertices.csv, triangles.csv, edges.csv')
    output.add_argument('--dump-matrix', dest='dump_matrix', metavar='PATH',
                        help='write the system matrix as MatrixMarket')
    output.add_argument('--full', dest='full_matrix', action='store_true', default=None,
                        help='export the operator before boundary constraints')
    output.add_argument('--sample-grid', dest='sample_grid', type=int, metavar='N',
                        help='N x N grid for the sample command')
    output.add_argument('-v', '--verbose', action='store_true', help='log progress (INFO)')
    output.add_argument('-q', '--quiet', action='store_true', help='suppress status output')
    output.add_argument('--no-color', dest='no_color', action='store_true',
                        help='disable colored output')

    parser = argparse.ArgumentParser(
        prog='argyris-qge',
        description='C1 Argyris finite elements for biharmonic, Stommel, '
                    'Stommel-Munk and quasi-geostrophic streamfunction models',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  argyris-qge study --model biharmonic --solution biharmonic-square --h 1/2,1/4,1/8,1/16
  argyris-qge study --preset test1b -o test1b.csv
  argyris-qge solve --preset test5 --h 1/8 -o psi.csv --newton-log newton.csv
  argyris-qge export-matrix --preset biharmonic --h 1/8 --full -o a0.mtx
  argyris-qge sample --preset test3 --h 1/8 --sample-grid 41 -o grid.csv

Exit codes: 0 success, 1 solver or I/O failure, 2 invalid input, 130 interrupted.
""",
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True
    helps = {
        "study": "convergence study over a list of mesh legs",
        "solve": "solve on one mesh and write the coefficient vector",
        "export-matrix": "write the system matrix in MatrixMarket format",
        "sample": "sample psi and velocity on a uniform grid",
    }
    for name, text in helps.items():
        subparsers.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    overrides["h"] = _split_h(args.h)
    overrides["command"] = args.command
    return base.merge(overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI entry point.

    Returns:
        Exit code: 0 success, 1 solver or I/O failure, 2 invalid input,
        130 interrupted
    """
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    set_verbosity(bool(args.verbose))
    if args.no_color:
        Config.USE_COLORS = False
    quiet = bool(args.quiet)

    try:
        config = _config_from_args(args)
        return COMMANDS[config.command](config, quiet)
    except ValidationError as e:
        print(Colors.error(f"Validation error: {e}"), file=sys.stderr)
        return 2
    except GeometryError as e:
        print(Colors.error(f"Geometry error: {e}"), file=sys.stderr)
        return 2
    except SolverError as e:
        print(Colors.error(f"Solver error: {e}"), file=sys.stderr)
        return 1
    except FileIOError as e:
        print(Colors.error(f"File I/O error: {e}"), file=sys.stderr)
        return 1
    except ArgyrisError as e:
        print(Colors.error(f"{type(e).__name__}: {e}"), file=sys.stderr)
        return e.code
    except OSError as e:
        print(Colors.error(f"I/O error: {e}"), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(Colors.warning("\nOperation cancelled by user"), file=sys.stderr)
        return 130
    except Exception as e:
        print(Colors.error(f"Unexpected error: {type(e).__name__}: {e}"), file=sys.stderr)
        if Config.VERBOSE_LOGGING:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
