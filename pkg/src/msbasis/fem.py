"""Q1 finite elements on the fine grid: assembly, local Dirichlet solves, norms.

Local node order inside a cell is counter-clockwise from the lower-left corner.
The coefficient is constant per cell, so stiffness matrices are exact; loads use
2x2 Gauss quadrature per cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficient import CoefficientField
from .errors import DimensionMismatch, FactorizationFailure
from .mesh import GridHierarchy

# Unit-coefficient bilinear stiffness on a square; h-independent in 2D.
REFERENCE_STIFFNESS = np.array(
    [[4.0, -1.0, -2.0, -1.0],
     [-1.0, 4.0, -1.0, -2.0],
     [-2.0, -1.0, 4.0, -1.0],
     [-1.0, -2.0, -1.0, 4.0]]
) / 6.0

# Bilinear mass matrix on the unit square; scale by h^2.
REFERENCE_MASS = np.array(
    [[4.0, 2.0, 1.0, 2.0],
     [2.0, 4.0, 2.0, 1.0],
     [1.0, 2.0, 4.0, 2.0],
     [2.0, 1.0, 2.0, 4.0]]
) / 36.0

_G = 0.5 / np.sqrt(3.0)
GAUSS_POINTS = np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G],
                         [0.5 + _G, 0.5 + _G], [0.5 - _G, 0.5 + _G]])
# SHAPE_AT_GAUSS[q, a]: shape function a at Gauss point q
SHAPE_AT_GAUSS = np.stack(
    [(1 - GAUSS_POINTS[:, 0]) * (1 - GAUSS_POINTS[:, 1]),
     GAUSS_POINTS[:, 0] * (1 - GAUSS_POINTS[:, 1]),
     GAUSS_POINTS[:, 0] * GAUSS_POINTS[:, 1],
     (1 - GAUSS_POINTS[:, 0]) * GAUSS_POINTS[:, 1]],
    axis=1,
)

_PLAN_CACHE: dict[tuple[int, int], "_AssemblyPlan"] = {}
_PLAN_CACHE_MAX_NODES = 200_000


def cell_stiffness(a_cell: float, h: float = 1.0) -> np.ndarray:
    """Stiffness of one h x h bilinear cell with constant coefficient ``a_cell``."""
    del h  # scale invariant in two dimensions
    return a_cell * REFERENCE_STIFFNESS


@dataclass(frozen=True)
class _AssemblyPlan:
    nx: int
    ny: int
    conn: np.ndarray  # (ncells, 4) local node ids
    inverse: np.ndarray  # COO entry -> CSC slot
    indices: np.ndarray
    indptr: np.ndarray

    @property
    def num_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def assemble(self, element_matrix: np.ndarray, weights: np.ndarray) -> sp.csc_matrix:
        vals = (weights[:, None] * element_matrix.ravel()[None, :]).ravel()
        data = np.bincount(self.inverse, weights=vals, minlength=len(self.indices))
        n = self.num_nodes
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(n, n))

    def assemble_vector(self, cell_vectors: np.ndarray) -> np.ndarray:
        return np.bincount(self.conn.ravel(), weights=cell_vectors.ravel(),
                           minlength=self.num_nodes)


def _assembly_plan(nx: int, ny: int) -> _AssemblyPlan:
    key = (nx, ny)
    plan = _PLAN_CACHE.get(key)
    if plan is not None:
        return plan
    n1 = nx + 1
    nn = n1 * (ny + 1)
    iy, ix = np.mgrid[0:ny, 0:nx]
    n0 = (iy * n1 + ix).ravel()
    conn = np.stack([n0, n0 + 1, n0 + n1 + 1, n0 + n1], axis=1)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    key_flat = cols.astype(np.int64) * nn + rows
    uniq, inverse = np.unique(key_flat, return_inverse=True)
    indices = (uniq % nn).astype(np.int32)
    indptr = np.searchsorted(uniq // nn, np.arange(nn + 1)).astype(np.int32)
    plan = _AssemblyPlan(nx, ny, conn, inverse.ravel(), indices, indptr)
    if nn <= _PLAN_CACHE_MAX_NODES:
        _PLAN_CACHE[key] = plan
    return plan


def factorize_spd(matrix: sp.spmatrix):
    """Sparse LU of an SPD matrix without pivoting; the factor object has ``.solve``."""
    matrix = sp.csc_matrix(matrix)
    if matrix.shape[0] == 0:
        return _EmptyFactor()
    try:
        lu = spla.splu(matrix, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise FactorizationFailure(str(exc)) from exc
    if not np.all(lu.U.diagonal() > 0):
        raise FactorizationFailure("non-positive pivot: assembled matrix is not SPD")
    return lu


class _EmptyFactor:
    def solve(self, rhs):
        return np.zeros_like(np.asarray(rhs, dtype=np.float64))


def cell_loads(grid: GridHierarchy, f: Callable | float) -> np.ndarray:
    """Per-cell load vectors ``(nf*nf, 4)`` for ``f`` by 2x2 Gauss quadrature."""
    nf, h = grid.nf, grid.h
    if np.isscalar(f):
        fq = np.full((nf * nf, 4), float(f))
    else:
        iy, ix = np.divmod(np.arange(nf * nf), nf)
        x1 = (ix[:, None] + GAUSS_POINTS[None, :, 0]) * h
        x2 = (iy[:, None] + GAUSS_POINTS[None, :, 1]) * h
        fq = np.broadcast_to(np.asarray(f(x1, x2), dtype=np.float64), x1.shape)
    return (h * h / 4.0) * fq @ SHAPE_AT_GAUSS


class LocalPatch:
    """A rectangular block of fine cells with its stiffness and Dirichlet factorization.

    Boundary nodes are the nodes on the rectangle's boundary.  Those also lying on
    the domain boundary carry a forced zero; the others are the ``free`` boundary
    nodes.  ``interior`` nodes are the Dirichlet unknowns.
    """

    def __init__(self, grid: GridHierarchy, field: CoefficientField,
                 box: tuple[int, int, int, int]):
        cx0, cy0, cx1, cy1 = box
        if not (0 <= cx0 < cx1 <= grid.nf and 0 <= cy0 < cy1 <= grid.nf):
            raise DimensionMismatch(f"box {box} outside the fine grid")
        self.grid = grid
        self.box = box
        nx, ny = cx1 - cx0, cy1 - cy0
        self.shape = (nx, ny)
        self._plan = _assembly_plan(nx, ny)

        lx, ly = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        lx, ly = lx.ravel(), ly.ravel()
        gx, gy = lx + cx0, ly + cy0
        self.nodes = gy * (grid.nf + 1) + gx
        on_rect = (lx == 0) | (ly == 0) | (lx == nx) | (ly == ny)
        on_domain = (gx == 0) | (gy == 0) | (gx == grid.nf) | (gy == grid.nf)
        self.interior = np.flatnonzero(~on_rect)
        self.boundary = np.flatnonzero(on_rect)
        self.boundary_zero = on_domain[self.boundary]
        self.free = np.flatnonzero(~on_domain)
        self.floating = not on_domain.any()

        cy, cx = np.mgrid[cy0:cy1, cx0:cx1]
        self.cells = (cy * grid.nf + cx).ravel()
        self.matrix = self._plan.assemble(REFERENCE_STIFFNESS, field.cell_values[self.cells])
        self._A_ii = None
        self._A_ib = None
        self._lu = None
        self._neumann = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def local_index(self, global_nodes: np.ndarray) -> np.ndarray:
        """Map global fine node ids inside the patch to local ids."""
        g = np.asarray(global_nodes)
        n1 = self.grid.nf + 1
        gy, gx = np.divmod(g, n1)
        cx0, cy0, _, _ = self.box
        return (gy - cy0) * (self.shape[0] + 1) + (gx - cx0)

    @property
    def A_ii(self) -> sp.csc_matrix:
        if self._A_ii is None:
            self._A_ii = self.matrix[self.interior][:, self.interior].tocsc()
        return self._A_ii

    @property
    def A_ib(self) -> sp.csr_matrix:
        if self._A_ib is None:
            self._A_ib = self.matrix[self.interior][:, self.boundary].tocsr()
        return self._A_ib

    def factorize(self):
        if self._lu is None:
            self._lu = factorize_spd(self.A_ii)
        return self._lu

    def release(self) -> None:
        """Drop factorizations (the assembled matrix is kept)."""
        self._lu = None
        self._neumann = None

    def factor_nbytes(self) -> int:
        if self._lu is None or isinstance(self._lu, _EmptyFactor):
            return 0
        return 12 * (self._lu.L.nnz + self._lu.U.nnz)

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with the interior (Dirichlet) block."""
        return self.factorize().solve(np.asarray(rhs, dtype=np.float64))

    def harmonic_extension(self, boundary_values: np.ndarray) -> np.ndarray:
        """Discrete a-harmonic function with the given boundary trace.

        ``boundary_values`` is indexed like ``self.boundary`` and may have trailing
        columns for several traces.  Returns values on all patch nodes.
        """
        b = np.asarray(boundary_values, dtype=np.float64)
        if b.shape[0] != len(self.boundary):
            raise DimensionMismatch(
                f"expected {len(self.boundary)} boundary values, got {b.shape[0]}")
        out = np.zeros((self.num_nodes,) + b.shape[1:])
        out[self.boundary] = b
        if len(self.interior):
            out[self.interior] = -self.solve_interior(self.A_ib @ b)
        return out

    def load(self, loads: np.ndarray) -> np.ndarray:
        """Assemble the patch load from per-cell loads (``cell_loads`` output)."""
        return self._plan.assemble_vector(loads[self.cells])

    def bubble_solve(self, loads: np.ndarray) -> np.ndarray:
        """Zero-trace solution of the local problem for per-cell ``loads``."""
        return self.bubble_from_load(self.load(loads))

    def bubble_from_load(self, load: np.ndarray) -> np.ndarray:
        out = np.zeros((self.num_nodes,) + load.shape[1:])
        if len(self.interior):
            out[self.interior] = self.solve_interior(load[self.interior])
        return out

    def neumann_factor(self):
        """Factorization of the patch problem with natural conditions on the free boundary.

        When the patch does not touch the domain boundary the matrix is singular with
        the constants as kernel; the first free node is pinned to zero.
        """
        if self._neumann is None:
            keep = self.free[1:] if self.floating else self.free
            A = self.matrix[keep][:, keep].tocsc()
            self._neumann = (keep, factorize_spd(A))
        return self._neumann

    def neumann_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve on the free nodes for a load given on all patch nodes.

        For a floating patch the load must be orthogonal to constants; the result is
        then defined up to a constant.
        """
        keep, lu = self.neumann_factor()
        rhs = np.asarray(rhs, dtype=np.float64)
        out = np.zeros((self.num_nodes,) + rhs.shape[1:])
        out[keep] = lu.solve(rhs[keep])
        return out

    def energy(self, u: np.ndarray, v: np.ndarray | None = None):
        v = u if v is None else v
        return u.T @ (self.matrix @ v)

    def schur_complement(self) -> np.ndarray:
        """Dense Schur complement on all boundary nodes (energy of harmonic extensions)."""
        nb = len(self.boundary)
        ext = self.harmonic_extension(np.eye(nb))
        S = ext[self.boundary].T @ (self.matrix @ ext)[self.boundary]
        return 0.5 * (S + S.T)


def global_patch(grid: GridHierarchy, field: CoefficientField) -> LocalPatch:
    return LocalPatch(grid, field, (0, 0, grid.nf, grid.nf))


def global_stiffness(grid: GridHierarchy, field: CoefficientField) -> sp.csc_matrix:
    """Stiffness over all fine nodes (no boundary conditions applied)."""
    plan = _assembly_plan(grid.nf, grid.nf)
    return plan.assemble(REFERENCE_STIFFNESS, field.cell_values)


def global_mass(grid: GridHierarchy) -> sp.csc_matrix:
    plan = _assembly_plan(grid.nf, grid.nf)
    return plan.assemble(REFERENCE_MASS * grid.h**2, np.ones(grid.nf * grid.nf))


@dataclass(frozen=True)
class FineFunction:
    """Values at all fine nodes of the global grid."""

    values: np.ndarray
    nf: int
    description: str = ""

    def __post_init__(self):
        if self.values.shape != ((self.nf + 1) ** 2,):
            raise DimensionMismatch(
                f"expected {(self.nf + 1) ** 2} nodal values, got {self.values.shape}")

    def __add__(self, other: "FineFunction") -> "FineFunction":
        return FineFunction(self.values + other.values, self.nf, self.description)

    def __sub__(self, other: "FineFunction") -> "FineFunction":
        return FineFunction(self.values - other.values, self.nf, self.description)

    def grid_values(self) -> np.ndarray:
        return self.values.reshape(self.nf + 1, self.nf + 1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.ascontiguousarray(self.values, dtype="<f8").tofile(path.with_suffix(".bin"))
        path.with_suffix(".json").write_text(
            json.dumps({"nf": self.nf, "description": self.description}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FineFunction":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
        return cls(values, meta["nf"], meta.get("description", ""))


class FineOperators:
    """Global stiffness and mass for the norms used in error reports."""

    def __init__(self, grid: GridHierarchy, field: CoefficientField):
        self.grid = grid
        self.stiffness = global_stiffness(grid, field)
        self.mass = global_mass(grid)

    def _values(self, u) -> np.ndarray:
        v = u.values if isinstance(u, FineFunction) else np.asarray(u)
        if v.shape[0] != self.stiffness.shape[0]:
            raise DimensionMismatch(f"expected {self.stiffness.shape[0]} values, got {v.shape[0]}")
        return v

    def energy_inner(self, u, v) -> float:
        return float(self._values(u) @ (self.stiffness @ self._values(v)))

    def energy_norm(self, u) -> float:
        return float(np.sqrt(max(self.energy_inner(u, u), 0.0)))

    def l2_inner(self, u, v) -> float:
        return float(self._values(u) @ (self.mass @ self._values(v)))

    def l2_norm(self, u) -> float:
        return float(np.sqrt(max(self.l2_inner(u, u), 0.0)))


def energy_inner(field: CoefficientField, grid: GridHierarchy, u, v) -> float:
    return FineOperators(grid, field).energy_inner(u, v)


def reference_solve(grid: GridHierarchy, field: CoefficientField, f) -> FineFunction:
    """Fine-grid FEM solution with homogeneous Dirichlet conditions.

    ``f`` is either a callable/scalar right-hand side or precomputed per-cell loads.
    The global factorization is released before returning.
    """
    loads = f if isinstance(f, np.ndarray) and f.ndim == 2 else cell_loads(grid, f)
    patch = global_patch(grid, field)
    u = patch.bubble_solve(loads)
    patch.release()
    return FineFunction(u, grid.nf, "reference solution")


def interpolate_fine(grid: GridHierarchy, func: Callable) -> FineFunction:
    """Nodal interpolant of ``func(x1, x2)``."""
    xy = grid.fine_node_xy()
    return FineFunction(np.asarray(func(xy[:, 0], xy[:, 1]), dtype=np.float64), grid.nf)
