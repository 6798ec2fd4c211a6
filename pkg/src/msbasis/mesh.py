"""Nested two-level uniform quadrilateral grid on the unit square.

Indexing conventions (all row-major by position, ``y`` slowest):

* fine node ``(ix, iy)`` -> ``iy * (nf + 1) + ix``; fine cell ``(ix, iy)`` -> ``iy * nf + ix``
* coarse element ``(I, J)`` -> ``J * nc + I``
* interior coarse node ``(I, J)``, ``1 <= I, J <= nc - 1`` -> ``(J - 1) * (nc - 1) + I - 1``
* coarse edges: the ``nc * (nc - 1)`` horizontal edges first, then the vertical ones.
  Horizontal edge ``(I, J)`` runs from coarse point ``(I, J)`` to ``(I + 1, J)`` with
  ``1 <= J <= nc - 1``; vertical edge ``(I, J)`` from ``(I, J)`` to ``(I, J + 1)``
  with ``1 <= I <= nc - 1``.  Edges lying on the domain boundary are not edges.

Cell boxes ``(cx0, cy0, cx1, cy1)`` are half-open ranges of fine cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMesh, NonNestedMesh

HORIZONTAL = 0
VERTICAL = 1


@dataclass(frozen=True, eq=False)
class GridHierarchy:
    nc: int
    nf: int
    node_ij: np.ndarray = field(repr=False)  # (p, 2) coarse lattice coords of interior nodes
    edge_orientation: np.ndarray = field(repr=False)  # (q,) HORIZONTAL / VERTICAL
    edge_ij: np.ndarray = field(repr=False)  # (q, 2) lattice coords of the start point
    edge_nodes: np.ndarray = field(repr=False)  # (q, 2) node index of endpoints, -1 on the boundary
    edge_elements: np.ndarray = field(repr=False)  # (q, 2) below/left, above/right
    node_edges: np.ndarray = field(repr=False)  # (p, 4) W, E, S, N
    node_elements: np.ndarray = field(repr=False)  # (p, 4) SW, SE, NW, NE
    element_edges: np.ndarray = field(repr=False)  # (nc*nc, 4) S, N, W, E; -1 if on the boundary
    edge_fine_nodes: np.ndarray = field(repr=False)  # (q, r + 1) from start to end

    @property
    def ratio(self) -> int:
        """Fine cells per coarse cell side."""
        return self.nf // self.nc

    @property
    def H(self) -> float:
        return 1.0 / self.nc

    @property
    def h(self) -> float:
        return 1.0 / self.nf

    @property
    def num_nodes(self) -> int:
        return len(self.node_ij)

    @property
    def num_edges(self) -> int:
        return len(self.edge_orientation)

    @property
    def num_elements(self) -> int:
        return self.nc * self.nc

    @property
    def num_fine_nodes(self) -> int:
        return (self.nf + 1) ** 2

    @property
    def node_xy(self) -> np.ndarray:
        return self.node_ij * self.H

    @property
    def edge_boundary_connected(self) -> np.ndarray:
        return (self.edge_nodes < 0).any(axis=1)

    def fine_node_xy(self) -> np.ndarray:
        n = self.nf + 1
        ids = np.arange(n * n)
        return np.stack([ids % n, ids // n], axis=1) * self.h

    def fine_boundary_mask(self) -> np.ndarray:
        n = self.nf + 1
        ids = np.arange(n * n)
        ix, iy = ids % n, ids // n
        return (ix == 0) | (iy == 0) | (ix == self.nf) | (iy == self.nf)

    def element_ij(self, t: int) -> tuple[int, int]:
        return t % self.nc, t // self.nc

    def element_box(self, t: int) -> tuple[int, int, int, int]:
        i, j = self.element_ij(t)
        r = self.ratio
        return i * r, j * r, (i + 1) * r, (j + 1) * r

    def edges_of_node(self, node: int) -> np.ndarray:
        return self.node_edges[node].copy()

    def elements_of_node(self, node: int) -> np.ndarray:
        return self.node_elements[node].copy()

    def support_of_tent(self, node: int) -> np.ndarray:
        return self.elements_of_node(node)

    def elements_of_edge(self, e: int) -> np.ndarray:
        return self.edge_elements[e].copy()

    def edges_of_element(self, t: int) -> np.ndarray:
        edges = self.element_edges[t]
        return edges[edges >= 0]

    def nodes_of_element(self, t: int) -> np.ndarray:
        i, j = self.element_ij(t)
        out = [self.node_index(i + di, j + dj) for dj in (0, 1) for di in (0, 1)]
        return np.array([n for n in out if n >= 0], dtype=np.int64)

    def node_index(self, i: int, j: int) -> int:
        """Index of the interior coarse node at lattice point (i, j), or -1."""
        nc = self.nc
        if 0 < i < nc and 0 < j < nc:
            return (j - 1) * (nc - 1) + i - 1
        return -1

    def element_index(self, i: int, j: int) -> int:
        if 0 <= i < self.nc and 0 <= j < self.nc:
            return j * self.nc + i
        return -1

    def oversampling_range(self, e: int) -> tuple[int, int, int, int]:
        """Coarse element range ``(i0, j0, i1, j1)`` (inclusive) of the oversampling domain."""
        i, j = self.edge_ij[e]
        nc = self.nc
        if self.edge_orientation[e] == HORIZONTAL:
            i0, i1, j0, j1 = i - 1, i + 1, j - 1, j
        else:
            i0, i1, j0, j1 = i - 1, i, j - 1, j + 1
        return max(i0, 0), max(j0, 0), min(i1, nc - 1), min(j1, nc - 1)

    def oversampling_domain(self, e: int) -> np.ndarray:
        """Coarse elements whose closure meets edge ``e``."""
        self._check_edge(e)
        i0, j0, i1, j1 = self.oversampling_range(e)
        return np.array(
            [j * self.nc + i for j in range(j0, j1 + 1) for i in range(i0, i1 + 1)],
            dtype=np.int64,
        )

    def oversampling_box(self, e: int) -> tuple[int, int, int, int]:
        i0, j0, i1, j1 = self.oversampling_range(e)
        r = self.ratio
        return i0 * r, j0 * r, (i1 + 1) * r, (j1 + 1) * r

    def _check_edge(self, e: int) -> None:
        if not 0 <= e < self.num_edges:
            raise IndexError(f"edge index {e} out of range [0, {self.num_edges})")


def build_hierarchy(nc: int, nf: int) -> GridHierarchy:
    """Build the two-level grid with ``nc`` coarse and ``nf`` fine cells per side."""
    if nc < 2:
        raise DegenerateMesh(f"need at least 2 coarse cells per side, got nc={nc}")
    if nf % nc != 0:
        raise NonNestedMesh(f"nf={nf} is not a multiple of nc={nc}")
    r = nf // nc
    if r < 2:
        raise DegenerateMesh(f"need nf/nc >= 2, got {r}")

    def node_index(i, j):
        return (j - 1) * (nc - 1) + i - 1 if (0 < i < nc and 0 < j < nc) else -1

    def elem(i, j):
        return j * nc + i if (0 <= i < nc and 0 <= j < nc) else -1

    node_ij = np.array([(i, j) for j in range(1, nc) for i in range(1, nc)], dtype=np.int64)

    orient, start = [], []
    for j in range(1, nc):
        for i in range(nc):
            orient.append(HORIZONTAL)
            start.append((i, j))
    for j in range(nc):
        for i in range(1, nc):
            orient.append(VERTICAL)
            start.append((i, j))
    orient = np.array(orient, dtype=np.int8)
    start = np.array(start, dtype=np.int64)
    q = len(orient)
    nh = nc * (nc - 1)

    def h_edge(i, j):
        return (j - 1) * nc + i if (0 <= i < nc and 0 < j < nc) else -1

    def v_edge(i, j):
        return nh + j * (nc - 1) + i - 1 if (0 < i < nc and 0 <= j < nc) else -1

    edge_nodes = np.empty((q, 2), dtype=np.int64)
    edge_elements = np.empty((q, 2), dtype=np.int64)
    fine = np.empty((q, r + 1), dtype=np.int64)
    n1 = nf + 1
    steps = np.arange(r + 1)
    for e in range(q):
        i, j = start[e]
        if orient[e] == HORIZONTAL:
            edge_nodes[e] = node_index(i, j), node_index(i + 1, j)
            edge_elements[e] = elem(i, j - 1), elem(i, j)
            fine[e] = (j * r) * n1 + i * r + steps
        else:
            edge_nodes[e] = node_index(i, j), node_index(i, j + 1)
            edge_elements[e] = elem(i - 1, j), elem(i, j)
            fine[e] = (j * r + steps) * n1 + i * r

    p = len(node_ij)
    node_edges = np.empty((p, 4), dtype=np.int64)
    node_elements = np.empty((p, 4), dtype=np.int64)
    for n, (i, j) in enumerate(node_ij):
        node_edges[n] = h_edge(i - 1, j), h_edge(i, j), v_edge(i, j - 1), v_edge(i, j)
        node_elements[n] = elem(i - 1, j - 1), elem(i, j - 1), elem(i - 1, j), elem(i, j)

    element_edges = np.empty((nc * nc, 4), dtype=np.int64)
    for j in range(nc):
        for i in range(nc):
            element_edges[j * nc + i] = h_edge(i, j), h_edge(i, j + 1), v_edge(i, j), v_edge(i + 1, j)

    return GridHierarchy(
        nc=nc,
        nf=nf,
        node_ij=node_ij,
        edge_orientation=orient,
        edge_ij=start,
        edge_nodes=edge_nodes,
        edge_elements=edge_elements,
        node_edges=node_edges,
        node_elements=node_elements,
        element_edges=element_edges,
        edge_fine_nodes=fine,
    )


def box_contains_boundary(grid: GridHierarchy, box: tuple[int, int, int, int]) -> bool:
    cx0, cy0, cx1, cy1 = box
    return cx0 == 0 or cy0 == 0 or cx1 == grid.nf or cy1 == grid.nf
