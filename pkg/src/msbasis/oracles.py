"""Dense reference computations for small grids.

Everything here is assembled cell by cell into dense arrays and solved with dense
linear algebra, sharing no code with the sparse production path beyond the mesh
numbering.  Used by the property suite and the tests.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .coefficient import CoefficientField
from .mesh import GridHierarchy

_KREF = np.array(
    [[4.0, -1.0, -2.0, -1.0],
     [-1.0, 4.0, -1.0, -2.0],
     [-2.0, -1.0, 4.0, -1.0],
     [-1.0, -2.0, -1.0, 4.0]]
) / 6.0


class DensePatch:
    """Dense stiffness of a box of fine cells, with node bookkeeping in global ids."""

    def __init__(self, grid: GridHierarchy, field: CoefficientField, box):
        cx0, cy0, cx1, cy1 = box
        n1 = grid.nf + 1
        xs, ys = np.arange(cx0, cx1 + 1), np.arange(cy0, cy1 + 1)
        self.gids = np.array([y * n1 + x for y in ys for x in xs])
        pos = {g: k for k, g in enumerate(self.gids)}
        A = np.zeros((len(self.gids), len(self.gids)))
        for cy in range(cy0, cy1):
            for cx in range(cx0, cx1):
                a = field.values[cy, cx]
                corners = [cy * n1 + cx, cy * n1 + cx + 1, (cy + 1) * n1 + cx + 1, (cy + 1) * n1 + cx]
                idx = [pos[c] for c in corners]
                A[np.ix_(idx, idx)] += a * _KREF
        self.A = A
        self.pos = pos
        gx, gy = self.gids % n1, self.gids // n1
        on_rect = (gx == cx0) | (gx == cx1) | (gy == cy0) | (gy == cy1)
        on_domain = (gx == 0) | (gy == 0) | (gx == grid.nf) | (gy == grid.nf)
        self.inner = np.flatnonzero(~on_rect)
        self.free_bdry = np.flatnonzero(on_rect & ~on_domain)
        self.floating = not on_domain.any()

    def index(self, gids) -> np.ndarray:
        return np.array([self.pos[int(g)] for g in np.atleast_1d(gids)])

    def extend(self, bdry_idx: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Harmonic extension of ``values`` given on nodes ``bdry_idx``; other boundary nodes are 0."""
        values = np.asarray(values, dtype=np.float64).reshape(len(bdry_idx), -1)
        out = np.zeros((len(self.gids), values.shape[1]))
        out[bdry_idx] = values
        I = self.inner
        if len(I):
            out[I] = np.linalg.solve(self.A[np.ix_(I, I)], -self.A[np.ix_(I, bdry_idx)] @ values)
        return out


def dense_image_gram(grid: GridHierarchy, field: CoefficientField, e: int) -> np.ndarray:
    fine = grid.edge_fine_nodes[e, 1:-1]
    G = np.zeros((len(fine), len(fine)))
    for t in grid.elements_of_edge(e):
        P = DensePatch(grid, field, grid.element_box(int(t)))
        X = P.extend(P.index(fine), np.eye(len(fine)))
        G += X.T @ P.A @ X
    return 0.5 * (G + G.T)


def dense_restriction(grid: GridHierarchy, field: CoefficientField, e: int):
    """Dense ``R_e`` and domain Gram ``S`` on the free boundary of the oversampling patch."""
    P = DensePatch(grid, field, grid.oversampling_box(e))
    fb = P.free_bdry
    X = P.extend(fb, np.eye(len(fb)))
    fine = grid.edge_fine_nodes[e]
    trace = np.zeros((len(fine), len(fb)))
    for k, g in enumerate(fine):
        if int(g) in P.pos:
            trace[k] = X[P.pos[int(g)]]
    r = len(fine) - 1
    t = np.arange(r + 1) / r
    interp = np.outer(1 - t, trace[0]) + np.outer(t, trace[-1])
    R = (trace - interp)[1:-1]
    S = X.T @ P.A @ X
    return R, 0.5 * (S + S.T), P.floating


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        big = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max(initial=0.0))
        if len(big) and col[big[0]] < 0:
            out[:, k] = -col
    return out


def dense_edge_svd(grid: GridHierarchy, field: CoefficientField, e: int, m: int):
    """Singular values (all, descending) and top-``m`` left vectors ``(m, r + 1)``
    from the domain-side pencil ``R^T G R x = sigma^2 S x``."""
    R, S, floating = dense_restriction(grid, field, e)
    G = dense_image_gram(grid, field, e)
    n = S.shape[0]
    Q = sla.null_space(np.ones((1, n))) if floating else np.eye(n)
    L = Q.T @ R.T @ G @ R @ Q
    Sd = Q.T @ S @ Q
    w, V = sla.eigh(0.5 * (L + L.T), 0.5 * (Sd + Sd.T))
    order = np.argsort(-w)
    w, V = w[order], V[:, order]
    sigma = np.sqrt(np.clip(w, 0, None))[: R.shape[0]]
    Y = R @ Q @ V[:, :m]
    norms = np.sqrt(np.einsum("ik,ij,jk->k", Y, G, Y))
    Y = _sign_fix(Y / norms)
    full = np.zeros((Y.shape[1], R.shape[0] + 2))
    full[:, 1:-1] = Y.T
    return sigma, full


def pseudoinverse_singular_values(grid: GridHierarchy, field: CoefficientField, e: int) -> np.ndarray:
    """Singular values with the constant kept in the domain basis, via ``pinv(S)``."""
    R, S, _ = dense_restriction(grid, field, e)
    G = dense_image_gram(grid, field, e)
    w = np.linalg.eigvals(np.linalg.pinv(S, hermitian=True) @ R.T @ G @ R).real
    w = np.sort(w)[::-1][: R.shape[0]]
    return np.sqrt(np.clip(w, 0, None))


def dense_global_stiffness(grid: GridHierarchy, field: CoefficientField) -> np.ndarray:
    return DensePatch(grid, field, (0, 0, grid.nf, grid.nf)).A


def dense_extension_from_skeleton(grid: GridHierarchy, field: CoefficientField,
                                  skeleton: np.ndarray) -> np.ndarray:
    """Element-wise harmonic extension of values given on the coarse skeleton.

    ``skeleton`` has one row per fine node (entries off the skeleton are ignored)
    and any number of columns.
    """
    skeleton = np.asarray(skeleton, dtype=np.float64).reshape(grid.num_fine_nodes, -1)
    out = np.zeros_like(skeleton)
    for t in range(grid.num_elements):
        P = DensePatch(grid, field, grid.element_box(t))
        bd = np.setdiff1d(np.arange(len(P.gids)), P.inner)
        X = P.extend(bd, skeleton[P.gids[bd]])
        out[P.gids] = X
    return out


def dense_element_bubbles(grid: GridHierarchy, field: CoefficientField,
                          load: np.ndarray) -> np.ndarray:
    """Sum of zero-trace element solves for a global load vector over fine nodes."""
    out = np.zeros(grid.num_fine_nodes)
    for t in range(grid.num_elements):
        P = DensePatch(grid, field, grid.element_box(t))
        I = P.inner
        out[P.gids[I]] = np.linalg.solve(P.A[np.ix_(I, I)], load[P.gids[I]])
    return out


def dense_load(grid: GridHierarchy, f) -> np.ndarray:
    """Global load vector with 2x2 Gauss quadrature, cell by cell."""
    g = 0.5 / np.sqrt(3.0)
    pts = [(0.5 - g, 0.5 - g), (0.5 + g, 0.5 - g), (0.5 + g, 0.5 + g), (0.5 - g, 0.5 + g)]
    n1, h = grid.nf + 1, grid.h
    b = np.zeros(grid.num_fine_nodes)
    for cy in range(grid.nf):
        for cx in range(grid.nf):
            corners = [cy * n1 + cx, cy * n1 + cx + 1, (cy + 1) * n1 + cx + 1, (cy + 1) * n1 + cx]
            for (s, t) in pts:
                fv = f((cx + s) * h, (cy + t) * h) if callable(f) else f
                phi = [(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t]
                for c, p in zip(corners, phi):
                    b[c] += h * h / 4 * fv * p
    return b


def dense_fine_solution(grid: GridHierarchy, field: CoefficientField, f) -> np.ndarray:
    A = dense_global_stiffness(grid, field)
    b = dense_load(grid, f)
    n1 = grid.nf + 1
    gx, gy = np.arange(n1 * n1) % n1, np.arange(n1 * n1) // n1
    I = np.flatnonzero((gx > 0) & (gy > 0) & (gx < grid.nf) & (gy < grid.nf))
    u = np.zeros(grid.num_fine_nodes)
    u[I] = np.linalg.solve(A[np.ix_(I, I)], b[I])
    return u


def dense_galerkin(A: np.ndarray, b: np.ndarray, Phi: np.ndarray) -> np.ndarray:
    """Galerkin solution in span(Phi) (columns are fine functions)."""
    K = Phi.T @ A @ Phi
    c = np.linalg.solve(K, Phi.T @ b)
    return Phi @ c
