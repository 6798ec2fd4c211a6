"""Edge-level objects: tent interpolation, edge norms, the oversampling restriction
operator, its singular value decomposition and the f-adaptive oversampling bubble.

Edge functions are arrays over the ``r + 1`` fine nodes of an edge (``r = nf/nc``),
ordered from the edge's start point to its end point.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .coefficient import CoefficientField
from .errors import DimensionMismatch, ProvenanceMismatch, RankDeficiencyWarning, ValidationError
from .fem import LocalPatch
from .mesh import GridHierarchy
from .parallel import parallel_map, worker_state

STORE_FORMAT_VERSION = 1
# singular values below this fraction of the largest count as zero
RANK_TOL = 1e-12


@dataclass(frozen=True)
class EdgeFunction:
    edge: int
    values: np.ndarray

    @property
    def endpoint_values(self) -> tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])


def edge_parameter(grid: GridHierarchy) -> np.ndarray:
    """Relative position ``t in [0, 1]`` of each fine node along an edge."""
    return np.arange(grid.ratio + 1) / grid.ratio


def tent_functions(grid: GridHierarchy) -> list[list[EdgeFunction]]:
    """For each interior coarse node, its tent trace on every adjacent edge."""
    t = edge_parameter(grid)
    out = []
    for node in range(grid.num_nodes):
        traces = []
        for e in grid.edges_of_node(node):
            if e < 0:
                continue
            start, end = grid.edge_nodes[e]
            traces.append(EdgeFunction(int(e), 1.0 - t if start == node else t.copy()))
        out.append(traces)
    return out


def tent_trace_matrix(grid: GridHierarchy) -> sp.csc_matrix:
    """Sparse ``(num_fine_nodes, num_nodes)`` matrix of tent traces on the skeleton."""
    t = edge_parameter(grid)
    rows, cols, vals = [], [], []
    for e in range(grid.num_edges):
        fine = grid.edge_fine_nodes[e, 1:-1]
        for end, weights in ((0, 1.0 - t[1:-1]), (1, t[1:-1])):
            node = grid.edge_nodes[e, end]
            if node < 0:
                continue
            rows.append(fine)
            cols.append(np.full(len(fine), node))
            vals.append(weights)
    # coarse points are shared by four edges, so they are added once here
    nodes_fine = _coarse_node_fine_ids(grid)
    rows.append(nodes_fine)
    cols.append(np.arange(grid.num_nodes))
    vals.append(np.ones(grid.num_nodes))
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(grid.num_fine_nodes, grid.num_nodes))
    mat = mat.tocsc()
    mat.eliminate_zeros()
    return mat


def _coarse_node_fine_ids(grid: GridHierarchy) -> np.ndarray:
    r = grid.ratio
    return grid.node_ij[:, 1] * r * (grid.nf + 1) + grid.node_ij[:, 0] * r


def interpolate(grid: GridHierarchy, node_values: np.ndarray) -> np.ndarray:
    """Edgewise trace of ``I_H v`` for values at the interior coarse nodes.

    Returns an array ``(num_edges, r + 1)``; boundary endpoints count as zero.
    """
    v = np.asarray(node_values, dtype=np.float64)
    if v.shape != (grid.num_nodes,):
        raise DimensionMismatch(f"expected {grid.num_nodes} nodal values, got {v.shape}")
    ends = np.where(grid.edge_nodes >= 0, v[np.maximum(grid.edge_nodes, 0)], 0.0)
    t = edge_parameter(grid)
    return ends[:, :1] * (1.0 - t) + ends[:, 1:] * t


def edge_trace(grid: GridHierarchy, values: np.ndarray) -> np.ndarray:
    """Restrict a global fine function to every edge, ``(num_edges, r + 1)``."""
    return np.asarray(values)[grid.edge_fine_nodes]


def interpolation_residue(grid: GridHierarchy, values: np.ndarray) -> np.ndarray:
    """``P_e(v - I_H v)`` on every edge for a global fine function ``v``."""
    values = np.asarray(values)
    nodal = values[_coarse_node_fine_ids(grid)]
    return edge_trace(grid, values) - interpolate(grid, nodal)


def _boundary_positions(patch: LocalPatch, global_nodes: np.ndarray) -> np.ndarray:
    loc = patch.local_index(global_nodes)
    pos = np.searchsorted(patch.boundary, loc)
    if not np.array_equal(patch.boundary[np.minimum(pos, len(patch.boundary) - 1)], loc):
        raise DimensionMismatch("nodes are not on the patch boundary")
    return pos


def _interior_positions(patch: LocalPatch, global_nodes: np.ndarray) -> np.ndarray:
    loc = patch.local_index(global_nodes)
    pos = np.searchsorted(patch.interior, loc)
    if not np.array_equal(patch.interior[np.minimum(pos, len(patch.interior) - 1)], loc):
        raise DimensionMismatch("nodes are not interior to the patch")
    return pos


def h_half_gram(grid: GridHierarchy, field: CoefficientField, e: int,
                element_patches: dict | None = None) -> np.ndarray:
    """Gram matrix of the a-harmonic-extension energy over the interior edge nodes.

    Entry ``(i, j)`` is the energy inner product of the extensions (into the two
    elements adjacent to ``e``) of the zero-extended hats at interior nodes i and j.
    """
    interior_fine = grid.edge_fine_nodes[e, 1:-1]
    n = len(interior_fine)
    gram = np.zeros((n, n))
    for t in grid.elements_of_edge(e):
        if element_patches is not None and t in element_patches:
            patch = element_patches[t]
        else:
            patch = LocalPatch(grid, field, grid.element_box(int(t)))
        pos = _boundary_positions(patch, interior_fine)
        trace = np.zeros((len(patch.boundary), n))
        trace[pos, np.arange(n)] = 1.0
        ext = patch.harmonic_extension(trace)
        gram += ext.T @ (patch.matrix @ ext)
    return 0.5 * (gram + gram.T)


def h00_half_norm(values: np.ndarray, length: float) -> float:
    """Discrete Lions-Magenes norm of an edge function vanishing at both endpoints.

    Trapezoid weights on the uniform edge grid; the double integral skips the
    diagonal ``x = y`` and the distance term skips the endpoints.
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v) - 1
    if n < 1:
        raise DimensionMismatch("edge function needs at least two nodes")
    h = length / n
    x = np.arange(n + 1) * h
    w = np.full(n + 1, h)
    w[[0, -1]] = h / 2
    l2 = np.sum(w * v**2)
    dx = x[:, None] - x[None, :]
    off = ~np.eye(n + 1, dtype=bool)
    dv2 = (v[:, None] - v[None, :]) ** 2
    semi = np.sum((w[:, None] * w[None, :] * dv2)[off] / dx[off] ** 2)
    d = np.minimum(x, length - x)
    inner = slice(1, n)
    weighted = np.sum(w[inner] * v[inner] ** 2 / d[inner])
    return float(np.sqrt(l2 + semi + weighted))


class EdgeProblem:
    """Oversampling patch of one edge with the operators living on it."""

    def __init__(self, grid: GridHierarchy, field: CoefficientField, e: int):
        grid._check_edge(e)
        self.grid = grid
        self.field = field
        self.edge = int(e)
        self.patch = LocalPatch(grid, field, grid.oversampling_box(e))
        self._residual = self._build_residual()

    @property
    def num_edge_dofs(self) -> int:
        return self.grid.ratio - 1

    def _build_residual(self) -> sp.csr_matrix:
        """Sparse map from patch interior values to ``P_e(v - I_H v)`` on interior edge nodes."""
        grid, e, patch = self.grid, self.edge, self.patch
        fine = grid.edge_fine_nodes[e]
        n = grid.ratio - 1
        t = edge_parameter(grid)[1:-1]
        rows = [np.arange(n)]
        cols = [_interior_positions(patch, fine[1:-1])]
        vals = [np.ones(n)]
        for end, weight in ((0, 1.0 - t), (1, t)):
            if grid.edge_nodes[e, end] < 0:
                continue  # endpoint on the domain boundary: value is zero
            pos = _interior_positions(patch, fine[[0, -1][end]:][:1])
            rows.append(np.arange(n))
            cols.append(np.full(n, pos[0]))
            vals.append(-weight)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, len(patch.interior)),
        )

    @property
    def residual_operator(self) -> sp.csr_matrix:
        return self._residual

    def free_boundary(self) -> np.ndarray:
        """Positions in ``patch.boundary`` that are not on the domain boundary."""
        return np.flatnonzero(~self.patch.boundary_zero)

    def restriction_matrix(self) -> np.ndarray:
        """Dense ``R_e``: free boundary data on the oversampling patch -> edge residue."""
        free = self.free_boundary()
        data = np.zeros((len(self.patch.boundary), len(free)))
        data[free, np.arange(len(free))] = 1.0
        ext = self.patch.harmonic_extension(data)
        return np.asarray(self._residual @ ext[self.patch.interior])

    def domain_gram(self) -> np.ndarray:
        """Energy Gram of harmonic extensions of free boundary data (Schur complement)."""
        free = self.free_boundary()
        S = self.patch.schur_complement()
        return S[np.ix_(free, free)]

    def image_gram(self, element_patches: dict | None = None) -> np.ndarray:
        return h_half_gram(self.grid, self.field, self.edge, element_patches)

    def coupling_matrix(self) -> np.ndarray:
        """``R_e S^+ R_e^T`` computed as the Neumann minus Dirichlet Green's function
        of the oversampling patch, sampled by the residual functionals."""
        patch = self.patch
        E = self._residual
        Et = E.T.toarray()
        w_dir = patch.solve_interior(Et)
        rhs = np.zeros((patch.num_nodes, Et.shape[1]))
        rhs[patch.interior] = Et
        w_neu = patch.neumann_solve(rhs)[patch.interior]
        K = E @ (w_neu - w_dir)
        return 0.5 * (K + K.T)

    def svd(self, m: int, image_gram: np.ndarray | None = None) -> "EdgeSVD":
        G = self.image_gram() if image_gram is None else image_gram
        K = self.coupling_matrix()
        return _left_singular_pairs(self.edge, G, K, m, self.grid.ratio)

    def os_bubble(self, loads: np.ndarray) -> EdgeFunction:
        """``P_e(u^b - I_H u^b)`` for the zero-trace solve of ``loads`` on the patch."""
        u = self.patch.bubble_solve(loads)
        vals = np.zeros(self.grid.ratio + 1)
        vals[1:-1] = self._residual @ u[self.patch.interior]
        return EdgeFunction(self.edge, vals)

    def release(self) -> None:
        self.patch.release()


@dataclass(frozen=True)
class EdgeSVD:
    edge: int
    singular_values: np.ndarray  # all available, descending
    vectors: np.ndarray  # (m, r + 1) left singular vectors, zero at endpoints
    rank_deficient: bool = False


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        big = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max(initial=0.0))
        if len(big) and col[big[0]] < 0:
            out[:, k] = -col
    return out


def _left_singular_pairs(edge: int, G: np.ndarray, K: np.ndarray, m: int, ratio: int) -> EdgeSVD:
    """Solve ``G K G y = sigma^2 G y`` for the top pairs; ``y`` is G-orthonormal."""
    if m < 0:
        raise ValidationError("m must be non-negative")
    M = G @ K @ G
    M = 0.5 * (M + M.T)
    evals, evecs = sla.eigh(M, G)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    sigma = np.sqrt(np.clip(evals, 0.0, None))
    positive = int(np.sum(sigma > RANK_TOL * sigma[0])) if len(sigma) and sigma[0] > 0 else 0
    take = min(m, positive)
    deficient = take < m
    if deficient:
        warnings.warn(f"edge {edge}: requested {m} singular vectors, only {positive} available",
                      RankDeficiencyWarning, stacklevel=3)
    vecs = _sign_fix(evecs[:, :take])
    full = np.zeros((take, ratio + 1))
    full[:, 1:-1] = vecs.T
    return EdgeSVD(edge, sigma, full, deficient)


def build_restriction_operator(grid: GridHierarchy, field: CoefficientField, e: int) -> np.ndarray:
    return EdgeProblem(grid, field, e).restriction_matrix()


def edge_svd(grid: GridHierarchy, field: CoefficientField, e: int, m: int) -> EdgeSVD:
    return EdgeProblem(grid, field, e).svd(m)


def oversampling_bubble_edge(grid: GridHierarchy, field: CoefficientField, e: int,
                             loads: np.ndarray) -> EdgeFunction:
    return EdgeProblem(grid, field, e).os_bubble(loads)


@dataclass
class AdaptiveCounts:
    counts: np.ndarray
    capped: np.ndarray


def adaptive_truncation(singular_values: list[np.ndarray], threshold: float) -> AdaptiveCounts:
    """Per edge, the smallest 1-based ``m_e`` with ``lambda_{e,m_e} < threshold``."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    counts = np.empty(len(singular_values), dtype=np.int64)
    capped = np.zeros(len(singular_values), dtype=bool)
    for i, s in enumerate(singular_values):
        below = np.flatnonzero(np.asarray(s) < threshold)
        if len(below):
            counts[i] = below[0] + 1
        else:
            counts[i] = len(s)
            capped[i] = True
    return AdaptiveCounts(counts, capped)


@dataclass
class EdgeBasisSet:
    nc: int
    nf: int
    coefficient: dict  # family, params, hash
    singular_values: list[np.ndarray]
    vectors: list[np.ndarray]  # per edge (m_e, r + 1)
    rank_deficient: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    max_m: int = 0

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(v) for v in self.vectors], dtype=np.int64)

    @property
    def num_edges(self) -> int:
        return len(self.vectors)

    def check_provenance(self, grid: GridHierarchy, field: CoefficientField) -> None:
        if (self.nc, self.nf) != (grid.nc, grid.nf):
            raise ProvenanceMismatch(
                f"basis built for nc={self.nc}, nf={self.nf}; grid has nc={grid.nc}, nf={grid.nf}")
        if self.coefficient.get("hash") != field.hash():
            raise ProvenanceMismatch("basis was built for a different coefficient field")

    def truncated(self, m: int | np.ndarray) -> "EdgeBasisSet":
        """Keep the first ``m`` (or per-edge ``m_e``) vectors on each edge."""
        counts = np.broadcast_to(np.asarray(m, dtype=np.int64), (self.num_edges,))
        if np.any(counts < 0):
            raise ValidationError("m must be non-negative")
        vecs = [v[:c] for v, c in zip(self.vectors, counts)]
        short = np.array([len(v) < c for v, c in zip(self.vectors, counts)])
        return EdgeBasisSet(self.nc, self.nf, dict(self.coefficient), self.singular_values,
                            vecs, short | self._deficient(), int(counts.max(initial=0)))

    def _deficient(self) -> np.ndarray:
        if len(self.rank_deficient) == self.num_edges:
            return self.rank_deficient
        return np.zeros(self.num_edges, dtype=bool)

    def adaptive(self, threshold: float) -> "EdgeBasisSet":
        counts = adaptive_truncation(self.singular_values, threshold)
        return self.truncated(counts.counts)

    def error_indicators(self) -> np.ndarray:
        """``lambda_{e, m_e + 1}`` per edge (0 if the spectrum is exhausted)."""
        out = np.zeros(self.num_edges)
        for i, (s, v) in enumerate(zip(self.singular_values, self.vectors)):
            if len(v) < len(s):
                out[i] = s[len(v)]
        return out


def _svd_job(e: int):
    state = worker_state()
    prob = EdgeProblem(state["grid"], state["field"], e)
    result = prob.svd(state["m"])
    prob.release()
    return result


def build_edge_basis(grid: GridHierarchy, field: CoefficientField, m: int,
                     workers: int = 1) -> EdgeBasisSet:
    """Top-``m`` left singular vectors of ``R_e`` on every edge (offline stage)."""
    if m < 0:
        raise ValidationError("m must be non-negative")
    state = {"grid": grid, "field": field, "m": m}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        results = parallel_map(_svd_job, range(grid.num_edges), state, workers)
    deficient = np.array([r.rank_deficient for r in results], dtype=bool)
    if deficient.any():
        warnings.warn(f"{int(deficient.sum())} edges have fewer than {m} positive singular values",
                      RankDeficiencyWarning, stacklevel=2)
    return EdgeBasisSet(grid.nc, grid.nf, field.descriptor(),
                        [r.singular_values for r in results], [r.vectors for r in results],
                        deficient, m)


def _os_job(e: int):
    state = worker_state()
    prob = EdgeProblem(state["grid"], state["field"], e)
    out = prob.os_bubble(state["loads"])
    prob.release()
    return out.values


def build_os_bubbles(grid: GridHierarchy, field: CoefficientField, loads: np.ndarray,
                     workers: int = 1) -> np.ndarray:
    """Oversampling-bubble edge functions for every edge, ``(num_edges, r + 1)``."""
    state = {"grid": grid, "field": field, "loads": loads}
    return np.array(parallel_map(_os_job, range(grid.num_edges), state, workers))


# -- offline store -----------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_store(path: str | Path, basis: EdgeBasisSet) -> Path:
    """Write ``manifest.json`` and ``payload.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = basis.nf // basis.nc + 1
    records, chunks, offset = [], [], 0
    for e, (s, v) in enumerate(zip(basis.singular_values, basis.vectors)):
        records.append({
            "edge": e,
            "offset": offset,
            "m_e": int(len(v)),
            "rank_deficient": bool(basis._deficient()[e]),
            "singular_values": [float(x) for x in s],
        })
        chunks.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
        offset += len(v) * width
    payload = b"".join(chunks)
    manifest = {
        "format_version": STORE_FORMAT_VERSION,
        "nc": basis.nc,
        "nf": basis.nf,
        "max_m": basis.max_m,
        "coefficient": basis.coefficient,
        "values_per_function": width,
        "payload": {"file": "payload.bin", "dtype": "<f8", "count": offset,
                    "sha256": _sha256(payload)},
        "edges": records,
    }
    (path / "payload.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def store_hash(path: str | Path) -> str:
    path = Path(path)
    return _sha256((path / "manifest.json").read_bytes() + (path / "payload.bin").read_bytes())


def load_store(path: str | Path, grid: GridHierarchy | None = None,
               field: CoefficientField | None = None) -> EdgeBasisSet:
    """Read an offline store; validate it against ``grid``/``field`` when given."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != STORE_FORMAT_VERSION:
        raise ProvenanceMismatch(f"unsupported store format {manifest.get('format_version')}")
    if grid is not None and (manifest["nc"], manifest["nf"]) != (grid.nc, grid.nf):
        raise ProvenanceMismatch(
            f"store built for nc={manifest['nc']}, nf={manifest['nf']}; "
            f"requested nc={grid.nc}, nf={grid.nf}")
    if field is not None and manifest["coefficient"]["hash"] != field.hash():
        raise ProvenanceMismatch("store was built for a different coefficient field")
    payload = (path / manifest["payload"]["file"]).read_bytes()
    if _sha256(payload) != manifest["payload"]["sha256"]:
        raise ProvenanceMismatch("store payload is corrupt")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    width = manifest["values_per_function"]
    vectors, sigmas, deficient = [], [], []
    for rec in manifest["edges"]:
        start, m = rec["offset"], rec["m_e"]
        vectors.append(data[start:start + m * width].reshape(m, width).copy())
        sigmas.append(np.array(rec["singular_values"], dtype=np.float64))
        deficient.append(rec["rank_deficient"])
    return EdgeBasisSet(manifest["nc"], manifest["nf"], manifest["coefficient"], sigmas,
                        vectors, np.array(deficient, dtype=bool), manifest["max_m"])
