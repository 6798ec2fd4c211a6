"""Coarse Galerkin solve in the multiscale space and reconstruction on the fine grid.

A basis function is stored by its trace on the coarse skeleton; inside each coarse
element it is the a-harmonic extension of that trace.  Columns of the trace matrix
are ordered: tents (node order), then edge enrichments edge-major with increasing
rank, then one oversampling-bubble column per edge when that variant is used.

Besides the traces we keep ``F = A @ Phi``, the fine stiffness applied to the basis.
Because every basis function is discrete harmonic inside each element, ``F`` lives
on the skeleton, the coarse stiffness is ``T.T @ F`` and ``F.T @ w`` gives
``a(w, phi_j)`` for any fine function ``w``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg.lapack import dpstrf

from .coefficient import CoefficientField
from .edge_basis import EdgeBasisSet, build_os_bubbles, tent_trace_matrix
from .errors import (DimensionMismatch, FactorizationFailure, SingularCoarseSystem,
                     ValidationError, ZeroReference)
from .fem import FineFunction, FineOperators, LocalPatch, cell_loads, factorize_spd
from .mesh import GridHierarchy
from .parallel import parallel_map, worker_state

TENT, ENRICHMENT, OS_BUBBLE = 0, 1, 2
# relative size below which an oversampling-bubble column counts as dependent
PRUNE_TOL = 1e-10
# scaled pivot ratio at or below which the coarse system counts as singular
PIVOT_TOL = 1e-12
# Schur pivot (squared sine of the angle to the kept space) below which a bubble column is dropped
SCHUR_TOL = 1e-10
SCHUR_CHUNK = 256

log = logging.getLogger(__name__)

VARIANTS = (1, 2, 3)


def enrichment_trace_matrix(grid: GridHierarchy, vectors: list[np.ndarray]) -> sp.csc_matrix:
    """Columns for edge functions given per edge as ``(k_e, r + 1)`` arrays."""
    rows, cols, vals = [], [], []
    col = 0
    for e, v in enumerate(vectors):
        v = np.asarray(v)
        fine = grid.edge_fine_nodes[e, 1:-1]
        for k in range(len(v)):
            rows.append(fine)
            cols.append(np.full(len(fine), col))
            vals.append(v[k, 1:-1])
            col += 1
    if col == 0:
        return sp.csc_matrix((grid.num_fine_nodes, 0))
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(grid.num_fine_nodes, col)).tocsc()
    mat.eliminate_zeros()
    return mat


def _element_patch(grid, field, t) -> LocalPatch:
    return LocalPatch(grid, field, grid.element_box(t))


def _element_job(t: int):
    """Skeleton flux of the columns touching element ``t``; bubble data when loads are given."""
    st = worker_state()
    grid, fld, trace = st["grid"], st["field"], st["trace"]
    patch = _element_patch(grid, fld, t)
    bnd = patch.nodes[patch.boundary]
    out = {"t": t, "bnd": bnd}
    if trace is not None and trace.shape[1]:
        sub = trace[bnd]
        cols = np.unique(sub.indices)
        B = sub[:, cols].toarray()
        if len(cols):
            ext = patch.harmonic_extension(B)
            flux = (patch.matrix @ ext)[patch.boundary]
            out["cols"], out["flux"] = cols, flux
    loads = st.get("loads")
    if loads is not None:
        load = patch.load(loads)
        ub = patch.bubble_from_load(load)
        g = load[patch.boundary] - patch.A_ib.T @ ub[patch.interior]
        out["g"] = g
        out["ub_nodes"] = patch.nodes[patch.interior]
        out["ub"] = ub[patch.interior]
    patch.release()
    return out


def _extension_job(t: int):
    st = worker_state()
    grid, fld, traces = st["grid"], st["field"], st["traces"]
    patch = _element_patch(grid, fld, t)
    bnd = patch.nodes[patch.boundary]
    ext = patch.harmonic_extension(traces[bnd])
    patch.release()
    return patch.nodes[patch.interior], ext[patch.interior]


def _scatter_flux(results, num_rows: int, num_cols: int) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    for res in results:
        if "cols" not in res:
            continue
        flux = res["flux"]
        rows.append(np.repeat(res["bnd"], flux.shape[1]))
        cols.append(np.tile(res["cols"], flux.shape[0]))
        vals.append(flux.ravel())
    if not rows:
        return sp.csc_matrix((num_rows, num_cols))
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(num_rows, num_cols)).tocsc()
    mat.sum_duplicates()
    return mat


@dataclass
class GalerkinSpace:
    """Tents plus edge enrichments, given by skeleton traces and skeleton fluxes."""

    grid: GridHierarchy
    counts: np.ndarray  # enrichments per edge
    trace: sp.csc_matrix
    flux: sp.csc_matrix
    kind: np.ndarray
    edge: np.ndarray  # owning edge (-1 for tents)
    rank: np.ndarray  # 0-based rank within the edge (0 for tents)

    @property
    def num_columns(self) -> int:
        return self.trace.shape[1]

    def stiffness(self) -> sp.csc_matrix:
        K = (self.trace.T @ self.flux).tocsc()
        return 0.5 * (K + K.T)

    def select(self, m: int | np.ndarray) -> np.ndarray:
        """Column indices of the nested subspace with ``m`` (or ``m_e``) enrichments per edge."""
        limit = np.broadcast_to(np.asarray(m, dtype=np.int64), (self.grid.num_edges,))
        keep = self.kind == TENT
        enr = self.kind == ENRICHMENT
        keep[enr] = self.rank[enr] < limit[self.edge[enr]]
        return np.flatnonzero(keep)


def build_space(grid: GridHierarchy, field: CoefficientField, basis: EdgeBasisSet,
                workers: int = 1) -> GalerkinSpace:
    """Assemble the skeleton fluxes of all tents and enrichments in ``basis``."""
    basis.check_provenance(grid, field)
    tents = tent_trace_matrix(grid)
    enr = enrichment_trace_matrix(grid, basis.vectors)
    trace = sp.hstack([tents, enr], format="csc")
    counts = basis.counts
    kind = np.concatenate([np.full(grid.num_nodes, TENT), np.full(enr.shape[1], ENRICHMENT)])
    edge = np.concatenate([np.full(grid.num_nodes, -1), np.repeat(np.arange(grid.num_edges), counts)])
    rank = np.concatenate([np.zeros(grid.num_nodes, dtype=np.int64)]
                          + [np.arange(c) for c in counts]).astype(np.int64)
    state = {"grid": grid, "field": field, "trace": trace.tocsr()}
    results = parallel_map(_element_job, range(grid.num_elements), state, workers)
    flux = _scatter_flux(results, grid.num_fine_nodes, trace.shape[1])
    return GalerkinSpace(grid, counts, trace, flux, kind, edge, rank)


def coarse_stiffness(space: GalerkinSpace) -> sp.csc_matrix:
    return space.stiffness()


@dataclass
class OnlineData:
    """Right-hand-side dependent pieces: element bubble, loads and bubble columns."""

    loads: np.ndarray
    bubble: np.ndarray  # global u^b at fine nodes
    rhs: np.ndarray  # (f, phi_j) for the space columns
    os_values: np.ndarray | None = None  # (num_edges, r + 1)
    os_trace: sp.csc_matrix | None = None
    os_flux: sp.csc_matrix | None = None
    os_rhs: np.ndarray | None = None


def online_data(space: GalerkinSpace, field: CoefficientField, f, with_os: bool,
                workers: int = 1) -> OnlineData:
    grid = space.grid
    loads = f if isinstance(f, np.ndarray) and f.ndim == 2 else cell_loads(grid, f)
    os_values = os_trace = None
    if with_os:
        os_values = build_os_bubbles(grid, field, loads, workers)
        os_trace = enrichment_trace_matrix(grid, [v[None, :] for v in os_values])
    state = {"grid": grid, "field": field, "loads": loads,
             "trace": None if os_trace is None else os_trace.tocsr()}
    results = parallel_map(_element_job, range(grid.num_elements), state, workers)
    bubble = np.zeros(grid.num_fine_nodes)
    g = np.zeros(grid.num_fine_nodes)
    for res in results:
        bubble[res["ub_nodes"]] = res["ub"]
        np.add.at(g, res["bnd"], res["g"])
    data = OnlineData(loads, bubble, space.trace.T @ g, os_values)
    if with_os:
        data.os_trace = os_trace
        data.os_flux = _scatter_flux(results, grid.num_fine_nodes, os_trace.shape[1])
        data.os_rhs = os_trace.T @ g
    return data


def _bubble_job(t: int):
    st = worker_state()
    patch = _element_patch(st["grid"], st["field"], t)
    ub = patch.bubble_solve(st["loads"])
    patch.release()
    return patch.nodes[patch.interior], ub[patch.interior]


def element_bubble(grid: GridHierarchy, field: CoefficientField, f, workers: int = 1) -> np.ndarray:
    """Global bubble part ``u^b``: zero-trace solves on every coarse element."""
    loads = f if isinstance(f, np.ndarray) and f.ndim == 2 else cell_loads(grid, f)
    out = np.zeros(grid.num_fine_nodes)
    state = {"grid": grid, "field": field, "loads": loads}
    for nodes, vals in parallel_map(_bubble_job, range(grid.num_elements), state, workers):
        out[nodes] = vals
    return out


def _independent_os(space: GalerkinSpace, cols: np.ndarray, os_values: np.ndarray) -> np.ndarray:
    """Edges whose bubble column is independent of that edge's selected enrichments."""
    keep = []
    sel = np.zeros(space.num_columns, dtype=bool)
    sel[cols] = True
    tr = space.trace
    for e in range(space.grid.num_edges):
        psi = os_values[e, 1:-1]
        scale = np.linalg.norm(psi)
        if scale == 0.0:
            continue
        fine = space.grid.edge_fine_nodes[e, 1:-1]
        own = np.flatnonzero(sel & (space.edge == e))
        if len(own):
            V = tr[fine][:, own].toarray()
            Q, _ = np.linalg.qr(V)
            psi = psi - Q @ (Q.T @ psi)
        if np.linalg.norm(psi) > PRUNE_TOL * scale:
            keep.append(e)
    return np.array(keep, dtype=np.int64)


def _factor_scaled(Kmat: sp.spmatrix):
    """Diagonally scaled factorization of a coarse matrix, with the pivot check."""
    d = Kmat.diagonal()
    if np.any(d <= 0):
        raise SingularCoarseSystem("coarse stiffness has a non-positive diagonal entry")
    scale = 1.0 / np.sqrt(d)
    D = sp.diags(scale)
    try:
        lu = factorize_spd((D @ Kmat @ D).tocsc())
    except FactorizationFailure as exc:
        raise SingularCoarseSystem(str(exc)) from exc
    piv = np.abs(lu.U.diagonal())
    if piv.min() <= PIVOT_TOL * piv.max():
        raise SingularCoarseSystem(
            f"coarse system numerically singular (pivot ratio {piv.min() / piv.max():.2e})")
    return lu, scale


def _schur_independent(Kcc: sp.spmatrix, Kco: sp.spmatrix, Koo: np.ndarray) -> np.ndarray:
    """Bubble columns kept by a pivoted Cholesky of their Schur complement.

    The complement ``Koo - Kco.T Kcc^-1 Kco`` is scaled to unit ``Koo`` diagonal, so a
    pivot is the squared sine of the angle between a column and everything kept so far.
    """
    lu, scale = _factor_scaled(Kcc)
    n_os = Koo.shape[0]
    S = np.array(Koo, dtype=np.float64)
    Kco = Kco.tocsc()
    for start in range(0, n_os, SCHUR_CHUNK):
        block = Kco[:, start:start + SCHUR_CHUNK].toarray()
        X = scale[:, None] * lu.solve(scale[:, None] * block)
        S[:, start:start + SCHUR_CHUNK] -= Kco.T @ X
    s = 1.0 / np.sqrt(np.diag(Koo))
    S = s[:, None] * S * s[None, :]
    S = 0.5 * (S + S.T)
    _, piv, rank, info = dpstrf(S, tol=SCHUR_TOL, lower=1)
    if info < 0:
        raise SingularCoarseSystem(f"pivoted Cholesky failed (info {info})")
    return np.sort(piv[:rank] - 1)


@dataclass
class CoarseSolution:
    m: object
    variant: int
    trace: np.ndarray  # skeleton trace of the Galerkin part
    coefficients: np.ndarray
    num_columns: int
    pruned: int
    pruned_edges: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def solve_coarse(space: GalerkinSpace, data: OnlineData, m, with_os: bool,
                 K: sp.csc_matrix | None = None) -> CoarseSolution:
    """Solve the coarse system for the nested subspace ``m`` (plus bubble columns).

    Bubble columns with no independent content on their own edge are dropped up
    front.  If the assembled system still fails the pivot check, the bubble columns
    are thinned by a rank-revealing factorization of their Schur complement and the
    solve is repeated.  Tent and enrichment columns are never pruned.
    """
    K = space.stiffness() if K is None else K
    cols = space.select(m)
    Kcc = K[cols][:, cols]
    rhs_c = data.rhs[cols]
    variant = 3 if with_os else 1
    if not with_os:
        lu, scale = _factor_scaled(Kcc)
        c = scale * lu.solve(scale * rhs_c)
        return CoarseSolution(m, variant, space.trace[:, cols] @ c, c, len(cols), 0)
    if data.os_trace is None:
        raise ValidationError("online data was prepared without oversampling bubbles")
    os_cols = _independent_os(space, cols, data.os_values)
    Kco = (space.trace[:, cols].T @ data.os_flux[:, os_cols]).tocsc()
    Koo = (data.os_trace[:, os_cols].T @ data.os_flux[:, os_cols]).toarray()
    Koo = 0.5 * (Koo + Koo.T)

    def assemble(sel):
        Ksel = sp.bmat([[Kcc, Kco[:, sel]], [Kco[:, sel].T, sp.csc_matrix(Koo[np.ix_(sel, sel)])]],
                       format="csc")
        return Ksel, np.concatenate([rhs_c, data.os_rhs[os_cols[sel]]])

    sel = np.arange(len(os_cols))
    Ksel, rhs = assemble(sel)
    try:
        lu, scale = _factor_scaled(Ksel)
    except SingularCoarseSystem:
        sel = _schur_independent(Kcc, Kco, Koo)
        log.info("bubble columns dependent: kept %d of %d", len(sel), len(os_cols))
        Ksel, rhs = assemble(sel)
        lu, scale = _factor_scaled(Ksel)
    c = scale * lu.solve(scale * rhs)
    kept = os_cols[sel]
    pruned_edges = np.setdiff1d(np.arange(space.grid.num_edges), kept)
    T = sp.hstack([space.trace[:, cols], data.os_trace[:, kept]], format="csc")
    return CoarseSolution(m, variant, T @ c, c, Ksel.shape[0], len(pruned_edges), pruned_edges)


def extend_skeleton(grid: GridHierarchy, field: CoefficientField, traces: np.ndarray,
                    workers: int = 1) -> np.ndarray:
    """Element-wise a-harmonic extension of skeleton traces (columns of ``traces``)."""
    traces = np.asarray(traces, dtype=np.float64)
    two_d = traces.ndim == 2
    tr = traces if two_d else traces[:, None]
    if tr.shape[0] != grid.num_fine_nodes:
        raise DimensionMismatch(f"expected {grid.num_fine_nodes} rows, got {tr.shape[0]}")
    out = tr.copy()
    state = {"grid": grid, "field": field, "traces": tr}
    for nodes, vals in parallel_map(_extension_job, range(grid.num_elements), state, workers):
        out[nodes] = vals
    return out if two_d else out[:, 0]


@dataclass
class ErrorReport:
    energy: float
    l2: float

    def as_dict(self) -> dict:
        return {"e_E": self.energy, "e_L2": self.l2}


def error_report(ops: FineOperators, u_ref, u) -> ErrorReport:
    """Relative energy and L2 errors of ``u`` against ``u_ref``."""
    ref = u_ref.values if isinstance(u_ref, FineFunction) else np.asarray(u_ref)
    val = u.values if isinstance(u, FineFunction) else np.asarray(u)
    if ref.shape != val.shape:
        raise DimensionMismatch(f"shape mismatch {ref.shape} vs {val.shape}")
    diff = ref - val
    ref_e, ref_l = ops.energy_norm(ref), ops.l2_norm(ref)
    if ref_e == 0.0:
        if np.any(val != 0):
            raise ZeroReference("reference solution is zero; relative error undefined")
        return ErrorReport(0.0, 0.0)
    return ErrorReport(ops.energy_norm(diff) / ref_e, ops.l2_norm(diff) / ref_l)


def residual_orthogonality_check(space: GalerkinSpace, u_ref, u, energy_ref: float, m=None,
                                 data: OnlineData | None = None, with_os: bool = False) -> float:
    """``max_j |a(u_ref - u, phi_j)| / (||u_ref||_a ||phi_j||_a)`` over the basis of the
    subspace ``m`` (all columns if ``None``), including bubble columns when ``with_os``."""
    ref = u_ref.values if isinstance(u_ref, FineFunction) else np.asarray(u_ref)
    val = u.values if isinstance(u, FineFunction) else np.asarray(u)
    cols = np.arange(space.num_columns) if m is None else space.select(np.asarray(m))
    T, F = space.trace[:, cols], space.flux[:, cols]
    if with_os:
        if data is None or data.os_flux is None:
            raise ValidationError("bubble columns requested without online data")
        T = sp.hstack([T, data.os_trace], format="csc")
        F = sp.hstack([F, data.os_flux], format="csc")
    defect = F.T @ (ref - val)
    phi_norm = np.sqrt(np.abs(np.asarray(T.multiply(F).sum(axis=0)).ravel()))
    live = phi_norm > 0
    if energy_ref == 0.0 or not live.any():
        return 0.0
    return float(np.max(np.abs(defect[live]) / phi_norm[live]) / energy_ref)


@dataclass
class SolutionReport:
    nc: int
    nf: int
    m: object
    variant: int
    num_columns: int
    pruned_columns: int
    errors: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    pruned_edges: list = field(default_factory=list)  # edges whose bubble column was dropped

    def to_json(self) -> str:
        m = self.m if np.isscalar(self.m) else [int(x) for x in np.asarray(self.m)]
        return json.dumps({
            "nc": self.nc, "nf": self.nf, "m": m, "variant": self.variant,
            "num_columns": self.num_columns, "pruned_columns": self.pruned_columns,
            "pruned_edges": [int(e) for e in self.pruned_edges],
            "errors": self.errors, "provenance": self.provenance, "timings": self.timings,
        }, indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


class MultiscaleSolver:
    """Offline space construction once; online solves for any right-hand side.

    ``solve`` returns fine functions for each requested ``(m, variant)``, where
    variant 1 is the Galerkin part, 2 adds the element bubble and 3 also adds the
    oversampling-bubble columns before adding the bubble.
    """

    def __init__(self, grid: GridHierarchy, field: CoefficientField, basis: EdgeBasisSet,
                 workers: int = 1):
        basis.check_provenance(grid, field)
        self.grid, self.field, self.basis, self.workers = grid, field, basis, workers
        self.space: GalerkinSpace | None = None
        self._K = None
        self.timings: dict[str, float] = {}

    def offline(self) -> "MultiscaleSolver":
        t0 = time.perf_counter()
        self.space = build_space(self.grid, self.field, self.basis, self.workers)
        self._K = self.space.stiffness()
        self.timings["offline_space"] = time.perf_counter() - t0
        return self

    def prepare(self, f, with_os: bool) -> OnlineData:
        if self.space is None:
            self.offline()
        t0 = time.perf_counter()
        data = online_data(self.space, self.field, f, with_os, self.workers)
        self.timings["online_data"] = time.perf_counter() - t0
        return data

    def solve(self, f, requests, data: OnlineData | None = None):
        """``requests`` is an iterable of ``(m, variant)``; returns ``{(m, variant): (values, CoarseSolution)}``.

        ``m`` may be an int or a per-edge count array (use a tuple to keep it hashable).
        """
        requests = [(m, int(k)) for m, k in requests]
        for m, k in requests:
            if k not in VARIANTS:
                raise ValidationError(f"variant must be one of {VARIANTS}, got {k}")
        with_os = any(k == 3 for _, k in requests)
        if data is None or (with_os and data.os_trace is None):
            data = self.prepare(f, with_os)
        t0 = time.perf_counter()
        coarse = {}
        for m, k in requests:
            key = (m, k == 3)
            if key not in coarse:
                coarse[key] = solve_coarse(self.space, data, np.asarray(m), k == 3, self._K)
        keys = list(coarse)
        traces = np.stack([coarse[key].trace for key in keys], axis=1)
        self.timings["coarse_solve"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        ext = extend_skeleton(self.grid, self.field, traces, self.workers)
        self.timings["reconstruct"] = time.perf_counter() - t0
        out = {}
        for m, k in requests:
            idx = keys.index((m, k == 3))
            vals = ext[:, idx] + (data.bubble if k >= 2 else 0.0)
            sol = coarse[(m, k == 3)]
            sol = replace(sol, m=m, variant=k)
            out[(m, k)] = (vals, sol)
        self.data = data
        return out


def solve_variant(grid: GridHierarchy, field: CoefficientField, basis: EdgeBasisSet, f,
                  m, variant: int, workers: int = 1) -> FineFunction:
    solver = MultiscaleSolver(grid, field, basis, workers).offline()
    key = (m if np.isscalar(m) else tuple(int(x) for x in m), variant)
    vals, _ = solver.solve(f, [key])[key]
    return FineFunction(vals, grid.nf, f"multiscale m={m} variant={variant}")
