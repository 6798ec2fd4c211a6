from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from msbasis import oracles
from msbasis.coefficient import build_coefficient, build_unit
from msbasis.edge_basis import EdgeBasisSet, build_edge_basis
from msbasis.errors import (ProvenanceMismatch, SingularCoarseSystem, ValidationError,
                            ZeroReference)
from msbasis.fem import FineFunction, FineOperators, cell_loads, reference_solve
from msbasis.galerkin import (ENRICHMENT, TENT, MultiscaleSolver, build_space, error_report,
                              extend_skeleton, residual_orthogonality_check, solve_coarse,
                              solve_variant)
from msbasis.mesh import build_hierarchy

RHS = lambda x1, x2: x1**4 - x2**3 + 1  # noqa: E731


@pytest.fixture(scope="module")
def small():
    g = build_hierarchy(4, 16)
    field = build_coefficient(g, "trig")
    basis = build_edge_basis(g, field, 3)
    loads = cell_loads(g, RHS)
    u = reference_solve(g, field, loads).values
    solver = MultiscaleSolver(g, field, basis).offline()
    res = solver.solve(loads, [(m, k) for m in range(4) for k in (1, 2, 3)])
    return g, field, basis, u, solver, res


def test_space_counts():
    g = build_hierarchy(32, 128)
    basis = build_edge_basis(g, build_unit(g), 2)
    space = build_space(g, build_unit(g), basis)
    assert len(space.select(2)) == 1984 * 2 + 961
    assert len(space.select(0)) == 961
    g2 = build_hierarchy(2, 8)
    space2 = build_space(g2, build_unit(g2), build_edge_basis(g2, build_unit(g2), 0))
    assert space2.num_columns == 1
    assert space2.kind[0] == TENT


def test_space_column_layout(small):
    g, _, basis, _, solver, _ = small
    space = solver.space
    enr = space.kind == ENRICHMENT
    assert np.all(space.kind[: g.num_nodes] == TENT)
    np.testing.assert_array_equal(space.edge[enr], np.repeat(np.arange(g.num_edges), 3))
    np.testing.assert_array_equal(space.rank[enr], np.tile(np.arange(3), g.num_edges))


def test_tent_extension_is_q1_hat():
    g = build_hierarchy(4, 16)
    field = build_unit(g)
    space = build_space(g, field, build_edge_basis(g, field, 0))
    ext = extend_skeleton(g, field, space.trace.toarray())
    xy = g.fine_node_xy()
    for n, (x, y) in enumerate(g.node_xy):
        hat = (np.clip(1 - np.abs(xy[:, 0] - x) / g.H, 0, None)
               * np.clip(1 - np.abs(xy[:, 1] - y) / g.H, 0, None))
        np.testing.assert_allclose(ext[:, n], hat, atol=1e-12)


def test_provenance_mismatch(small):
    g, field, basis, *_ = small
    with pytest.raises(ProvenanceMismatch):
        build_space(g, build_unit(g), basis)
    with pytest.raises(ProvenanceMismatch):
        MultiscaleSolver(build_hierarchy(4, 32), field, basis)


def test_matches_dense_galerkin(small):
    g, field, basis, u, solver, res = small
    A = oracles.dense_global_stiffness(g, field)
    b = oracles.dense_load(g, RHS)
    np.testing.assert_allclose(u, oracles.dense_fine_solution(g, field, RHS), atol=1e-13)
    ub = oracles.dense_element_bubbles(g, field, b)
    data = solver.data
    for m in range(4):
        cols = solver.space.select(m)
        Phi = oracles.dense_extension_from_skeleton(g, field, solver.space.trace[:, cols].toarray())
        u1 = oracles.dense_galerkin(A, b, Phi)
        np.testing.assert_allclose(res[(m, 1)][0], u1, atol=1e-12 * np.abs(u).max())
        np.testing.assert_allclose(res[(m, 2)][0], u1 + ub, atol=1e-12 * np.abs(u).max())
        Pos = oracles.dense_extension_from_skeleton(g, field, data.os_trace.toarray())
        u3 = oracles.dense_galerkin(A, b, np.hstack([Phi, Pos]))
        np.testing.assert_allclose(res[(m, 3)][0], u3 + ub, atol=1e-11 * np.abs(u).max())


def test_orthogonality_and_sensitivity(small):
    g, field, basis, u, solver, res = small
    ops = FineOperators(g, field)
    nu = ops.energy_norm(u)
    vals = res[(2, 1)][0]
    assert residual_orthogonality_check(solver.space, u, vals, nu, m=2) <= 1e-8
    bumped = vals.copy()
    bumped[g.edge_fine_nodes[5][1]] += 1e-3
    assert residual_orthogonality_check(solver.space, u, bumped, nu, m=2) > 1e-6
    v3 = res[(2, 3)][0] - solver.data.bubble
    assert residual_orthogonality_check(solver.space, u, v3, nu, m=2, data=solver.data,
                                        with_os=True) <= 1e-8


def test_error_structure(small):
    g, field, basis, u, solver, res = small
    ops = FineOperators(g, field)
    e = {key: error_report(ops, u, vals) for key, (vals, _) in res.items()}
    nb = ops.energy_norm(solver.data.bubble) / ops.energy_norm(u)
    for m in range(4):
        assert e[(m, 2)].energy <= e[(m, 1)].energy
        assert e[(m, 3)].energy <= e[(m, 2)].energy + 1e-12
        assert abs(e[(m, 2)].energy ** 2 + nb**2 - e[(m, 1)].energy ** 2) <= 1e-8
    for k in (1, 2, 3):
        seq = [e[(m, k)].energy for m in range(4)]
        assert all(b <= a * (1 + 1e-10) for a, b in zip(seq, seq[1:]))


def test_error_report_cases():
    g = build_hierarchy(2, 8)
    ops = FineOperators(g, build_unit(g))
    u = reference_solve(g, build_unit(g), -1.0).values
    assert error_report(ops, u, u).as_dict() == {"e_E": 0.0, "e_L2": 0.0}
    r = error_report(ops, u, np.zeros_like(u))
    assert (r.energy, r.l2) == (pytest.approx(1.0), pytest.approx(1.0))
    assert error_report(ops, np.zeros_like(u), np.zeros_like(u)).as_dict() == {"e_E": 0.0, "e_L2": 0.0}
    with pytest.raises(ZeroReference):
        error_report(ops, np.zeros_like(u), u)


def test_zero_rhs_gives_zero_solution(small):
    g, field, basis, *_ = small
    for k in (1, 2, 3):
        sol = solve_variant(g, field, basis, 0.0, 2, k)
        assert isinstance(sol, FineFunction)
        np.testing.assert_array_equal(sol.values, 0.0)


def test_per_edge_counts(small):
    g, field, basis, u, solver, res = small
    counts = tuple(int(c) for c in np.arange(g.num_edges) % 4)
    out = solver.solve(None, [(counts, 1)], data=solver.data)
    vals, coarse = out[(counts, 1)]
    assert coarse.num_columns == g.num_nodes + sum(counts)
    ops = FineOperators(g, field)
    e = error_report(ops, u, vals).energy
    assert error_report(ops, u, res[(3, 1)][0]).energy <= e <= error_report(ops, u, res[(0, 1)][0]).energy


def test_rejects_unknown_variant(small):
    g, field, basis, *_ = small
    with pytest.raises(ValidationError):
        solve_variant(g, field, basis, -1.0, 1, 4)


def test_dependent_basis_is_singular():
    g = build_hierarchy(4, 16)
    field = build_unit(g)
    basis = build_edge_basis(g, field, 1)
    vecs = [np.vstack([v, v]) for v in basis.vectors]
    dup = EdgeBasisSet(basis.nc, basis.nf, basis.coefficient, basis.singular_values, vecs,
                       basis.rank_deficient, 2)
    with pytest.raises(SingularCoarseSystem):
        solve_variant(g, field, dup, -1.0, 2, 1)


def test_dependent_bubble_column_is_pruned(small):
    g, field, basis, u, solver, _ = small
    space = solver.space
    data = solver.prepare(cell_loads(g, RHS), True)
    e = 0
    col = np.flatnonzero((space.kind == ENRICHMENT) & (space.edge == e) & (space.rank == 0))[0]
    fine = g.edge_fine_nodes[e, 1:-1]
    v = space.trace[:, [col]].toarray()[:, 0]
    flux = space.flux[:, [col]].toarray()[:, 0]
    # same flux as the enrichment, trace perturbed off its span but energy-neutral
    delta = np.random.default_rng(0).standard_normal(len(fine))
    delta -= (delta @ flux[fine]) / (flux[fine] @ flux[fine]) * flux[fine]
    trace = v.copy()
    trace[fine] += 1e-6 * np.linalg.norm(v[fine]) * delta / np.linalg.norm(delta)
    os_trace = data.os_trace.tolil()
    os_trace[:, e] = trace[:, None]
    os_flux = data.os_flux.tolil()
    os_flux[:, e] = flux[:, None]
    os_values = data.os_values.copy()
    os_values[e, 1:-1] = trace[fine]
    os_rhs = data.os_rhs.copy()
    os_rhs[e] = data.rhs[col]
    bad = replace(data, os_trace=os_trace.tocsc(), os_flux=os_flux.tocsc(), os_values=os_values,
                  os_rhs=os_rhs)
    sol = solve_coarse(space, bad, 1, True)
    assert sol.pruned == 1 and list(sol.pruned_edges) == [e]
    # dropping the column up front gives the same Galerkin solution
    os_values[e] = 0.0
    ref = solve_coarse(space, replace(bad, os_values=os_values), 1, True)
    assert ref.pruned == 1
    np.testing.assert_allclose(sol.trace, ref.trace, rtol=0, atol=1e-10 * np.abs(ref.trace).max())


def test_worker_count_does_not_change_results(small):
    g, field, basis, u, _, res = small
    solver = MultiscaleSolver(g, field, basis, workers=4).offline()
    out = solver.solve(cell_loads(g, RHS), [(2, 1), (2, 3)])
    for key in out:
        np.testing.assert_array_equal(out[key][0], res[key][0])
    b4 = build_edge_basis(g, field, 3, workers=4)
    for v, w in zip(basis.vectors, b4.vectors):
        np.testing.assert_array_equal(v, w)


def test_stiffness_symmetric(small):
    K = small[4].space.stiffness()
    assert abs(K - K.T).max() == 0
    assert sp.issparse(K)
