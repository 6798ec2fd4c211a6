"""Offline/online orchestration and the convergence sweeps behind the CSV tables."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..coefficient import CoefficientField, build_coefficient
from ..edge_basis import EdgeBasisSet, build_edge_basis, load_store, save_store, store_hash
from ..errors import ProvenanceMismatch, ValidationError
from ..fem import FineOperators, cell_loads, reference_solve
from ..galerkin import MultiscaleSolver, SolutionReport, error_report
from ..mesh import GridHierarchy, build_hierarchy
from .config import ExperimentConfig
from .rhs import resolve_rhs

log = logging.getLogger(__name__)

SWEEP_H_COLUMNS = ("nc", "m", "variant", "e_E", "e_L2")
SWEEP_M_COLUMNS = ("m", "variant", "e_E", "e_L2")


def build_field(cfg: ExperimentConfig, grid: GridHierarchy) -> CoefficientField:
    return build_coefficient(grid, cfg.family, seed=cfg.coefficient_seed, contrast=cfg.contrast)


def store_dir(cfg: ExperimentConfig, nc: int) -> Path:
    return Path(cfg.store) / f"nc-{nc}"


def offline_store(cfg: ExperimentConfig, grid: GridHierarchy, field: CoefficientField,
                  max_m: int | None = None, rebuild: bool = False) -> tuple[EdgeBasisSet, bool]:
    """Load a matching store or build and write it; returns ``(basis, built)``."""
    max_m = cfg.max_m if max_m is None else max_m
    path = store_dir(cfg, grid.nc)
    if not rebuild and (path / "manifest.json").exists():
        try:
            basis = load_store(path, grid, field)
        except ProvenanceMismatch:
            log.info("store at %s does not match; rebuilding", path)
        else:
            if basis.max_m >= max_m:
                return basis, False
    t0 = time.perf_counter()
    basis = build_edge_basis(grid, field, max_m, cfg.parallelism)
    save_store(path, basis)
    log.info("offline nc=%d: %d edges in %.1fs", grid.nc, grid.num_edges, time.perf_counter() - t0)
    return basis, True


def run_offline(cfg: ExperimentConfig) -> list[Path]:
    paths = []
    field = None
    for nc in _all_nc(cfg):
        grid = build_hierarchy(nc, cfg.nf)
        field = field or build_field(cfg, grid)
        offline_store(cfg, grid, field, rebuild=True)
        paths.append(store_dir(cfg, nc))
    return paths


def _all_nc(cfg: ExperimentConfig) -> list[int]:
    out = list(dict.fromkeys(cfg.nc))
    if cfg.sweep_nc not in out:
        out.append(cfg.sweep_nc)
    return out


@dataclass
class RunContext:
    """Reference data shared by every run of one configuration."""

    field: CoefficientField
    rhs: object
    rhs_text: str
    loads: np.ndarray
    u_ref: np.ndarray
    ops: FineOperators


def reference_context(cfg: ExperimentConfig, rhs=None) -> RunContext:
    grid = build_hierarchy(cfg.nc[0], cfg.nf)
    field = build_field(cfg, grid)
    f, text = resolve_rhs(cfg.rhs if rhs is None else rhs)
    loads = cell_loads(grid, f)
    u_ref = reference_solve(grid, field, loads).values
    return RunContext(field, f, text, loads, u_ref, FineOperators(grid, field))


def _m_key(m):
    return m if np.isscalar(m) else tuple(int(x) for x in m)


def solve_runs(cfg: ExperimentConfig, ctx: RunContext, grid: GridHierarchy, basis: EdgeBasisSet,
               ms, variants, store_built: bool) -> list[SolutionReport]:
    solver = MultiscaleSolver(grid, ctx.field, basis, cfg.parallelism).offline()
    requests = [(_m_key(m), int(k)) for m in ms for k in variants]
    if not requests:
        return []
    results = solver.solve(ctx.loads, requests)
    provenance = {
        "config_hash": cfg.hash(),
        "coefficient": ctx.field.descriptor(),
        "store_hash": store_hash(store_dir(cfg, grid.nc)),
        "rhs": ctx.rhs_text,
        "offline_recomputed": bool(store_built),
    }
    reports = []
    for (m, k) in requests:
        vals, coarse = results[(m, k)]
        err = error_report(ctx.ops, ctx.u_ref, vals)
        reports.append(SolutionReport(
            nc=grid.nc, nf=grid.nf, m=m, variant=k, num_columns=coarse.num_columns,
            pruned_columns=coarse.pruned, pruned_edges=[int(e) for e in coarse.pruned_edges],
            errors=err.as_dict(), provenance=provenance,
            timings=dict(solver.timings)))
    return reports


def run_solve(cfg: ExperimentConfig, rhs=None, variants=None, ms=None,
              ctx: RunContext | None = None) -> list[SolutionReport]:
    """Online stage against existing offline stores; writes one JSON report per run."""
    ctx = ctx or reference_context(cfg, rhs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = cfg.variants if variants is None else variants
    ms = cfg.m if ms is None else ms
    reports = []
    for nc in cfg.nc:
        grid = build_hierarchy(nc, cfg.nf)
        path = store_dir(cfg, nc)
        if not (path / "manifest.json").exists():
            raise ValidationError(f"no offline store at {path}; run 'msbasis offline' first")
        basis = load_store(path, grid, ctx.field)
        if max(ms, default=0) > basis.max_m:
            raise ValidationError(f"store at {path} holds m <= {basis.max_m}, requested {max(ms)}")
        for rep in solve_runs(cfg, ctx, grid, basis, ms, variants, False):
            rep.write(out / f"report-nc{rep.nc}-m{rep.m}-k{rep.variant}.json")
            reports.append(rep)
    return reports


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return path


def run_convergence(cfg: ExperimentConfig, ctx: RunContext | None = None):
    """Sweep ``nc x m x variant``; write ``sweep_H.csv`` and ``sweep_m.csv``.

    Returns ``(rows_H, rows_m)``.  The reference solve is done once per call.
    """
    out = Path(cfg.output_dir)
    rows_h, rows_m = [], []
    if cfg.m and cfg.variants:
        ctx = ctx or reference_context(cfg)
        for nc in _all_nc(cfg):
            grid = build_hierarchy(nc, cfg.nf)
            basis, built = offline_store(cfg, grid, ctx.field)
            reports = solve_runs(cfg, ctx, grid, basis, cfg.m, cfg.variants, built)
            for rep in reports:
                row = (rep.m, rep.variant, rep.errors["e_E"], rep.errors["e_L2"])
                if nc in cfg.nc:
                    rows_h.append((nc,) + row)
                if nc == cfg.sweep_nc:
                    rows_m.append(row)
            log.info("nc=%d done", nc)
    write_csv(out / "sweep_H.csv", SWEEP_H_COLUMNS, rows_h)
    write_csv(out / "sweep_m.csv", SWEEP_M_COLUMNS, rows_m)
    return rows_h, rows_m
