"""Coefficient fields, piecewise constant on the fine cells.

Values are stored as an ``(nf, nf)`` array indexed ``[iy, ix]`` and are sampled at
fine-cell centres.

The random family draws its lattice values from numpy's ``PCG64`` bit generator
(``numpy.random.Generator(numpy.random.PCG64(seed)).standard_normal``), one draw of
shape ``(129, 129)`` indexed ``[i, j]`` with ``i`` along ``x1``, in C order.  PCG64
and the ziggurat normal sampler are fixed algorithms in numpy, so a seed gives the
same field on every platform.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NonPositiveCoefficient, ResolutionWarning, ValidationError
from .mesh import GridHierarchy

TRIG_EPS = (1 / 5, 1 / 13, 1 / 17, 1 / 31, 1 / 65)
RANDOM_LATTICE = 2**7
CHANNEL_RADIUS = 0.025
CHANNEL_CENTRES = np.round(np.arange(2, 9) / 10, 12)  # 0.2, 0.3, ..., 0.8

FAMILIES = ("multiscale_trig", "random_field", "high_contrast", "unit", "custom")


@dataclass(frozen=True, eq=False)
class CoefficientField:
    values: np.ndarray = field(repr=False)
    family: str
    params: dict
    a_min: float
    a_max: float

    @property
    def nf(self) -> int:
        return self.values.shape[0]

    @property
    def cell_values(self) -> np.ndarray:
        """Flat per-cell values in fine-cell index order."""
        return self.values.ravel()

    def hash(self) -> str:
        data = np.ascontiguousarray(self.values, dtype="<f8")
        h = hashlib.sha256()
        h.update(f"{self.nf}:".encode())
        h.update(data.tobytes())
        return h.hexdigest()

    def descriptor(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "hash": self.hash()}

    def scaled(self, factor: float) -> "CoefficientField":
        return CoefficientField(self.values * factor, self.family, dict(self.params),
                                self.a_min * factor, self.a_max * factor)

    def save(self, path: str | Path) -> None:
        """Write ``<path>.bin`` (little-endian doubles, row-major) and ``<path>.json``."""
        path = Path(path)
        np.ascontiguousarray(self.values, dtype="<f8").tofile(path.with_suffix(".bin"))
        meta = {"family": self.family, "params": self.params, "nf": self.nf,
                "a_min": self.a_min, "a_max": self.a_max}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "CoefficientField":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        nf = meta["nf"]
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(nf, nf)
        return cls(values.astype(np.float64), meta["family"], meta["params"],
                   float(values.min()), float(values.max()))


def cell_centres(grid: GridHierarchy) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(grid.nf) + 0.5) * grid.h
    x2, x1 = np.meshgrid(c, c, indexing="ij")
    return x1, x2


def sample_to_cells(grid: GridHierarchy, f_eval: Callable, family: str = "custom",
                    params: dict | None = None) -> CoefficientField:
    """Evaluate ``f_eval(x1, x2)`` at every fine-cell centre."""
    x1, x2 = cell_centres(grid)
    values = np.broadcast_to(np.asarray(f_eval(x1, x2), dtype=np.float64), x1.shape).copy()
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise NonPositiveCoefficient(
            f"coefficient must be positive and finite; min sampled value {np.nanmin(values)}")
    return CoefficientField(values, family, params or {}, float(values.min()), float(values.max()))


def eval_multiscale_trig(x1, x2):
    e1, e2, e3, e4, e5 = TRIG_EPS
    tp = 2 * np.pi
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    s = (
        (1.1 + np.sin(tp * x1 / e1)) / (1.1 + np.sin(tp * x2 / e1))
        + (1.1 + np.sin(tp * x2 / e2)) / (1.1 + np.cos(tp * x1 / e2))
        + (1.1 + np.cos(tp * x1 / e3)) / (1.1 + np.sin(tp * x2 / e3))
        + (1.1 + np.sin(tp * x2 / e4)) / (1.1 + np.cos(tp * x1 / e4))
        + (1.1 + np.cos(tp * x1 / e5)) / (1.1 + np.sin(tp * x2 / e5))
        + np.sin(4 * x1**2 * x2**2)
        + 1
    )
    return s / 6


def build_multiscale_trig(grid: GridHierarchy) -> CoefficientField:
    return sample_to_cells(grid, eval_multiscale_trig, "multiscale_trig",
                           {"eps": [1 / 5, 1 / 13, 1 / 17, 1 / 31, 1 / 65]})


def build_unit(grid: GridHierarchy) -> CoefficientField:
    return sample_to_cells(grid, lambda x1, x2: np.ones_like(x1), "unit", {})


def random_lattice(seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((RANDOM_LATTICE + 1, RANDOM_LATTICE + 1))


def random_field_evaluator(seed: int) -> Callable:
    xi = random_lattice(seed)
    n = RANDOM_LATTICE

    def evaluate(x1, x2):
        s, t = np.asarray(x1) * n, np.asarray(x2) * n
        i = np.clip(np.floor(s).astype(np.int64), 0, n - 1)
        j = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
        u, v = s - i, t - j
        val = ((1 - u) * (1 - v) * xi[i, j] + u * (1 - v) * xi[i + 1, j]
               + (1 - u) * v * xi[i, j + 1] + u * v * xi[i + 1, j + 1])
        return np.abs(val) + 0.5

    return evaluate


def build_random_field(grid: GridHierarchy, seed: int) -> CoefficientField:
    if grid.nf < RANDOM_LATTICE:
        warnings.warn(f"nf={grid.nf} does not resolve the 2^7 lattice", ResolutionWarning,
                      stacklevel=2)
    return sample_to_cells(grid, random_field_evaluator(seed), "random_field", {"seed": int(seed)})


def channel_distance(x1, x2):
    """Euclidean distance to the 7x7 lattice of channel centres."""
    def nearest(x):
        k = np.clip(np.round((np.asarray(x) - 0.2) * 10), 0, 6).astype(np.int64)
        return CHANNEL_CENTRES[k]

    return np.hypot(np.asarray(x1) - nearest(x1), np.asarray(x2) - nearest(x2))


def build_high_contrast(grid: GridHierarchy, contrast: float) -> CoefficientField:
    if not contrast > 1:
        raise ValidationError(f"contrast must exceed 1, got {contrast}")

    def evaluate(x1, x2):
        return np.where(channel_distance(x1, x2) < CHANNEL_RADIUS, float(contrast), 1.0)

    return sample_to_cells(grid, evaluate, "high_contrast", {"M": float(contrast)})


def build_coefficient(grid: GridHierarchy, family: str, *, seed: int = 0,
                      contrast: float = 2.0**10) -> CoefficientField:
    """Build a field from a CLI-style family name."""
    family = {"trig": "multiscale_trig", "random": "random_field",
              "contrast": "high_contrast"}.get(family, family)
    if family == "multiscale_trig":
        return build_multiscale_trig(grid)
    if family == "random_field":
        return build_random_field(grid, seed)
    if family == "high_contrast":
        return build_high_contrast(grid, contrast)
    if family == "unit":
        return build_unit(grid)
    raise ValidationError(f"unknown coefficient family {family!r}")
