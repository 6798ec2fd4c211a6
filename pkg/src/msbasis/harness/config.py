"""Experiment configuration: a JSON file mirroring :class:`ExperimentConfig`."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..errors import ConfigError
from .rhs import resolve_rhs

DESK_NF = 256
DEFAULT_NF = 1024
FAMILY_ALIASES = {"trig": "multiscale_trig", "random": "random_field",
                  "contrast": "high_contrast"}


@dataclass
class ExperimentConfig:
    coefficient: dict = field(default_factory=lambda: {"family": "trig"})
    rhs: object = "const_minus_one"
    nc: list = field(default_factory=lambda: [32])
    nf: int = DEFAULT_NF
    m: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: [1, 2, 3])
    seed: int = 0
    output_dir: str = "msbasis-out"
    store: str = "msbasis-store"
    parallelism: int = 1
    m_sweep_nc: int | None = None

    def __post_init__(self):
        self.validate()

    @property
    def family(self) -> str:
        fam = self.coefficient.get("family", "trig")
        return FAMILY_ALIASES.get(fam, fam)

    @property
    def coefficient_seed(self) -> int:
        return int(self.coefficient.get("seed", self.seed))

    @property
    def contrast(self) -> float:
        return float(self.coefficient.get("contrast", 2.0**10))

    @property
    def max_m(self) -> int:
        return max(self.m, default=0)

    @property
    def sweep_nc(self) -> int:
        return int(self.m_sweep_nc if self.m_sweep_nc is not None else self.nc[0])

    def validate(self) -> None:
        if not isinstance(self.coefficient, dict) or "family" not in self.coefficient:
            raise ConfigError("coefficient must be a mapping with a 'family' key")
        if self.family not in ("multiscale_trig", "random_field", "high_contrast", "unit"):
            raise ConfigError(f"unknown coefficient family {self.coefficient['family']!r}")
        if not self.nc:
            raise ConfigError("nc list is empty")
        for nc in self.nc:
            if int(nc) < 2 or self.nf % int(nc) or self.nf // int(nc) < 2:
                raise ConfigError(f"nc={nc} must be >= 2 and divide nf={self.nf} with ratio >= 2")
        if self.m_sweep_nc is not None and (self.nf % int(self.m_sweep_nc)):
            raise ConfigError(f"m_sweep_nc={self.m_sweep_nc} does not divide nf={self.nf}")
        if any(int(m) < 0 for m in self.m):
            raise ConfigError("m values must be non-negative")
        if not set(int(k) for k in self.variants) <= {1, 2, 3}:
            raise ConfigError(f"variants must be a subset of {{1, 2, 3}}, got {self.variants}")
        if int(self.parallelism) < 1:
            raise ConfigError("parallelism must be at least 1")
        resolve_rhs(self.rhs)
        self.nc = [int(x) for x in self.nc]
        self.m = [int(x) for x in self.m]
        self.variants = [int(x) for x in self.variants]

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def coefficient_key(self) -> dict:
        """Canonical coefficient descriptor used for store directories and provenance."""
        key = {"family": self.family}
        if self.family == "random_field":
            key["seed"] = self.coefficient_seed
        if self.family == "high_contrast":
            key["contrast"] = self.contrast
        return key

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


def load_config(path: str | Path | None, **overrides) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
