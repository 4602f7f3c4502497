"""Run configuration: strict JSON parsing into frozen dataclasses."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dynamics import (AngleTwist, BilliardSystem, IdentityTwist, NoForce,
                       ThermostattedConstantField)
from .geometry import Scatterer, TableConfig, validate_table


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or constraint."""


@dataclass(frozen=True)
class ForceConfig:
    type: str = "constant"
    E: tuple[float, float] = (0.05, 0.0)


@dataclass(frozen=True)
class TwistConfig:
    type: str = "identity"
    beta: float = 0.0


@dataclass(frozen=True)
class HorizonConfig:
    n_rays: int = 100_000
    max_len: float = 10.0


@dataclass(frozen=True)
class SimulateConfig:
    n_orbits: int = 10
    n_steps: int = 1000
    init: str = "mu0"
    burn_in: int = 1000


@dataclass(frozen=True)
class MGFBlock:
    a_grid: tuple[float, ...] = (-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    n_list: tuple[int, ...] = (5, 10, 20, 30, 50)
    N_orbits: int = 100_000
    init: str = "mu0"
    n_batches: int = 100
    burn_in: int = 1000
    min_ess: float = 100.0


@dataclass(frozen=True)
class UlamBlock:
    grid: tuple[int, int] = (64, 64)
    samples_per_box: int = 400
    a_grid: tuple[float, ...] = (-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    refine_grid: tuple[int, int] | None = (128, 128)
    tol: float = 1e-10
    export_a: tuple[float, ...] = ()


@dataclass(frozen=True)
class GKBlock:
    n_chains: int = 100
    chain_length: int = 100_000
    burn_in: int = 1000
    j_max: int = 50
    batch_len: int = 1000
    mu0_grid: tuple[int, int] = (64, 64)
    mu0_samples_per_box: int = 400


@dataclass(frozen=True)
class GCBlock:
    n: int = 30
    N_orbits: int = 1_000_000
    n_chains: int = 100
    burn_in: int = 1000
    bin_width: float | None = None
    min_count: int = 50
    slope_tolerance: float = 0.15


@dataclass(frozen=True)
class VerifyTolerances:
    reversibility: float = 1e-8
    jacobian_fd: float = 1e-5
    current_identity: float = 1e-8
    antisymmetry: float = 1e-8
    ft_residual: float = 3.0
    positivity: float = 1e-12


@dataclass(frozen=True)
class VerifyBlock:
    n_reversibility: int = 10_000
    n_jacobian: int = 1000
    n_invariance: int = 100_000
    n_antisymmetry: int = 10_000
    ft_N_orbits: int = 100_000
    ft_n_list: tuple[int, ...] = (5, 10, 20)
    ft_a_grid: tuple[float, ...] = (-0.25, 0.25, 0.5, 0.75, 1.25)
    ulam_grid: tuple[int, int] = (32, 32)
    ulam_samples_per_box: int = 100
    tolerances: VerifyTolerances = field(default_factory=VerifyTolerances)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    table: TableConfig = field(default_factory=TableConfig.default)
    force: ForceConfig = field(default_factory=ForceConfig)
    twist: TwistConfig = field(default_factory=TwistConfig)
    epsilon_max: float = 0.2
    a0: float = 0.25
    C_H_max: float = 50.0
    grazing_cut: float = 1e-9
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    mgf: MGFBlock = field(default_factory=MGFBlock)
    ulam: UlamBlock = field(default_factory=UlamBlock)
    gk: GKBlock = field(default_factory=GKBlock)
    gc: GCBlock = field(default_factory=GCBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)

    @property
    def epsilon(self) -> float:
        return math.hypot(*self.force.E) if self.force.type == "constant" else 0.0

    def system(self, epsilon: float | None = None) -> BilliardSystem:
        """The billiard system; ``epsilon`` rescales the field keeping its direction."""
        if self.force.type == "none":
            f = NoForce()
        else:
            e1, e2 = self.force.E
            if epsilon is not None:
                norm = math.hypot(e1, e2)
                e1, e2 = ((epsilon, 0.0) if norm == 0 else
                          (epsilon * e1 / norm, epsilon * e2 / norm))
            f = ThermostattedConstantField(e1, e2)
        tw = IdentityTwist() if self.twist.type == "identity" else AngleTwist(self.twist.beta)
        return BilliardSystem(self.table, f, tw, grazing_cut=self.grazing_cut)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["table"] = self.table.to_dict()
        return d


_TUPLE_FIELDS = {"E", "a_grid", "n_list", "grid", "refine_grid", "export_a", "ft_n_list",
                 "ft_a_grid", "ulam_grid", "mu0_grid"}


def _check_number(path: str, value, kind: str):
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected {kind}, got boolean")
    if kind == "int":
        if not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer")
        return value
    if not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected number")
    return float(value)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown key '{path}{key}'")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        key = f"{path}{name}"
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, key + ".")
        elif name in _TUPLE_FIELDS:
            if value is None and name == "refine_grid":
                kwargs[name] = None
                continue
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list")
            sample = current[0] if current else 0.0
            kind = "int" if isinstance(sample, int) and not isinstance(sample, bool) \
                else "float"
            kwargs[name] = tuple(_check_number(f"{key}[{i}]", v, kind)
                                 for i, v in enumerate(value))
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{key}: expected a string")
            kwargs[name] = value
        elif current is None:
            kwargs[name] = None if value is None else _check_number(key, value, "float")
        elif isinstance(current, int) and not isinstance(current, bool):
            kwargs[name] = _check_number(key, value, "int")
        else:
            kwargs[name] = _check_number(key, value, "float")
    return cls(**kwargs)


def _table(data: Any) -> TableConfig:
    if not isinstance(data, dict):
        raise ConfigError("table: expected a JSON object")
    for key in data:
        if key != "scatterers":
            raise ConfigError(f"unknown key 'table.{key}'")
    items = data.get("scatterers")
    if not isinstance(items, list):
        raise ConfigError("table.scatterers: expected a list")
    out = []
    for i, s in enumerate(items):
        path = f"table.scatterers[{i}]"
        if not isinstance(s, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for key in s:
            if key not in ("center", "radius"):
                raise ConfigError(f"unknown key '{path}.{key}'")
        if "center" not in s or "radius" not in s:
            raise ConfigError(f"{path}: needs 'center' and 'radius'")
        c = s["center"]
        if not isinstance(c, list) or len(c) != 2:
            raise ConfigError(f"{path}.center: expected [x, y]")
        cx = _check_number(f"{path}.center[0]", c[0], "float")
        cy = _check_number(f"{path}.center[1]", c[1], "float")
        out.append(Scatterer((cx, cy), _check_number(f"{path}.radius", s["radius"], "float")))
    return TableConfig(tuple(out))


def _a_range(cfg: RunConfig, path: str, grid) -> None:
    for a in grid:
        if not -cfg.a0 <= a <= 1.0 + cfg.a0:
            raise ConfigError(f"{path}: a outside [-a0, 1+a0] = [{-cfg.a0}, {1 + cfg.a0}]: {a}")


def validate_config(cfg: RunConfig) -> None:
    problems = validate_table(cfg.table)
    if problems:
        raise ConfigError("table: " + "; ".join(problems))
    if cfg.force.type not in ("none", "constant"):
        raise ConfigError("force.type: must be 'none' or 'constant'")
    if len(cfg.force.E) != 2:
        raise ConfigError("force.E: expected two components")
    if cfg.epsilon > cfg.epsilon_max:
        raise ConfigError(f"force.E: epsilon = {cfg.epsilon:g} exceeds epsilon_max = "
                          f"{cfg.epsilon_max:g}")
    if cfg.twist.type not in ("identity", "angle"):
        raise ConfigError("twist.type: must be 'identity' or 'angle'")
    if cfg.twist.type == "angle" and not abs(cfg.twist.beta) < 1.0 / math.pi:
        raise ConfigError(f"twist.beta: |beta| must be < 1/pi, got {cfg.twist.beta:g}")
    if cfg.a0 <= 0:
        raise ConfigError("a0: must be > 0")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed: must be a 64-bit unsigned integer")
    _a_range(cfg, "mgf.a_grid", cfg.mgf.a_grid)
    _a_range(cfg, "ulam.a_grid", cfg.ulam.a_grid)
    _a_range(cfg, "verify.ft_a_grid", cfg.verify.ft_a_grid)
    for name, init in (("mgf.init", cfg.mgf.init), ("simulate.init", cfg.simulate.init)):
        if init not in ("mu0", "srb", "lebesgue"):
            raise ConfigError(f"{name}: must be one of mu0, srb, lebesgue")
    if cfg.mgf.N_orbits < 1000:
        raise ConfigError("mgf.N_orbits: must be >= 1000")
    if cfg.mgf.n_batches < 30:
        raise ConfigError("mgf.n_batches: must be >= 30")
    if any(n < 1 for n in cfg.mgf.n_list) or not cfg.mgf.n_list:
        raise ConfigError("mgf.n_list: entries must be >= 1")
    for name, spb in (("ulam.samples_per_box", cfg.ulam.samples_per_box),
                      ("gk.mu0_samples_per_box", cfg.gk.mu0_samples_per_box),
                      ("verify.ulam_samples_per_box", cfg.verify.ulam_samples_per_box)):
        if spb < 100 or math.isqrt(spb) ** 2 != spb:
            raise ConfigError(f"{name}: must be a perfect square >= 100")
    for name, g in (("ulam.grid", cfg.ulam.grid), ("ulam.refine_grid", cfg.ulam.refine_grid),
                    ("verify.ulam_grid", cfg.verify.ulam_grid),
                    ("gk.mu0_grid", cfg.gk.mu0_grid)):
        if g is not None and (len(g) != 2 or min(g) < 1):
            raise ConfigError(f"{name}: expected two positive box counts")
    if cfg.horizon.n_rays < 1:
        raise ConfigError("horizon.n_rays: must be >= 1")
    if cfg.gc.n < 1 or cfg.gc.N_orbits < cfg.gc.n_chains:
        raise ConfigError("gc: need n >= 1 and N_orbits >= n_chains")
    if cfg.gk.n_chains < 2 or cfg.gk.chain_length <= max(cfg.gk.j_max, cfg.gk.batch_len):
        raise ConfigError("gk: need n_chains >= 2 and chain_length > max(j_max, batch_len)")


def parse_config_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    data = dict(data)
    table = _table(data.pop("table")) if "table" in data else TableConfig.default()
    cfg = _build(RunConfig, data, "")
    cfg = dataclasses.replace(cfg, table=table)
    validate_config(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    """Read, validate and resolve a JSON config file."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config_dict(data)
