"""Billiard table on the unit torus: circular scatterers, boundary frames, validation."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, rng


class TableError(ValueError):
    """Raised when a table violates a geometric constraint."""


@dataclass(frozen=True)
class Scatterer:
    center: tuple[float, float]
    radius: float

    @property
    def length(self) -> float:
        return 2.0 * math.pi * self.radius


@dataclass(frozen=True)
class TableConfig:
    """Ordered circular scatterers on the unit torus."""

    scatterers: tuple[Scatterer, ...]

    def __post_init__(self):
        object.__setattr__(self, "scatterers", tuple(self.scatterers))

    @classmethod
    def default(cls) -> TableConfig:
        return cls((Scatterer((0.0, 0.0), 0.4), Scatterer((0.5, 0.5), 0.2)))

    @property
    def total_boundary_length(self) -> float:
        return sum(s.length for s in self.scatterers)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.scatterers], dtype=float)

    def centers_array(self) -> np.ndarray:
        wrapped = [torus_wrap(s.center) for s in self.scatterers]
        return np.array(wrapped, dtype=float).reshape(-1, 2)

    def radii_array(self) -> np.ndarray:
        return np.array([s.radius for s in self.scatterers], dtype=float)

    def to_dict(self) -> dict:
        return {"scatterers": [{"center": list(s.center), "radius": s.radius}
                               for s in self.scatterers]}


@dataclass(frozen=True)
class BoundaryFrame:
    position: tuple[float, float]
    normal: tuple[float, float]
    tangent: tuple[float, float]


@dataclass(frozen=True)
class HorizonReport:
    max_free_path: float
    min_free_path: float
    infinite_horizon: bool
    n_rays: int
    n_exceeding: int


def torus_wrap(p) -> tuple[float, float]:
    x, y = p
    x = x % 1.0
    y = y % 1.0
    # -1e-17 % 1.0 rounds to 1.0
    return (0.0 if x >= 1.0 else x, 0.0 if y >= 1.0 else y)


def torus_displacement(p, q) -> tuple[float, float]:
    """Minimal-image vector from p to q, components in [-0.5, 0.5)."""
    d = []
    for a, b in zip(p, q):
        v = (b - a + 0.5) % 1.0 - 0.5
        d.append(v)
    return (d[0], d[1])


def boundary_point(s: Scatterer, r: float) -> BoundaryFrame:
    """Frame at arclength r; r = 0 on the +x axis, r increasing clockwise."""
    om = -(r % s.length) / s.radius
    n = (math.cos(om), math.sin(om))
    pos = (s.center[0] + s.radius * n[0], s.center[1] + s.radius * n[1])
    return BoundaryFrame(pos, n, (n[1], -n[0]))


def validate_table(t: TableConfig) -> list[str]:
    """List every violated constraint; an empty list means the table is usable."""
    problems = []
    for i, s in enumerate(t.scatterers):
        if not s.radius > 0:
            problems.append(f"nonpositive radius: scatterer {i} has radius {s.radius}")
        elif s.radius >= 0.5:
            problems.append(f"radius >= 0.5: scatterer {i} has radius {s.radius}")
    for i in range(len(t.scatterers)):
        for j in range(i + 1, len(t.scatterers)):
            a, b = t.scatterers[i], t.scatterers[j]
            d = math.hypot(*torus_displacement(a.center, b.center))
            if d <= a.radius + b.radius:
                problems.append(f"scatterer overlap: {i} and {j} "
                                f"(distance {d:.6g} <= {a.radius + b.radius:.6g})")
    return problems


def check_table(t: TableConfig) -> None:
    problems = validate_table(t)
    if problems:
        raise TableError("; ".join(problems))


def horizon_scan(t: TableConfig, n_rays: int, max_len: float, seed: int = 0) -> HorizonReport:
    """Cast straight rays from random boundary points in uniformly random outgoing
    directions and record the longest free path.

    A ray longer than ``max_len`` is taken as evidence of an open corridor.
    """
    check_table(t)
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    if not t.scatterers:
        return HorizonReport(math.inf, math.inf, True, n_rays, n_rays)
    u = rng.uniform_rows(seed, rng.HORIZON, 0, n_rays, 3)
    lengths = t.lengths
    sid = np.searchsorted(np.cumsum(lengths) / lengths.sum(), u[:, 0], side="right")
    sid = np.minimum(sid, len(lengths) - 1).astype(np.int64)
    r = u[:, 1] * lengths[sid]
    phi = (u[:, 2] - 0.5) * math.pi
    out = np.empty(n_rays)
    _kernels.straight_free_paths(sid, r, phi, t.centers_array(), t.radii_array(),
                                 float(max_len), out)
    exceeding = int(np.count_nonzero(~np.isfinite(out)))
    finite = out[np.isfinite(out)]
    tmax = math.inf if exceeding else float(finite.max())
    tmin = float(finite.min()) if finite.size else math.inf
    return HorizonReport(tmax, tmin, exceeding > 0, n_rays, exceeding)


@functools.lru_cache(maxsize=32)
def free_path_bounds(t: TableConfig, n_rays: int = 20000) -> tuple[float, float]:
    """(tau_min, tau_max) estimates used for default step sizes and flight limits."""
    rep = horizon_scan(t, n_rays, 50.0, seed=0)
    if rep.infinite_horizon:
        raise TableError("infinite horizon: a straight ray exceeded 50 without a collision")
    return rep.min_free_path, rep.max_free_path
