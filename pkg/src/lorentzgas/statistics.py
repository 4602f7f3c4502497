"""Monte Carlo estimators for the entropy production.

Orbit ensembles start from the smooth measure mu0, from Lebesgue measure on
(r, phi), or from the steady state. Steady-state windows are consecutive
segments of long chains that are burnt in once; each chain is one batch for the
batch-means error bars. On top of the ensembles sit the moment generating
function grid, the fluctuation-relation residuals, the Legendre transform, the
histogram ratio test and the diffusion coefficient estimators.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, rng
from .dynamics import BilliardSystem, CollisionCoord, DynamicsError, billiard_map
from .geometry import TableConfig
from .parallel import ordered_map

INITS = ("mu0", "srb", "lebesgue")
A0 = 0.25
_RESAMPLE_SHIFT = 40


class SamplingError(RuntimeError):
    """Too many aborted orbits while drawing a sample."""


# ---------------------------------------------------------------------------
# initial points


def _pick_scatterer(table: TableConfig, u: np.ndarray) -> np.ndarray:
    lengths = table.lengths
    sid = np.searchsorted(np.cumsum(lengths) / lengths.sum(), u, side="right")
    return np.minimum(sid, len(lengths) - 1).astype(np.int64)


def mu0_from_uniform(table: TableConfig, u: np.ndarray):
    """Map rows of three uniforms to mu0-distributed (sid, r, phi) arrays."""
    u = np.atleast_2d(u)
    sid = _pick_scatterer(table, u[:, 0])
    r = u[:, 1] * table.lengths[sid]
    phi = np.arcsin(2.0 * u[:, 2] - 1.0)
    return sid, r, phi


def lebesgue_from_uniform(table: TableConfig, u: np.ndarray):
    """Like :func:`mu0_from_uniform` but with phi uniform on (-pi/2, pi/2)."""
    u = np.atleast_2d(u)
    sid = _pick_scatterer(table, u[:, 0])
    r = u[:, 1] * table.lengths[sid]
    phi = (u[:, 2] - 0.5) * math.pi
    return sid, r, phi


def sample_mu0(gen: np.random.Generator, table: TableConfig | None = None) -> CollisionCoord:
    table = table or TableConfig.default()
    sid, r, phi = mu0_from_uniform(table, gen.random(3))
    return CollisionCoord(int(sid[0]), float(r[0]), float(phi[0]))


def _iterate(sys: BilliardSystem, sid, r, phi, nsteps: int, keep_dq: bool = False,
             keep_tau: bool = False):
    n = len(sid)
    s = np.zeros((n, nsteps))
    dq = np.zeros((n, nsteps, 2) if keep_dq else (0, 0, 2))
    tau = np.zeros((n, nsteps) if keep_tau else (0, 0))
    final = np.empty((n, 3))
    status = np.empty(n, dtype=np.int64)
    _kernels.run_orbits(np.asarray(sid, dtype=np.int64), np.asarray(r, dtype=float),
                        np.asarray(phi, dtype=float), int(nsteps), *sys.kernel_args(),
                        s, dq, tau, final, status)
    return s, dq, tau, final, status


def sample_srb(gen: np.random.Generator, sys: BilliardSystem, burn_in: int = 1000,
               max_resample: int = 100) -> CollisionCoord:
    """mu0 draw pushed forward ``burn_in`` times; aborted orbits are redrawn."""
    if burn_in < 0:
        raise ValueError("burn_in must be >= 0")
    for _ in range(max_resample + 1):
        c = sample_mu0(gen, sys.table)
        if burn_in == 0:
            return c
        *_, final, status = _iterate(sys, [c.scatterer_id], [c.r], [c.phi], burn_in)
        if status[0] == _kernels.OK:
            return CollisionCoord(int(final[0, 0]), float(final[0, 1]), float(final[0, 2]))
    raise SamplingError(f"more than {max_resample} aborted burn-in orbits")


# ---------------------------------------------------------------------------
# single orbits


@dataclass(frozen=True)
class OrbitSample:
    x0: CollisionCoord
    s_values: np.ndarray
    dq_values: np.ndarray
    discarded: bool = False

    @property
    def S(self) -> float:
        return float(np.sum(self.s_values))


def birkhoff_orbit(x0: CollisionCoord, n: int, sys: BilliardSystem) -> OrbitSample:
    """Entropy production and displacement along n collisions starting at x0."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if sys.analytic:
        s, dq, _, _, status = _iterate(sys, [x0.scatterer_id], [x0.r], [x0.phi], n,
                                       keep_dq=True)
        ok = n == 0 or status[0] == _kernels.OK
        return OrbitSample(x0, s[0], dq[0], not ok)
    s = np.zeros(n)
    dq = np.zeros((n, 2))
    c = x0
    try:
        for k in range(n):
            c, rec = billiard_map(c, sys)
            s[k] = rec.s
            dq[k] = rec.dq
    except DynamicsError:
        return OrbitSample(x0, s, dq, True)
    return OrbitSample(x0, s, dq, False)


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class OrbitEnsemble:
    """Per-orbit entropy production for ``n_orbits`` orbits of ``n_steps`` collisions.

    ``s`` holds every step when requested; ``sums`` holds the Birkhoff sums at
    ``horizons``. ``batch`` assigns orbits to contiguous batches.
    """

    init: str
    n_steps: int
    horizons: tuple[int, ...]
    sums: np.ndarray
    s: np.ndarray | None
    dq: np.ndarray | None
    batch: np.ndarray
    n_batches: int
    discarded: int

    @property
    def n_orbits(self) -> int:
        return self.sums.shape[0]

    @property
    def discarded_fraction(self) -> float:
        return self.discarded / (self.n_orbits + self.discarded)

    @property
    def flagged(self) -> bool:
        return self.discarded_fraction > 1e-4

    def batch_sizes(self) -> np.ndarray:
        return np.bincount(self.batch, minlength=self.n_batches)


def _batch_bounds(n_items: int, n_batches: int) -> np.ndarray:
    return np.array([(b * n_items) // n_batches for b in range(n_batches + 1)])


def _reduce_block(s, dq, horizons, keep_s, keep_dq):
    cs = np.cumsum(s, axis=1)
    sums = np.column_stack([cs[:, h - 1] if h > 0 else np.zeros(len(s)) for h in horizons])
    return sums, (s if keep_s else None), (dq if keep_dq else None)


def _fresh_block(sys, init, seed, start, count, nsteps, horizons, keep_s, keep_dq,
                 max_resample):
    tag, draw = (rng.MU0, mu0_from_uniform) if init == "mu0" else \
        (rng.LEBESGUE, lebesgue_from_uniform)
    u = rng.uniform_rows(seed, tag, start, count, 3)
    sid, r, phi = draw(sys.table, u)
    s, dq, _, _, status = _iterate(sys, sid, r, phi, nsteps, keep_dq)
    discards = 0
    for i in np.flatnonzero(status != _kernels.OK):
        for attempt in range(1, max_resample + 2):
            discards += 1
            if attempt > max_resample:
                raise SamplingError(f"orbit {start + i}: more than {max_resample} aborts")
            item = (attempt << _RESAMPLE_SHIFT) + start + i
            p = draw(sys.table, rng.uniform_rows(seed, tag, item, 1, 3))
            s1, dq1, _, _, st1 = _iterate(sys, *p, nsteps, keep_dq)
            if st1[0] == _kernels.OK:
                s[i] = s1[0]
                if keep_dq:
                    dq[i] = dq1[0]
                break
    return (*_reduce_block(s, dq, horizons, keep_s, keep_dq), discards)


def _chain(sys, seed, chain, n_windows, nsteps, burn_in, horizons, keep_s, keep_dq,
           max_resample):
    total = burn_in + n_windows * nsteps
    for attempt in range(max_resample + 1):
        item = (attempt << _RESAMPLE_SHIFT) + chain
        sid, r, phi = mu0_from_uniform(sys.table, rng.uniform_rows(seed, rng.SRB, item, 1, 3))
        s, dq, _, _, status = _iterate(sys, sid, r, phi, total, keep_dq)
        if status[0] == _kernels.OK:
            s = s[0, burn_in:].reshape(n_windows, nsteps)
            dq = dq[0, burn_in:].reshape(n_windows, nsteps, 2) if keep_dq else dq
            return (*_reduce_block(s, dq, horizons, keep_s, keep_dq), attempt)
    raise SamplingError(f"chain {chain}: more than {max_resample} aborts")


def sample_orbits(sys: BilliardSystem, init: str, n_orbits: int, n_steps: int, *,
                  seed: int = 0, workers: int = 1, n_batches: int = 100,
                  burn_in: int = 1000, horizons=None, keep_s: bool = True,
                  keep_dq: bool = False, max_resample: int = 100) -> OrbitEnsemble:
    """Simulate an orbit ensemble.

    For ``init="srb"`` there is one chain per batch; after ``burn_in`` collisions
    each chain is cut into consecutive windows of ``n_steps`` collisions. Random
    draws depend only on (seed, orbit or chain index), so the output does not
    depend on ``workers``.
    """
    if init not in INITS:
        raise ValueError(f"init must be one of {INITS}")
    if n_orbits < n_batches or n_batches < 1:
        raise ValueError("need n_orbits >= n_batches >= 1")
    horizons = tuple(int(h) for h in (horizons if horizons is not None else (n_steps,)))
    if any(h < 0 or h > n_steps for h in horizons):
        raise ValueError("horizons must lie in [0, n_steps]")
    bounds = _batch_bounds(n_orbits, n_batches)
    batch = np.repeat(np.arange(n_batches), np.diff(bounds))
    if init == "srb":
        def work(c):
            return _chain(sys, seed, c, int(bounds[c + 1] - bounds[c]), n_steps, burn_in,
                          horizons, keep_s, keep_dq, max_resample)
        parts = ordered_map(work, range(n_batches), workers)
    else:
        starts = range(0, n_orbits, rng.BLOCK)

        def work(start):
            return _fresh_block(sys, init, seed, start, min(rng.BLOCK, n_orbits - start),
                                n_steps, horizons, keep_s, keep_dq, max_resample)
        parts = ordered_map(work, starts, workers)
    sums = np.concatenate([p[0] for p in parts])
    s = np.concatenate([p[1] for p in parts]) if keep_s else None
    dq = np.concatenate([p[2] for p in parts]) if keep_dq else None
    return OrbitEnsemble(init, n_steps, horizons, sums, s, dq, batch, n_batches,
                         int(sum(p[3] for p in parts)))


def map_sample(sys: BilliardSystem, init: str, n: int, seed: int = 0):
    """One map application on ``n`` points drawn from ``init`` (mu0 or lebesgue).

    Returns (start, end, log_jac, status) with start/end as (sid, r, phi) arrays.
    """
    tag, draw = (rng.MU0, mu0_from_uniform) if init == "mu0" else \
        (rng.LEBESGUE, lebesgue_from_uniform)
    sid, r, phi = draw(sys.table, rng.uniform_rows(seed, tag, 0, n, 3))
    out = (np.empty(n, np.int64), np.empty(n), np.empty(n))
    logjac = np.empty(n)
    status = np.empty(n, np.int64)
    _kernels.map_points(sid, r, phi, *sys.kernel_args(), *out, logjac, status)
    return (sid, r, phi), out, logjac, status


# ---------------------------------------------------------------------------
# moment generating function


@dataclass(frozen=True)
class MGFConfig:
    a_grid: tuple[float, ...] = (-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
    n_list: tuple[int, ...] = (5, 10, 20, 30, 50)
    n_orbits: int = 100_000
    init: str = "mu0"
    n_batches: int = 100
    burn_in: int = 1000
    min_ess: float = 100.0
    a0: float = A0

    def __post_init__(self):
        object.__setattr__(self, "a_grid", tuple(float(a) for a in self.a_grid))
        object.__setattr__(self, "n_list", tuple(sorted(int(n) for n in self.n_list)))
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.n_orbits < 1000:
            raise ValueError("n_orbits must be >= 1000")
        if self.n_batches < 30:
            raise ValueError("n_batches must be >= 30")
        if not self.n_list or self.n_list[0] < 1:
            raise ValueError("n_list entries must be >= 1")
        for a in self.a_grid:
            if not -self.a0 <= a <= 1 + self.a0:
                raise ValueError(f"a outside [-a0, 1+a0]: {a}")


@dataclass(frozen=True)
class MGFGrid:
    """e_hat[i, k] = (1/n_k) log mean exp(-a_i S_{n_k}); slope[i, k] = log M_{n_k} - log M_{n_k - 1}.

    Unstable entries (effective sample size below the threshold) are NaN.
    """

    a_grid: np.ndarray
    n_list: tuple[int, ...]
    e_hat: np.ndarray
    stderr: np.ndarray
    slope: np.ndarray
    slope_stderr: np.ndarray
    stable: np.ndarray
    ess: np.ndarray
    init: str
    n_orbits: int
    n_batches: int
    discarded: int
    horizons: tuple[int, ...] = field(repr=False)
    log_m: np.ndarray = field(repr=False)
    batch_rel: np.ndarray = field(repr=False)

    def a_index(self, a: float) -> int:
        hits = np.flatnonzero(np.isclose(self.a_grid, a, rtol=0, atol=1e-12))
        if not hits.size:
            raise KeyError(f"a = {a} not on the grid")
        return int(hits[0])

    def linear(self, coeffs: dict[tuple[int, int], float]) -> tuple[float, float]:
        """Value and batch-means stderr of sum w * log M(a_i, horizon h)."""
        value = 0.0
        v = np.zeros(self.batch_rel.shape[0])
        for (i, h), w in coeffs.items():
            value += w * self.log_m[i, h]
            v += w * self.batch_rel[:, i, h]
        se = float(np.std(v, ddof=1) / math.sqrt(len(v)))
        return float(value), se

    def _h(self, n: int) -> int:
        return self.horizons.index(n)

    def e_coeffs(self, a: float, n: int, estimator: str = "slope") -> dict:
        i = self.a_index(a)
        if estimator == "slope":
            return {(i, self._h(n)): 1.0, (i, self._h(n - 1)): -1.0}
        if estimator == "mean":
            return {(i, self._h(n)): 1.0 / n}
        raise ValueError("estimator must be 'slope' or 'mean'")

    def combination(self, terms: list[tuple[float, float]], n: int,
                    estimator: str = "slope") -> tuple[float, float]:
        """Value and stderr of sum w * e(a) for ``terms`` = [(a, w), ...]."""
        coeffs: dict = {}
        for a, w in terms:
            for key, c in self.e_coeffs(a, n, estimator).items():
                coeffs[key] = coeffs.get(key, 0.0) + w * c
        return self.linear(coeffs)

    def largest_stable_n(self, estimator: str = "slope") -> int | None:
        cols = self.stable if estimator == "mean" else np.isfinite(self.slope)
        ok = [n for k, n in enumerate(self.n_list) if cols[:, k].all()]
        return ok[-1] if ok else None

    def column(self, n: int, estimator: str = "slope") -> tuple[np.ndarray, np.ndarray]:
        k = self.n_list.index(n)
        if estimator == "slope":
            return self.slope[:, k], self.slope_stderr[:, k]
        return self.e_hat[:, k], self.stderr[:, k]


def mgf_from_sums(a_grid, n_list, ens: OrbitEnsemble, min_ess: float = 100.0) -> MGFGrid:
    a_grid = np.asarray(a_grid, dtype=float)
    horizons = ens.horizons
    S = ens.sums
    bounds = np.concatenate([[0], np.cumsum(ens.batch_sizes())])
    A, H, B = len(a_grid), len(horizons), ens.n_batches
    log_m = np.empty((A, H))
    ess = np.empty((A, H))
    rel = np.empty((B, A, H))
    for i, a in enumerate(a_grid):
        w = -a * S
        shift = w.max(axis=0)
        x = np.exp(w - shift)
        m = x.mean(axis=0)
        log_m[i] = shift + np.log(m)
        ess[i] = x.sum(axis=0) ** 2 / (x * x).sum(axis=0)
        bm = np.add.reduceat(x, bounds[:-1], axis=0) / np.diff(bounds)[:, None]
        rel[:, i, :] = bm / m
    K = len(n_list)
    e_hat = np.full((A, K), np.nan)
    se = np.full((A, K), np.nan)
    slope = np.full((A, K), np.nan)
    slope_se = np.full((A, K), np.nan)
    stable = np.zeros((A, K), dtype=bool)
    grid = MGFGrid(a_grid, tuple(n_list), e_hat, se, slope, slope_se, stable, ess, ens.init,
                   ens.n_orbits, B, ens.discarded, horizons, log_m, rel)
    for i in range(A):
        for k, n in enumerate(n_list):
            h, hp = horizons.index(n), horizons.index(n - 1)
            stable[i, k] = ess[i, h] >= min_ess
            if stable[i, k]:
                e_hat[i, k], se[i, k] = grid.linear({(i, h): 1.0 / n})
                if ess[i, hp] >= min_ess:
                    slope[i, k], slope_se[i, k] = grid.linear({(i, h): 1.0, (i, hp): -1.0})
    zero = np.isclose(a_grid, 0.0, rtol=0, atol=0)
    e_hat[zero] = 0.0
    slope[zero] = 0.0
    se[zero] = 0.0
    slope_se[zero] = 0.0
    return grid


def estimate_mgf(sys: BilliardSystem, cfg: MGFConfig, seed: int = 0, workers: int = 1
                 ) -> MGFGrid:
    """Grid of MGF estimates sharing one orbit set across every a."""
    horizons = sorted(set(cfg.n_list) | {n - 1 for n in cfg.n_list})
    ens = sample_orbits(sys, cfg.init, cfg.n_orbits, max(cfg.n_list), seed=seed,
                        workers=workers, n_batches=cfg.n_batches, burn_in=cfg.burn_in,
                        horizons=horizons, keep_s=False)
    if ens.flagged:
        warnings.warn(f"discarded-orbit fraction {ens.discarded_fraction:.3g} exceeds 1e-4")
    return mgf_from_sums(cfg.a_grid, cfg.n_list, ens, cfg.min_ess)


# ---------------------------------------------------------------------------
# fluctuation relations


@dataclass(frozen=True)
class SymmetryResidual:
    """Rows (a, n, e(a) - e(1-a), stderr, |diff|/stderr) and their maximum."""

    rows: list[tuple[float, int, float, float, float]]
    max_residual: float
    skipped: bool

    @property
    def passed(self) -> bool:
        return not self.skipped and self.max_residual <= 3.0


def _pairs(a_grid) -> list[float]:
    out = []
    for a in a_grid:
        if a <= 0.5 and np.any(np.isclose(a_grid, 1.0 - a, rtol=0, atol=1e-12)):
            out.append(float(a))
    return out


def _normalized(diff: float, se: float, atol: float = 0.0) -> float:
    if abs(diff) <= atol:
        return 0.0
    return abs(diff) / se if se > 0 else math.inf


def symmetry_residual(grid: MGFGrid, n_values=None, estimator: str = "mean"
                      ) -> SymmetryResidual:
    pairs = _pairs(grid.a_grid)
    if not pairs:
        warnings.warn("symmetry check skipped: no (a, 1-a) pairs on the grid")
        return SymmetryResidual([], 0.0, True)
    rows = []
    for n in (n_values if n_values is not None else grid.n_list):
        k = grid.n_list.index(n)
        for a in pairs:
            i, j = grid.a_index(a), grid.a_index(1.0 - a)
            vals = grid.e_hat if estimator == "mean" else grid.slope
            if not (np.isfinite(vals[i, k]) and np.isfinite(vals[j, k])):
                continue
            diff, se = grid.combination([(a, 1.0), (1.0 - a, -1.0)], n, estimator)
            rows.append((a, n, diff, se, _normalized(diff, se)))
    if not rows:
        return SymmetryResidual([], math.inf, False)
    return SymmetryResidual(rows, max(r[4] for r in rows), False)


def transient_ft_residual(grid: MGFGrid, n_values=None) -> SymmetryResidual:
    """Finite-n symmetry e_n(a) = e_n(1-a), exact under mu0 initial conditions."""
    if grid.init != "mu0":
        raise ValueError("the transient identity needs mu0-initialized orbits")
    return symmetry_residual(grid, n_values, "mean")


def steady_state_residual(grid: MGFGrid, n: int | None = None) -> SymmetryResidual:
    """Symmetry of the slope estimator at the largest stable n (or at ``n``)."""
    n = n if n is not None else grid.largest_stable_n("slope")
    if n is None:
        return SymmetryResidual([], math.inf, False)
    return symmetry_residual(grid, [n], "slope")


# ---------------------------------------------------------------------------
# rate function


@dataclass(frozen=True)
class RateFunction:
    """I(z) = max over the a-grid of (-a z - e(a)); ``argmax`` indexes a_grid."""

    z_grid: np.ndarray
    I_values: np.ndarray
    argmax: np.ndarray
    z_range: tuple[float, float]
    degenerate: bool
    warning: str | None = None


def legendre(a_grid, e_values, z_grid=None, n_z: int = 101, tol: float = 1e-12
             ) -> RateFunction:
    """Discrete Legendre transform of an MGF slice.

    The default z-grid spans the finite-difference slopes of -e at the two ends
    of the a-grid. Points with no interior maximizer get I = inf.
    """
    a = np.asarray(a_grid, dtype=float)
    e = np.asarray(e_values, dtype=float)
    order = np.argsort(a)
    a, e = a[order], e[order]
    if len(a) < 2 or not np.all(np.isfinite(e)):
        raise ValueError("need at least two finite e values")
    slopes = np.diff(e) / np.diff(a)
    warning = None
    if np.any(np.diff(slopes) < -tol * max(1.0, np.abs(slopes).max())):
        warning = "e is not convex on the grid"
        warnings.warn(warning)
    z_lo, z_hi = float(-slopes[-1]), float(-slopes[0])
    degenerate = z_hi - z_lo <= tol
    if z_grid is None:
        z_grid = np.array([0.5 * (z_lo + z_hi)]) if degenerate else \
            np.linspace(z_lo, z_hi, n_z)
    z = np.asarray(z_grid, dtype=float)
    vals = -np.outer(z, a) - e[None, :]
    idx = np.argmax(vals, axis=1)
    I = vals[np.arange(len(z)), idx]
    span = max(abs(z_lo), abs(z_hi), 1.0) * 1e-12
    outside = (z < z_lo - span) | (z > z_hi + span)
    I = np.where(outside, np.inf, I)
    return RateFunction(z, I, order[idx], (z_lo, z_hi), degenerate, warning)


@dataclass(frozen=True)
class RateSymmetry:
    """Rows (z, I(z) - I(-z) + z, propagated stderr) on the overlap of z and -z."""

    rows: list[tuple[float, float, float]]
    max_ratio: float
    rate: RateFunction

    @property
    def passed(self) -> bool:
        return bool(self.rows) and self.max_ratio <= 3.0


def rate_symmetry(grid: MGFGrid, n: int | None = None, n_z: int = 41,
                  estimator: str = "slope") -> RateSymmetry:
    """Check I(z) - I(-z) = -z for the rate function of the estimated MGF.

    With a_+ and a_- the maximizers at z and -z on an a-grid closed under
    a -> 1 - a, the residual lies between e(a_-) - e(1 - a_-) and
    e(1 - a_+) - e(a_+). Its error bar is the larger batch-means stderr of
    those two differences.
    """
    pairs = _pairs(grid.a_grid)
    if 2 * len(pairs) - sum(np.isclose(pairs, 0.5)) != len(grid.a_grid):
        raise ValueError("the a-grid must be closed under a -> 1 - a")
    n = n if n is not None else grid.largest_stable_n(estimator)
    e, _ = grid.column(n, estimator)
    rate = legendre(grid.a_grid, e)
    z_lo, z_hi = rate.z_range
    half = min(-z_lo, z_hi)
    if rate.degenerate or half <= 0:
        return RateSymmetry([], 0.0, rate)
    z = np.linspace(-half, half, n_z)
    rf = legendre(grid.a_grid, e, z)
    rows = []
    worst = 0.0
    for k in range(n_z // 2 + 1, n_z):
        m = n_z - 1 - k
        res = rf.I_values[k] - rf.I_values[m] + z[k]
        a_p, a_m = grid.a_grid[rf.argmax[k]], grid.a_grid[rf.argmax[m]]
        se = max(grid.combination([(a, 1.0), (1.0 - a, -1.0)], n, estimator)[1]
                 for a in (a_p, a_m))
        rows.append((float(z[k]), float(res), se))
        # rounding floor for residuals that vanish identically (a_+ = a_- = 1/2)
        atol = 1e-12 * max(1.0, abs(rf.I_values[k]), abs(z[k]))
        worst = max(worst, _normalized(res, se, atol))
    return RateSymmetry(rows, worst, rf)


# ---------------------------------------------------------------------------
# histogram ratio


@dataclass(frozen=True)
class GCTable:
    """Rows (z, (1/n) log(P[z]/P[-z]), count at z, count at -z) and the fitted slope."""

    n: int
    width: float
    rows: list[tuple[float, float, int, int]]
    slope: float
    slope_stderr: float
    note: str | None = None


def gc_ratio(S_n: np.ndarray, n: int, width: float | None = None, min_count: int = 50
             ) -> GCTable:
    """Histogram of S_n / n in bins centred on multiples of ``width``.

    The slope is a weighted least-squares fit through the origin with
    Poisson weights.
    """
    z = np.asarray(S_n, dtype=float) / n
    if width is None:
        sd = float(np.std(z))
        width = 0.25 * sd
    if not width > 0:
        return GCTable(n, 0.0, [], math.nan, math.nan, "all mass in the z = 0 bin")
    k = np.rint(z / width).astype(np.int64)
    kmax = int(np.abs(k).max())
    counts = np.bincount(k + kmax, minlength=2 * kmax + 1)
    rows = []
    for j in range(1, kmax + 1):
        cp, cm = int(counts[kmax + j]), int(counts[kmax - j])
        if cp >= min_count and cm >= min_count:
            rows.append((j * width, math.log(cp / cm) / n, cp, cm))
    if not rows:
        return GCTable(n, width, [], math.nan, math.nan, "no populated symmetric bin pairs")
    zz = np.array([r[0] for r in rows])
    yy = np.array([r[1] for r in rows])
    var = np.array([(1.0 / r[2] + 1.0 / r[3]) / n ** 2 for r in rows])
    w = 1.0 / var
    slope = float(np.sum(w * zz * yy) / np.sum(w * zz * zz))
    se = float(1.0 / math.sqrt(np.sum(w * zz * zz)))
    return GCTable(n, width, rows, slope, se)


# ---------------------------------------------------------------------------
# diffusion and mean


@dataclass(frozen=True)
class GreenKuboResult:
    sigma2: float
    sigma2_stderr: float
    sigma2_bm: float
    sigma2_bm_stderr: float
    autocov: np.ndarray
    mean: float
    warning: str | None = None


def _chain_rows(chains) -> list[np.ndarray]:
    if isinstance(chains, np.ndarray) and chains.ndim == 2:
        return [chains[i] for i in range(chains.shape[0])]
    return [np.asarray(c, dtype=float) for c in chains]


def green_kubo(chains, j_max: int = 50, batch_len: int = 1000) -> GreenKuboResult:
    """Integrated autocovariance and batch-means variance of a stationary sequence.

    ``chains`` are independent stationary runs (rows of a 2-D array or a list).
    Error bars come from the spread of the per-chain estimates.
    """
    rows = _chain_rows(chains)
    if len(rows) < 2:
        raise ValueError("need at least two chains for error bars")
    if min(len(r) for r in rows) <= max(j_max, batch_len):
        raise ValueError("chains must be longer than j_max and batch_len")
    mean = float(np.mean(np.concatenate(rows)))
    per_cov = np.empty((len(rows), j_max + 1))
    per_bm = np.empty(len(rows))
    for c, x in enumerate(rows):
        d = x - mean
        L = len(d)
        per_cov[c] = [np.dot(d[:L - j], d[j:]) / (L - j) for j in range(j_max + 1)]
        nb = L // batch_len
        bmeans = d[:nb * batch_len].reshape(nb, batch_len).mean(axis=1)
        per_bm[c] = batch_len * np.mean(bmeans ** 2)
    weights = np.array([len(r) for r in rows], dtype=float)
    weights /= weights.sum()
    autocov = weights @ per_cov
    per_gk = per_cov[:, 0] + 2.0 * per_cov[:, 1:].sum(axis=1)
    sqrt_c = math.sqrt(len(rows))
    sigma2 = float(autocov[0] + 2.0 * autocov[1:].sum())
    se_gk = float(np.std(per_gk, ddof=1) / sqrt_c)
    se_cov = np.std(per_cov, axis=0, ddof=1) / sqrt_c
    warning = None
    tail = slice(max(1, j_max - 9), j_max + 1)
    if np.any(np.abs(autocov[tail]) > 3.0 * se_cov[tail]) and sigma2 != 0.0:
        warning = "autocovariance has not decayed below noise by j_max"
        warnings.warn(warning)
    return GreenKuboResult(sigma2, se_gk, float(weights @ per_bm),
                           float(np.std(per_bm, ddof=1) / sqrt_c), autocov, mean, warning)


def second_difference(grid: MGFGrid, h: float = 0.25, n: int | None = None,
                      estimator: str = "slope") -> tuple[float, float]:
    """(e(h) + e(-h) - 2 e(0)) / h^2 with its stderr; estimates e''(0)."""
    n = n if n is not None else grid.largest_stable_n(estimator)
    return grid.combination([(h, 1.0 / h ** 2), (-h, 1.0 / h ** 2), (0.0, -2.0 / h ** 2)],
                            n, estimator)


@dataclass(frozen=True)
class EntropyRate:
    mu_s: float
    mu_s_stderr: float
    eps_mu0_H: float
    eps_mu0_H_stderr: float

    @property
    def expansion_gap(self) -> float:
        return abs(self.mu_s + self.eps_mu0_H)


def _batch_mean_se(values: np.ndarray, batch: np.ndarray, n_batches: int) -> tuple[float, float]:
    sums = np.bincount(batch, weights=values, minlength=n_batches)
    cnt = np.bincount(batch, minlength=n_batches)
    bm = sums / cnt
    return float(values.mean()), float(np.std(bm, ddof=1) / math.sqrt(n_batches))


def stratified_mean(values: np.ndarray, strata: np.ndarray, masses: np.ndarray
                    ) -> tuple[float, float]:
    """Mass-weighted mean of per-stratum sample means and its stderr.

    The stderr treats samples inside a stratum as independent, which is
    conservative for jittered designs.
    """
    values = np.asarray(values, dtype=float)
    nb = len(masses)
    n = np.bincount(strata, minlength=nb)
    if np.any(n < 2):
        raise ValueError("every stratum needs at least two samples")
    sm = np.bincount(strata, weights=values, minlength=nb)
    sq = np.bincount(strata, weights=values * values, minlength=nb)
    mean_b = sm / n
    var_b = np.maximum(sq - n * mean_b ** 2, 0.0) / (n - 1)
    w = masses / masses.sum()
    return float(w @ mean_b), float(math.sqrt(np.sum(w ** 2 * var_b / n)))


def mean_entropy_rate(srb: OrbitEnsemble, mu0_logjac: np.ndarray, strata: np.ndarray | None = None,
                      masses: np.ndarray | None = None) -> EntropyRate:
    """Steady-state mean of s and the first-order prediction eps * mu0(H).

    eps * H = exp(log J) - 1, so the second estimate needs no epsilon. With
    ``strata``/``masses`` the mu0 sample is treated as stratified (e.g. Ulam boxes).
    """
    if srb.s is None:
        raise ValueError("the ensemble must keep per-step values")
    per_orbit = srb.s.mean(axis=1)
    mu, se = _batch_mean_se(per_orbit, srb.batch, srb.n_batches)
    eh = np.expm1(np.asarray(mu0_logjac, dtype=float))
    if strata is not None:
        m, m_se = stratified_mean(eh, strata, masses)
        return EntropyRate(mu, se, m, m_se)
    return EntropyRate(mu, se, float(eh.mean()), float(np.std(eh, ddof=1) / math.sqrt(len(eh))))
