"""Ulam discretization of the weighted transfer operator.

Boxes are uniform in (r, u) with u = sin(phi), so within a scatterer every box
carries the same mu0 mass. Column i of the matrix M_a is the average over
stratified samples x in box i of J(x)^a * 1{T x in box j}, where J is the mu0
Jacobian of the map. Changing variables in the operator with weight J^(a-1)
gives this column convention: at a = 0 the matrix is column-stochastic, and at
a = 1 it maps the vector of box masses to itself in expectation. The sample set
is shared by all a, so M_a for different a differ only through the weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels, rng
from .dynamics import BilliardSystem
from .parallel import ordered_map


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class UlamGrid:
    """``n_r`` x ``n_u`` boxes on every scatterer (r fastest-varying last)."""

    n_r: int = 64
    n_u: int = 64

    def n_boxes(self, n_scatterers: int) -> int:
        return n_scatterers * self.n_r * self.n_u

    def box_index(self, lengths: np.ndarray, sid, r, phi) -> np.ndarray:
        sid = np.asarray(sid)
        ir = np.floor(np.asarray(r) / lengths[sid] * self.n_r).astype(np.int64)
        iu = np.floor((np.sin(phi) + 1.0) * 0.5 * self.n_u).astype(np.int64)
        ir = np.clip(ir, 0, self.n_r - 1)
        iu = np.clip(iu, 0, self.n_u - 1)
        return (sid * self.n_r + ir) * self.n_u + iu

    def box_origin(self, lengths: np.ndarray, box: np.ndarray):
        """(sid, r_lo, dr, u_lo, du) for each box index."""
        iu = box % self.n_u
        ir = (box // self.n_u) % self.n_r
        sid = box // (self.n_u * self.n_r)
        dr = lengths[sid] / self.n_r
        du = 2.0 / self.n_u
        return sid, ir * dr, dr, -1.0 + iu * du, du

    def mirror(self, n_scatterers: int) -> np.ndarray:
        """Box permutation induced by the involution phi -> -phi."""
        b = np.arange(self.n_boxes(n_scatterers))
        iu = b % self.n_u
        return b - iu + (self.n_u - 1 - iu)


@dataclass(frozen=True)
class UlamSamples:
    """One map application for every stratified sample, kept valid-only.

    ``src``/``dst`` are box indices and ``log_jac`` the log mu0-Jacobian.
    """

    grid: UlamGrid
    n_boxes: int
    samples_per_box: int
    src: np.ndarray = field(repr=False)
    dst: np.ndarray = field(repr=False)
    log_jac: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    epsilon: float = 0.0

    @property
    def discarded(self) -> np.ndarray:
        return self.samples_per_box - self.valid

    @property
    def flagged_columns(self) -> np.ndarray:
        return np.flatnonzero(self.discarded > 0.01 * self.samples_per_box)

    def box_masses(self, lengths: np.ndarray) -> np.ndarray:
        """mu0 mass of every box (boxes are uniform in (r, sin phi))."""
        lengths = np.asarray(lengths, dtype=float)
        per = self.grid.n_r * self.grid.n_u
        return np.repeat(lengths / lengths.sum() / per, per)

    def max_abs_H(self) -> float:
        """Largest |H| = |J - 1| / eps over the sample set (0 when eps = 0)."""
        if self.epsilon == 0.0 or not self.log_jac.size:
            return 0.0
        return float(np.max(np.abs(np.expm1(self.log_jac))) / self.epsilon)


@dataclass(frozen=True)
class UlamMatrix:
    a: float
    matrix: sp.csr_matrix = field(repr=False)
    samples_per_box: int
    discarded: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class SpectralResult:
    lambda_a: float
    h_a: np.ndarray = field(repr=False)
    residual: float
    second_modulus: float
    iterations: int

    @property
    def gap(self) -> float:
        return self.lambda_a - self.second_modulus

    def positivity(self) -> float:
        """min(h) / max(h); the eigenvector is a positive measure when this is >= -1e-12."""
        return float(self.h_a.min() / self.h_a.max())


def _strata(spb: int) -> int:
    k = math.isqrt(spb)
    if k * k != spb:
        raise ValueError("samples_per_box must be a perfect square for stratification")
    return k


def _sample_block(sys, grid, seed, start, count, spb, k):
    lengths = sys.table.lengths
    box = np.arange(start, start + count)
    sid, r_lo, dr, u_lo, du = grid.box_origin(lengths, box)
    u = rng.uniform_rows(seed, rng.ULAM, start, count, 2 * spb).reshape(count, spb, 2)
    cell = np.arange(spb)
    jr = (cell // k + u[:, :, 0]) / k
    ju = (cell % k + u[:, :, 1]) / k
    r = (r_lo[:, None] + jr * dr[:, None]).ravel()
    uu = (u_lo[:, None] + ju * du).ravel()
    phi = np.arcsin(np.clip(uu, -1.0, 1.0))
    sids = np.repeat(sid, spb).astype(np.int64)
    out_sid = np.empty(count * spb, np.int64)
    out_r = np.empty(count * spb)
    out_phi = np.empty(count * spb)
    logjac = np.empty(count * spb)
    status = np.empty(count * spb, np.int64)
    _kernels.map_points(sids, r, phi, *sys.kernel_args(), out_sid, out_r, out_phi, logjac,
                        status)
    ok = status == _kernels.OK
    src = np.repeat(box, spb)[ok]
    dst = grid.box_index(lengths, out_sid[ok], out_r[ok], out_phi[ok])
    valid = ok.reshape(count, spb).sum(axis=1)
    return src.astype(np.int32), dst.astype(np.int32), logjac[ok], valid


def sample_ulam(sys: BilliardSystem, grid: UlamGrid = UlamGrid(), samples_per_box: int = 400,
                seed: int = 0, workers: int = 1) -> UlamSamples:
    """Map ``samples_per_box`` jittered-stratified points from every box once."""
    if samples_per_box < 100:
        raise ValueError("samples_per_box must be >= 100")
    k = _strata(samples_per_box)
    nb = grid.n_boxes(len(sys.table.scatterers))

    def work(start):
        return _sample_block(sys, grid, seed, start, min(rng.BLOCK, nb - start),
                             samples_per_box, k)
    parts = ordered_map(work, range(0, nb, rng.BLOCK), workers)
    return UlamSamples(grid, nb, samples_per_box,
                       np.concatenate([p[0] for p in parts]),
                       np.concatenate([p[1] for p in parts]),
                       np.concatenate([p[2] for p in parts]),
                       np.concatenate([p[3] for p in parts]),
                       float(sys.epsilon))


def ulam_matrix(samples: UlamSamples, a: float) -> UlamMatrix:
    if np.any(samples.valid == 0):
        raise ValueError("a box has no valid samples")
    w = np.exp(a * samples.log_jac) / samples.valid[samples.src]
    m = sp.coo_matrix((w, (samples.dst, samples.src)),
                      shape=(samples.n_boxes, samples.n_boxes)).tocsr()
    m.sum_duplicates()
    return UlamMatrix(float(a), m, samples.samples_per_box, int(samples.discarded.sum()))


def build_ulam(sys: BilliardSystem, a: float, grid: UlamGrid = UlamGrid(),
               samples_per_box: int = 400, seed: int = 0, workers: int = 1) -> UlamMatrix:
    return ulam_matrix(sample_ulam(sys, grid, samples_per_box, seed, workers), a)


def _as_operator(M):
    if isinstance(M, UlamMatrix):
        return M.matrix
    return sp.csr_matrix(np.asarray(M, dtype=float)) if not sp.issparse(M) else M.tocsr()


def _power(A, v, tol, max_iters):
    v = v / np.abs(v).sum()
    history = []
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = A @ v
        lam = float(np.abs(w).sum())
        if lam == 0.0:
            return 0.0, v, 0.0, it
        res = float(np.abs(w - lam * v).sum())
        history.append(res / lam)
        v = w / lam
        if res <= tol * lam:
            break
    else:
        raise ConvergenceError(f"power iteration did not converge in {max_iters} steps",
                               history)
    return lam, v, history[-1], it


def leading_eig(M, tol: float = 1e-10, max_iters: int = 100_000,
                deflation_iters: int = 2000) -> SpectralResult:
    """Leading eigenpair of a nonnegative matrix by power iteration.

    The second modulus is the asymptotic growth rate of power iteration on the
    complement of the leading eigenvector (projection along the left eigenvector).
    """
    A = _as_operator(M)
    n = A.shape[0]
    lam, h, res, iters = _power(A, np.full(n, 1.0 / n), tol, max_iters)
    if lam == 0.0:
        return SpectralResult(0.0, h, 0.0, 0.0, iters)
    _, left, _, _ = _power(A.T.tocsr(), np.full(n, 1.0 / n), tol, max_iters)
    proj = left / float(left @ h)

    def deflate(x):
        return x - h * float(proj @ x)

    x = deflate(np.cos(np.arange(n) * 0.7071) + 0.1)
    norms = []
    for _ in range(deflation_iters):
        nx = np.abs(x).sum()
        if nx == 0.0 or nx < 1e-300:
            norms.append(0.0)
            break
        x = deflate(A @ (x / nx))
        norms.append(np.abs(x).sum())
    tail = np.array(norms[len(norms) // 2:])
    second = 0.0 if np.any(tail == 0.0) else float(np.exp(np.mean(np.log(tail))))
    return SpectralResult(lam, h, res, second, iters)


@dataclass(frozen=True)
class SpectralMGF:
    a_grid: np.ndarray
    results: list[SpectralResult] = field(repr=False)
    max_abs_H: float
    discarded: int
    flagged_columns: int

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lambda_a for r in self.results])

    @property
    def log_lambda(self) -> np.ndarray:
        return np.log(self.lambdas)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.results])

    def value(self, a: float) -> float:
        i = int(np.flatnonzero(np.isclose(self.a_grid, a, rtol=0, atol=1e-12))[0])
        return float(self.log_lambda[i])


def spectral_mgf(a_grid, samples: UlamSamples, tol: float = 1e-10) -> SpectralMGF:
    """log lambda_a for each a from one shared sample set."""
    a_grid = np.asarray(a_grid, dtype=float)
    results = [leading_eig(ulam_matrix(samples, a), tol) for a in a_grid]
    return SpectralMGF(a_grid, results, samples.max_abs_H(), int(samples.discarded.sum()),
                       len(samples.flagged_columns))


def refinement_proxy(coarse: SpectralMGF, fine: SpectralMGF) -> np.ndarray:
    """|log lambda_a(coarse) - log lambda_a(fine)| per a."""
    if not np.allclose(coarse.a_grid, fine.a_grid):
        raise ValueError("a-grids differ")
    return np.abs(coarse.log_lambda - fine.log_lambda)


def spectral_bracket(c_h: float, epsilon: float, a: float) -> tuple[float, float]:
    """[(1 - sgn(a-1) C eps)^(a-1), (1 + sgn(a-1) C eps)^(a-1)] for the leading eigenvalue."""
    sgn = float(np.sign(a - 1.0))
    lo_base = 1.0 - sgn * c_h * epsilon
    hi_base = 1.0 + sgn * c_h * epsilon
    if a != 1.0 and min(lo_base, hi_base) <= 0.0:
        raise ValueError("C_H * eps must be < 1")
    return lo_base ** (a - 1.0), hi_base ** (a - 1.0)


def bracket_check(res: SpectralResult, c_h: float, epsilon: float, a: float,
                  tol: float | None = None) -> bool:
    """Leading eigenvalue inside the bracket, widened by the eigen-residual (or ``tol``)."""
    lo, hi = spectral_bracket(c_h, epsilon, a)
    slack = res.residual * res.lambda_a if tol is None else tol
    slack = max(slack, 1e-12)
    return lo - slack <= res.lambda_a <= hi + slack


def export_triplets(M: UlamMatrix, path) -> None:
    """Write (column i, row j, value) rows with 17 significant digits and a sha256 line."""
    coo = M.matrix.tocoo()
    order = np.lexsort((coo.row, coo.col))
    lines = ["column,row,value"]
    lines += [f"{int(coo.col[k])},{int(coo.row[k])},{coo.data[k]:.17g}" for k in order]
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w", newline="") as fh:
        fh.write(body + f"# sha256 {digest}\n")
