"""End-to-end acceptance checks at full size (a few minutes each on one core).

Every check uses seed 0. Each test prints one PASS/FAIL line, and the lines are
repeated in the terminal summary.
"""

import json
import math

import numpy as np
import pytest
from scipy import stats

from lorentzgas import cli, rng
from lorentzgas.config import RunConfig
from lorentzgas.dynamics import CollisionCoord, DynamicsError, billiard_map, coord_distance, involution
from lorentzgas.entropy import NearSingularity, log_jac_fd
from lorentzgas.statistics import (MGFConfig, estimate_mgf, gc_ratio, green_kubo, map_sample,
                                   mean_entropy_rate, mu0_from_uniform, rate_symmetry,
                                   sample_orbits, second_difference, steady_state_residual,
                                   transient_ft_residual)
from lorentzgas.ulam import UlamGrid, bracket_check, refinement_proxy, sample_ulam, spectral_mgf

from acceptance_log import report

pytestmark = pytest.mark.slow

SEED = 0
CFG = RunConfig(seed=SEED)
A_GRID = (-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
N_LIST = (5, 10, 20, 30, 50)


def mu0_points(tag, n, table=CFG.table):
    sid, r, phi = mu0_from_uniform(table, rng.uniform_rows(SEED, tag, 0, n, 3))
    return [CollisionCoord(int(a), float(b), float(c)) for a, b, c in zip(sid, r, phi)]


@pytest.fixture(scope="module")
def srb_grid():
    cfg = MGFConfig(A_GRID, N_LIST, 100_000, "srb")
    return estimate_mgf(CFG.system(0.05), cfg, seed=SEED)


@pytest.fixture(scope="module")
def spectral():
    sys_ = CFG.system(0.05)
    coarse = spectral_mgf(A_GRID, sample_ulam(sys_, UlamGrid(64, 64), 400, SEED))
    fine = spectral_mgf(A_GRID, sample_ulam(sys_, UlamGrid(128, 128), 400, SEED))
    return coarse, fine


@pytest.fixture(scope="module")
def steady_runs():
    """SRB chains (100 x 10^5 collisions) and a stratified mu0 sample per field strength."""
    out = {}
    for eps in (0.1, 0.05, 0.025):
        sys_ = CFG.system(eps)
        ens = sample_orbits(sys_, "srb", 100 * 100, 1000, seed=SEED, n_batches=100,
                            burn_in=1000)
        mu0 = sample_ulam(sys_, UlamGrid(64, 64), 400, SEED)
        rate = mean_entropy_rate(ens, mu0.log_jac, mu0.src, mu0.box_masses(CFG.table.lengths))
        gk = green_kubo(ens.s.reshape(100, -1), j_max=50, batch_len=1000) if eps == 0.05 \
            else None
        out[eps] = (rate, gk)
    return out


def test_unforced_invariance():
    sys_ = CFG.system(0.0)
    _, (_, _, phi1), logjac, status = map_sample(sys_, "mu0", 100_000, SEED)
    ok = status == 0
    ks = stats.kstest(np.sin(phi1[ok]), "uniform", args=(-1.0, 2.0)).statistic
    crit = float(stats.kstwo.ppf(0.99, int(ok.sum())))
    s_zero = bool(np.all(logjac[ok] == 0.0))
    passed = ks < crit and s_zero and ok.sum() == 100_000
    assert report(1, "unforced invariance",
                  passed, f"KS {ks:.4g} < {crit:.4g}, s == 0: {s_zero}, kept {ok.sum()}")


def test_time_reversibility():
    sys_ = CFG.system(0.05)
    worst, skipped = 0.0, 0
    for c in mu0_points(rng.ORACLE, 10_000):
        try:
            nxt, _ = billiard_map(c, sys_)
            back, _ = billiard_map(involution(nxt), sys_)
        except DynamicsError:
            skipped += 1
            continue
        worst = max(worst, coord_distance(involution(back), c, CFG.table))
    assert report(2, "time reversibility", worst <= 1e-8,
                  f"max dist {worst:.3g} <= 1e-8, skipped {skipped}")


def test_jacobian_three_way():
    sys_ = CFG.system(0.05)
    e1, e2 = sys_.field_vector
    fd_err, ident_err, used, near = 0.0, 0.0, 0, 0
    for c in mu0_points(rng.ORACLE + 1, 2000):
        if used == 1000:
            break
        try:
            _, rec = billiard_map(c, sys_)
            fd = log_jac_fd(c, sys_)
        except (NearSingularity, DynamicsError):
            near += 1
            continue
        used += 1
        fd_err = max(fd_err, abs(rec.log_jac_total - fd))
        ident_err = max(ident_err, abs(rec.log_jac_flow + e1 * rec.dq[0] + e2 * rec.dq[1]))
    passed = used == 1000 and fd_err <= 1e-5 and ident_err <= 1e-8
    assert report(3, "Jacobian three-way agreement", passed,
                  f"{used} points, FD gap {fd_err:.3g} <= 1e-5, current identity "
                  f"{ident_err:.3g} <= 1e-8, near-singular skipped {near}")


def test_pointwise_antisymmetry():
    sys_ = CFG.system(0.05)
    worst, skipped = 0.0, 0
    for c in mu0_points(rng.ORACLE + 2, 10_000):
        try:
            nxt, rec = billiard_map(c, sys_)
            _, rec_back = billiard_map(involution(nxt), sys_)
        except DynamicsError:
            skipped += 1
            continue
        worst = max(worst, abs(rec.s + rec_back.s))
    assert report(4, "pointwise reversal antisymmetry", worst <= 1e-8,
                  f"max |s + s o i o T| {worst:.3g} <= 1e-8, skipped {skipped}")


def test_transient_fluctuation_identity():
    cfg = MGFConfig((-0.25, 0.25, 0.75, 1.25), (5, 10, 20), 100_000, "mu0")
    grid = estimate_mgf(CFG.system(0.05), cfg, seed=SEED)
    res = transient_ft_residual(grid)
    assert report(5, "transient fluctuation identity", res.passed and len(res.rows) == 6,
                  f"max normalized residual {res.max_residual:.3f} <= 3 over {len(res.rows)} "
                  f"(a, n) pairs")


def test_steady_state_symmetry(srb_grid):
    n = srb_grid.largest_stable_n()
    res = steady_state_residual(srb_grid)
    e, se = srb_grid.column(n)
    worst_indep = 0.0
    for a in (-0.25, 0.0, 0.25, 0.5):
        i, j = srb_grid.a_index(a), srb_grid.a_index(1 - a)
        comb = math.hypot(se[i], se[j])
        if e[i] != e[j]:
            worst_indep = max(worst_indep, abs(e[i] - e[j]) / comb)
    passed = res.passed and worst_indep <= 3.0
    assert report(6, "steady-state symmetry (Monte Carlo)", passed,
                  f"n = {n}: max |e(a) - e(1-a)| / stderr = {res.max_residual:.3f} "
                  f"(paired), {worst_indep:.3f} (root-sum-square)")


def test_spectral_consistency(spectral, srb_grid):
    coarse, fine = spectral
    proxy = float(refinement_proxy(coarse, fine).max())
    n = srb_grid.largest_stable_n()
    e, se = srb_grid.column(n)
    worst = max(abs(coarse.value(a) - e[srb_grid.a_index(a)]) - (proxy + 3 * se[srb_grid.a_index(a)])
                for a in A_GRID)
    lam0 = coarse.lambdas[A_GRID.index(0.0)]
    lam1 = coarse.lambdas[A_GRID.index(1.0)]
    passed = worst <= 0 and abs(lam0 - 1) <= 1e-10 and abs(math.log(lam1)) <= proxy
    assert report(7, "spectral route consistency", passed,
                  f"proxy {proxy:.3g}; worst |log lambda - e| minus tolerance {worst:.3g}; "
                  f"|lambda0 - 1| {abs(lam0 - 1):.2g}; |log lambda1| {abs(math.log(lam1)):.3g}")


def test_spectral_bracket(spectral):
    rows = []
    coarse_005 = spectral[0]
    coarse_002 = spectral_mgf(A_GRID, sample_ulam(CFG.system(0.02), UlamGrid(64, 64), 400,
                                                  SEED))
    for eps, sm in ((0.02, coarse_002), (0.05, coarse_005)):
        c_h = sm.max_abs_H
        for a in (-0.25, 0.25, 0.5, 0.75, 1.25):
            rows.append((eps, a, bracket_check(sm.results[A_GRID.index(a)], c_h, eps, a), c_h))
    passed = all(r[2] for r in rows)
    assert report(8, "spectral bracket", passed,
                  f"{sum(r[2] for r in rows)}/{len(rows)} inside; C_H {rows[0][3]:.3f} "
                  f"(eps 0.02), {rows[-1][3]:.3f} (eps 0.05)")


def test_positivity_and_gap(spectral):
    coarse, _ = spectral
    worst = min(r.positivity() for r in coarse.results)
    gap = float(coarse.gaps.min())
    assert report(9, "eigenvector positivity and gap", worst >= -1e-12 and gap > 0,
                  f"min h/max h {worst:.3g}, smallest gap {gap:.4f}")


def test_entropy_production_expansion(steady_runs):
    d = {eps: r.expansion_gap for eps, (r, _) in steady_runs.items()}
    rate = steady_runs[0.05][0]
    positive = rate.mu_s > 3 * rate.mu_s_stderr
    ratios = (d[0.1] / d[0.05], d[0.05] / d[0.025])
    passed = positive and d[0.1] > d[0.05] > d[0.025] and min(ratios) > 2.0
    detail = (f"mu(s) = {rate.mu_s:.3g} +- {rate.mu_s_stderr:.2g} at eps 0.05; "
              f"|mu(s) + eps mu0(H)| = {d[0.1]:.3g}, {d[0.05]:.3g}, {d[0.025]:.3g}; "
              f"halving ratios {ratios[0]:.2f}, {ratios[1]:.2f} > 2")
    assert report(10, "entropy production positivity and expansion", passed, detail)


def test_diffusion_consistency(steady_runs, srb_grid):
    gk = steady_runs[0.05][1]
    sd, sd_se = second_difference(srb_grid, 0.25)
    vals = {"GK": (gk.sigma2, gk.sigma2_stderr), "BM": (gk.sigma2_bm, gk.sigma2_bm_stderr),
            "e''": (sd, sd_se)}
    names = list(vals)
    worst = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            (x, sx), (y, sy) = vals[names[i]], vals[names[j]]
            worst = max(worst, abs(x - y) / math.hypot(sx, sy))
    positive = all(v > 0 for v, _ in vals.values())
    detail = ", ".join(f"{k} {v:.4g} +- {s:.2g}" for k, (v, s) in vals.items())
    assert report(11, "diffusion consistency", positive and worst <= 3.0,
                  f"{detail}; max pairwise gap {worst:.2f} combined stderr")


def test_gc_histogram_ratio():
    ens = sample_orbits(CFG.system(0.1), "srb", 1_000_000, 30, seed=SEED, n_batches=100,
                        burn_in=1000, horizons=(30,), keep_s=False)
    tab = gc_ratio(ens.sums[:, 0], 30)
    passed = bool(tab.rows) and abs(tab.slope - 1.0) <= 0.15
    assert report(12, "GC histogram ratio", passed,
                  f"slope {tab.slope:.4f} +- {tab.slope_stderr:.3f} over {len(tab.rows)} bins, "
                  f"|slope - 1| <= 0.15")


def test_rate_function_symmetry(srb_grid):
    res = rate_symmetry(srb_grid)
    assert report(13, "rate-function symmetry", res.passed,
                  f"max |I(z) - I(-z) + z| / error {res.max_ratio:.3f} <= 3 over "
                  f"{len(res.rows)} z values")


def test_reproducibility_across_workers(tmp_path):
    config = {"seed": SEED,
              "mgf": {"N_orbits": 20000, "init": "srb", "n_list": [5, 10, 20]},
              "ulam": {"grid": [32, 32], "samples_per_box": 100, "refine_grid": [48, 48]},
              "gc": {"N_orbits": 20000, "n": 20}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config))
    files = {}
    for workers in (1, 4):
        blobs = {}
        for cmd in ("mgf", "ulam", "gc"):
            out = tmp_path / f"{cmd}_{workers}"
            cli.main([cmd, "--config", str(path), "--workers", str(workers), "--out", str(out)])
            blobs.update({f"{cmd}/{p.name}": p.read_bytes() for p in sorted(out.glob("*.csv"))})
        files[workers] = blobs
    same = files[1] == files[4] and len(files[1]) >= 5
    assert report(14, "reproducibility across worker counts", same,
                  f"{len(files[1])} CSV files compared byte for byte, workers 1 vs 4")
