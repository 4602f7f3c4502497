"""Command-line entry point: ``lorentzgas <command> --config path [--seed N] [--workers N] [--out dir]``.

Every command writes CSV tables (header row, 17 significant digits, trailing
sha256 line), a JSON summary, gnuplot ``.dat`` files where a curve exists, the
resolved config, and a manifest with file digests. Exit status is 0 when all
enabled checks pass, 1 when a check fails, 2 for configuration errors and 3 for
runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import math
import sys
import time
import traceback
import warnings
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, rng
from .config import ConfigError, RunConfig, parse_config, validate_config
from .dynamics import (CollisionCoord, DynamicsError, billiard_map, coord_distance,
                       involution)
from .entropy import NearSingularity, log_jac_fd
from .geometry import horizon_scan
from .statistics import (MGFConfig, estimate_mgf, gc_ratio, green_kubo, lebesgue_from_uniform,
                         legendre, map_sample, mean_entropy_rate, mu0_from_uniform,
                         rate_symmetry, sample_orbits, steady_state_residual,
                         transient_ft_residual)
from .ulam import (UlamGrid, bracket_check, export_triplets, refinement_proxy,
                   sample_ulam, spectral_bracket, spectral_mgf, ulam_matrix)

COMMANDS = ("table-check", "simulate", "mgf", "ulam", "gk", "gc", "verify")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


class Output:
    """Collects artifacts for one run inside ``out``."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        if name not in self.files:
            self.files.append(name)

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for row in rows:
            buf.write(",".join(fmt(v) for v in row) + "\n")
        body = buf.getvalue()
        digest = hashlib.sha256(body.encode()).hexdigest()
        self._write(name, body + f"# sha256 {digest}\n")

    def dat(self, name: str, columns: tuple[str, str], xs, ys) -> None:
        lines = [f"# {columns[0]} {columns[1]}"]
        lines += [f"{fmt(x)} {fmt(y)}" for x, y in zip(xs, ys)]
        self._write(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj) -> None:
        self._write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def digests(self) -> dict[str, str]:
        return {f: hashlib.sha256((self.out / f).read_bytes()).hexdigest() for f in self.files}


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    raise TypeError(f"not serializable: {type(x)}")


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


# ---------------------------------------------------------------------------
# commands


def cmd_table_check(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    h = cfg.horizon
    rep = horizon_scan(cfg.table, h.n_rays, h.max_len, seed=cfg.seed)
    eps = cfg.epsilon
    bound = rep.max_free_path + 2.0 * eps * rep.max_free_path ** 2
    out.csv("table.csv", ["scatterer", "center_x", "center_y", "radius", "length"],
            [(i, s.center[0], s.center[1], s.radius, s.length)
             for i, s in enumerate(cfg.table.scatterers)])
    out.csv("horizon.csv", ["n_rays", "max_len", "max_free_path", "min_free_path",
                            "infinite_horizon", "n_exceeding", "curved_bound"],
            [(rep.n_rays, h.max_len, rep.max_free_path, rep.min_free_path,
              rep.infinite_horizon, rep.n_exceeding, bound)])
    return not rep.infinite_horizon, {
        "max_free_path": _finite(rep.max_free_path), "min_free_path": _finite(rep.min_free_path),
        "infinite_horizon": rep.infinite_horizon, "curved_bound": _finite(bound)}


def _start_points(cfg: RunConfig, sys_, n: int) -> list[CollisionCoord]:
    sc = cfg.simulate
    if sc.init == "lebesgue":
        u = rng.uniform_rows(cfg.seed, rng.LEBESGUE, 0, n, 3)
        sid, r, phi = lebesgue_from_uniform(cfg.table, u)
    else:
        u = rng.uniform_rows(cfg.seed, rng.MU0, 0, n, 3)
        sid, r, phi = mu0_from_uniform(cfg.table, u)
    pts = [CollisionCoord(int(a), float(b), float(c)) for a, b, c in zip(sid, r, phi)]
    if sc.init != "srb":
        return pts
    burned = []
    for c in pts:
        try:
            for _ in range(sc.burn_in):
                c, _ = billiard_map(c, sys_)
        except DynamicsError:
            continue
        burned.append(c)
    return burned


def cmd_simulate(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    sys_ = cfg.system()
    sc = cfg.simulate
    rows = []
    discarded = 0
    taus = []
    s_all = []
    for k, c in enumerate(_start_points(cfg, sys_, sc.n_orbits)):
        try:
            for step in range(sc.n_steps):
                nxt, rec = billiard_map(c, sys_)
                rows.append((k, step, c.scatterer_id, c.r, c.phi, nxt.scatterer_id, nxt.r,
                             nxt.phi, rec.tau, rec.dq[0], rec.dq[1], rec.log_jac_flow,
                             rec.log_jac_twist, rec.s))
                taus.append(rec.tau)
                s_all.append(rec.s)
                c = nxt
        except DynamicsError:
            discarded += 1
    out.csv("orbits.csv", ["orbit", "step", "scatterer", "r", "phi", "next_scatterer",
                           "next_r", "next_phi", "tau", "dx", "dy", "log_jac_flow",
                           "log_jac_twist", "s"], rows)
    summary = {"collisions": len(rows), "discarded_orbits": discarded,
               "tau_min": min(taus) if taus else None, "tau_max": max(taus) if taus else None,
               "mean_s": float(np.mean(s_all)) if s_all else None}
    return discarded == 0, summary


def _mgf_outputs(grid, out: Output, prefix: str = "") -> dict:
    rows = []
    for i, a in enumerate(grid.a_grid):
        for k, n in enumerate(grid.n_list):
            rows.append((a, n, grid.e_hat[i, k], grid.stderr[i, k], grid.slope[i, k],
                         grid.slope_stderr[i, k], grid.stable[i, k],
                         grid.ess[i, grid.horizons.index(n)]))
    out.csv(f"{prefix}mgf.csv", ["a", "n", "e_hat", "stderr", "slope", "slope_stderr", "stable",
                                 "ess"], rows)
    return {"n_orbits": grid.n_orbits, "discarded": grid.discarded,
            "largest_stable_n": grid.largest_stable_n()}


def cmd_mgf(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    m = cfg.mgf
    mc = MGFConfig(m.a_grid, m.n_list, m.N_orbits, m.init, m.n_batches, m.burn_in, m.min_ess,
                   cfg.a0)
    grid = estimate_mgf(cfg.system(), mc, cfg.seed, cfg.workers)
    summary = _mgf_outputs(grid, out)
    ok = True
    checks = {}
    if m.init == "mu0":
        res = transient_ft_residual(grid)
        name = "transient_ft"
    else:
        res = steady_state_residual(grid)
        name = "steady_state_symmetry"
    if res.skipped:
        checks[name] = "skipped"
    else:
        out.csv("symmetry.csv", ["a", "n", "difference", "stderr", "normalized"], res.rows)
        checks[name] = {"max_residual": _finite(res.max_residual), "passed": res.passed}
        ok &= res.passed
    n_best = grid.largest_stable_n()
    if n_best is not None:
        e, _ = grid.column(n_best)
        out.dat("e_a.dat", ("a", "e"), grid.a_grid, e)
        rate = legendre(grid.a_grid, e)
        out.csv("rate.csv", ["z", "I"], zip(rate.z_grid, rate.I_values))
        out.dat("rate.dat", ("z", "I"), rate.z_grid, rate.I_values)
        if not res.skipped:
            rs = rate_symmetry(grid, n_best)
            out.csv("rate_symmetry.csv", ["z", "residual", "stderr"], rs.rows)
            checks["rate_symmetry"] = {"max_ratio": rs.max_ratio, "passed": rs.passed
                                       or not rs.rows}
            ok &= rs.passed or not rs.rows
        spectral = out.out / "spectral.csv"
        if spectral.exists():
            checks["consistency"] = _consistency(grid, n_best, spectral, out)
            ok &= checks["consistency"]["passed"]
    summary["checks"] = checks
    return ok, summary


def _read_csv(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def _consistency(grid, n, spectral: Path, out: Output) -> dict:
    rows = []
    ok = True
    for rec in _read_csv(spectral):
        a = float(rec["a"])
        try:
            i = grid.a_index(a)
        except KeyError:
            continue
        e, se = grid.column(n)
        proxy = float(rec["proxy"]) if rec.get("proxy") not in (None, "nan") else 0.0
        diff = float(rec["log_lambda"]) - e[i]
        tol = proxy + 3.0 * se[i]
        rows.append((a, float(rec["log_lambda"]), e[i], diff, se[i], proxy,
                     abs(diff) <= tol))
        ok &= abs(diff) <= tol
    out.csv("consistency.csv", ["a", "log_lambda", "e_hat", "difference", "stderr", "proxy",
                                "passed"], rows)
    return {"rows": len(rows), "passed": bool(ok)}


def cmd_ulam(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    u = cfg.ulam
    sys_ = cfg.system()
    samples = sample_ulam(sys_, UlamGrid(*u.grid), u.samples_per_box, cfg.seed, cfg.workers)
    coarse = spectral_mgf(u.a_grid, samples, u.tol)
    proxy = np.full(len(u.a_grid), np.nan)
    if u.refine_grid is not None:
        fine = spectral_mgf(u.a_grid, sample_ulam(sys_, UlamGrid(*u.refine_grid),
                                                  u.samples_per_box, cfg.seed, cfg.workers),
                            u.tol)
        proxy = refinement_proxy(coarse, fine)
    budget = float(np.nanmax(proxy)) if np.isfinite(proxy).any() else 0.0
    eps = sys_.epsilon
    c_h = coarse.max_abs_H
    rows = []
    ok = True
    for a, r, p in zip(coarse.a_grid, coarse.results, proxy):
        lo, hi = spectral_bracket(c_h, eps, a)
        inside = bracket_check(r, c_h, eps, a, tol=budget if a == 1.0 else None)
        pos = r.positivity()
        rows.append((a, r.lambda_a, math.log(r.lambda_a), r.residual, r.second_modulus, r.gap,
                     pos, lo, hi, inside, p))
        ok &= inside and pos >= -1e-12 and r.gap > 0 and r.residual <= max(u.tol, 1e-15)
    out.csv("spectral.csv", ["a", "lambda", "log_lambda", "residual", "second_modulus", "gap",
                             "h_min_over_max", "bracket_lo", "bracket_hi", "bracket_pass",
                             "proxy"], rows)
    out.dat("log_lambda.dat", ("a", "log_lambda"), coarse.a_grid, coarse.log_lambda)
    checks = {"bracket": all(r[9] for r in rows), "positivity": all(r[6] >= -1e-12 for r in rows),
              "gap": all(r[5] > 0 for r in rows), "proxy_budget": budget}
    if 0.0 in coarse.a_grid:
        lam0 = coarse.lambdas[list(coarse.a_grid).index(0.0)]
        checks["lambda0"] = abs(lam0 - 1.0) <= 1e-10
        ok &= checks["lambda0"]
    sym = []
    for a in coarse.a_grid:
        if a < 0.5 and np.any(np.isclose(coarse.a_grid, 1.0 - a)):
            sym.append((a, coarse.value(a) - coarse.value(1.0 - a)))
    if sym and u.refine_grid is not None:
        checks["symmetry_within_proxy"] = all(abs(d) <= budget for _, d in sym)
        ok &= checks["symmetry_within_proxy"]
    for a in u.export_a:
        export_triplets(ulam_matrix(samples, a), out.out / f"ulam_matrix_a{a:g}.csv")
        out.files.append(f"ulam_matrix_a{a:g}.csv")
    return bool(ok), {"checks": checks, "C_H": c_h, "discarded": coarse.discarded,
                      "flagged_columns": coarse.flagged_columns, "C_H_max": cfg.C_H_max,
                      "C_H_violation": c_h > cfg.C_H_max}


def cmd_gk(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    g = cfg.gk
    sys_ = cfg.system()
    n_windows = g.chain_length // g.batch_len
    ens = sample_orbits(sys_, "srb", g.n_chains * n_windows, g.batch_len, seed=cfg.seed,
                        workers=cfg.workers, n_batches=g.n_chains, burn_in=g.burn_in)
    chains = ens.s.reshape(g.n_chains, -1)
    eps = sys_.epsilon
    ok = True
    if eps == 0.0 and not np.any(chains):
        gk = None
        out.csv("gk.csv", ["quantity", "value", "stderr"],
                [("sigma2", 0.0, 0.0), ("sigma2_bm", 0.0, 0.0), ("mu_s", 0.0, 0.0),
                 ("eps_mu0_H", 0.0, 0.0)])
        return True, {"sigma2": 0.0}
    gk = green_kubo(chains, g.j_max, g.batch_len)
    mu0 = sample_ulam(sys_, UlamGrid(*g.mu0_grid), g.mu0_samples_per_box, cfg.seed, cfg.workers)
    rate = mean_entropy_rate(ens, mu0.log_jac, mu0.src, mu0.box_masses(cfg.table.lengths))
    out.csv("autocov.csv", ["j", "autocov"], enumerate(gk.autocov))
    out.dat("autocov.dat", ("j", "autocov"), range(len(gk.autocov)), gk.autocov)
    out.csv("gk.csv", ["quantity", "value", "stderr"],
            [("sigma2", gk.sigma2, gk.sigma2_stderr),
             ("sigma2_bm", gk.sigma2_bm, gk.sigma2_bm_stderr),
             ("mu_s", rate.mu_s, rate.mu_s_stderr),
             ("eps_mu0_H", rate.eps_mu0_H, rate.eps_mu0_H_stderr)])
    comb = math.hypot(gk.sigma2_stderr, gk.sigma2_bm_stderr)
    checks = {"gk_vs_bm": abs(gk.sigma2 - gk.sigma2_bm) <= 3 * comb,
              "sigma2_positive": gk.sigma2 > 0 and gk.sigma2_bm > 0,
              "entropy_positive": rate.mu_s > 3 * rate.mu_s_stderr}
    ok = all(checks.values())
    return ok, {"checks": checks, "sigma2": gk.sigma2, "sigma2_bm": gk.sigma2_bm,
                "mu_s": rate.mu_s, "eps_mu0_H": rate.eps_mu0_H,
                "discarded": ens.discarded}


def cmd_gc(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    g = cfg.gc
    ens = sample_orbits(cfg.system(), "srb", g.N_orbits, g.n, seed=cfg.seed,
                        workers=cfg.workers, n_batches=g.n_chains, burn_in=g.burn_in,
                        horizons=(g.n,), keep_s=False)
    tab = gc_ratio(ens.sums[:, 0], g.n, g.bin_width, g.min_count)
    out.csv("gc.csv", ["z", "log_ratio", "count_z", "count_minus_z"], tab.rows)
    out.dat("gc.dat", ("z", "log_ratio"), [r[0] for r in tab.rows], [r[1] for r in tab.rows])
    ok = True if not tab.rows else abs(tab.slope - 1.0) <= g.slope_tolerance
    return ok, {"slope": _finite(tab.slope), "slope_stderr": _finite(tab.slope_stderr),
                "bin_width": tab.width, "note": tab.note, "discarded": ens.discarded}


def cmd_verify(cfg: RunConfig, out: Output) -> tuple[bool, dict]:
    v = cfg.verify
    tol = v.tolerances
    sys_ = cfg.system()
    rows = []

    def record(name, value, threshold, passed):
        rows.append((name, value, threshold, bool(passed)))

    def points(tag, n):
        sid, r, phi = mu0_from_uniform(cfg.table, rng.uniform_rows(cfg.seed, tag, 0, n, 3))
        return [CollisionCoord(int(a), float(b), float(c)) for a, b, c in zip(sid, r, phi)]

    # reversibility and pointwise antisymmetry
    rev = 0.0
    anti = 0.0
    skipped = 0
    pts = points(rng.ORACLE, max(v.n_reversibility, v.n_antisymmetry))
    for k, c in enumerate(pts):
        try:
            nxt, rec = billiard_map(c, sys_)
            back, rec_b = billiard_map(involution(nxt), sys_)
        except DynamicsError:
            skipped += 1
            continue
        if k < v.n_reversibility:
            rev = max(rev, coord_distance(involution(back), c, cfg.table))
        if k < v.n_antisymmetry:
            anti = max(anti, abs(rec.s + rec_b.s))
    reversible = cfg.twist.type == "identity" or rev <= tol.reversibility
    record("reversibility", rev, tol.reversibility, rev <= tol.reversibility)
    if reversible:
        record("antisymmetry", anti, tol.antisymmetry, anti <= tol.antisymmetry)
    # Jacobian routes: kernel (flow + twist), finite differences, current identity
    jac = 0.0
    ident = 0.0
    near = 0
    e1, e2 = sys_.field_vector
    for c in points(rng.ORACLE + 16, v.n_jacobian):
        try:
            _, rec = billiard_map(c, sys_)
            fd = log_jac_fd(c, sys_)
        except (NearSingularity, DynamicsError):
            near += 1
            continue
        jac = max(jac, abs(rec.log_jac_total - fd))
        ident = max(ident, abs(rec.curv_integral + e1 * rec.dq[0] + e2 * rec.dq[1]))
    record("jacobian_fd", jac, tol.jacobian_fd, jac <= tol.jacobian_fd)
    record("current_identity", ident, tol.current_identity, ident <= tol.current_identity)
    # invariance of mu0 for the unforced map
    free = cfg.system(epsilon=0.0)
    (_, _, _), (_, _, phi1), logjac0, st0 = map_sample(free, "mu0", v.n_invariance, cfg.seed)
    ok0 = st0 == 0
    u = np.sin(phi1[ok0])
    ks = stats.kstest(u, "uniform", args=(-1.0, 2.0)).statistic
    crit = float(stats.kstwo.ppf(0.99, int(ok0.sum())))
    record("mu0_invariance_ks", ks, crit, ks < crit)
    record("unforced_entropy_max", float(np.max(np.abs(logjac0[ok0]))), 0.0,
           np.all(logjac0[ok0] == 0.0))
    # transient fluctuation identity
    a_grid = sorted(set(v.ft_a_grid) | {0.0})
    mc = MGFConfig(tuple(a_grid), v.ft_n_list, v.ft_N_orbits, "mu0", a0=cfg.a0)
    grid = estimate_mgf(sys_, mc, cfg.seed, cfg.workers)
    if reversible:
        ft = transient_ft_residual(grid)
        if not ft.skipped:
            record("transient_ft", ft.max_residual, tol.ft_residual,
                   ft.max_residual <= tol.ft_residual)
    # eigenvector positivity
    samples = sample_ulam(sys_, UlamGrid(*v.ulam_grid), v.ulam_samples_per_box, cfg.seed,
                          cfg.workers)
    sm = spectral_mgf(cfg.ulam.a_grid, samples)
    worst = min(r.positivity() for r in sm.results)
    record("h_positivity", worst, -tol.positivity, worst >= -tol.positivity)
    record("spectral_gap_min", float(sm.gaps.min()), 0.0, sm.gaps.min() > 0)
    out.csv("verify.csv", ["check", "value", "threshold", "passed"], rows)
    summary = {"checks": {r[0]: bool(r[3]) for r in rows}, "near_singular_skipped": near,
               "aborted_orbits": skipped}
    if not reversible:
        warnings.warn("twist is not reversible; symmetry checks skipped")
    return all(r[3] for r in rows), summary


HANDLERS = {"table-check": cmd_table_check, "simulate": cmd_simulate, "mgf": cmd_mgf,
            "ulam": cmd_ulam, "gk": cmd_gk, "gc": cmd_gc, "verify": cmd_verify}


def run(command: str, cfg: RunConfig, out_dir) -> int:
    """Execute one command and write all artifacts; returns the exit status."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}")
    out = Output(Path(out_dir))
    resolved = cfg.to_dict()
    resolved.pop("workers")  # execution detail; results do not depend on it
    out.json("resolved_config.json", resolved)
    start = time.perf_counter()
    error = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            ok, summary = HANDLERS[command](cfg, out)
            status = 0 if ok else 1
        except (DynamicsError, ValueError, RuntimeError) as exc:
            ok, summary, status = False, {}, 3
            error = {"type": type(exc).__name__, "message": str(exc),
                     "traceback": traceback.format_exc()}
    notes = list(dict.fromkeys(str(w.message) for w in caught))
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    summary = {"command": command, "passed": bool(ok), "warnings": notes, **summary}
    out.json("summary.json", summary)
    manifest = {"command": command, "version": __version__, "seed": cfg.seed,
                "workers": cfg.workers, "wall_time_s": time.perf_counter() - start,
                "resolved_config": cfg.to_dict(), "exit_status": status,
                "discarded": summary.get("discarded"), "error": error,
                "files": out.digests(),
                "rng": "numpy Philox4x64-10 keyed by (seed, stream, block of 1024 items)"}
    (out.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=_jsonable) + "\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorentzgas", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=None, help="override the worker count")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None or args.workers is not None:
            cfg = dataclasses.replace(
                cfg, seed=cfg.seed if args.seed is None else args.seed,
                workers=cfg.workers if args.workers is None else args.workers)
            validate_config(cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status = run(args.command, cfg, args.out)
    print(f"{args.command}: {'ok' if status == 0 else 'FAILED'} (exit {status}) -> {args.out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
