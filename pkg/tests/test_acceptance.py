"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion lines are
printed in the terminal summary.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from backward_mfg.cli import main
from backward_mfg.model import TimeGrid, coupling_weights, reference_example
from backward_mfg.pathsim import simulate_agents, synthesize
from backward_mfg.riccati import build_game_riccatis
from backward_mfg.verify import (
    convergence_sweep, decoupling_residual, fbsde_residual, gain_coincidence_check, mode_gain_difference,
    nested_increments, optimality_gap,
)

from conftest import ACCEPTANCE_LINES

EPS = [-0.2, -0.1, -0.05, 0.05, 0.1, 0.2]


def report(number, title, checks):
    """checks: list of (label, passed, detail)."""
    ok = all(passed for _, passed, _ in checks)
    detail = "; ".join(f"{label}: {d}" + ("" if passed else " [FAIL]") for label, passed, d in checks)
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_riccati_closed_form():
    p = reference_example(A=0.0, C=0.0, Gamma1=0.0, Q=1.0, B=2.0, R=5.0, T=1.0)
    exact = 0.894427 * math.tanh(0.894427)
    closed = math.sqrt(0.8) * math.tanh(math.sqrt(0.8))
    start = time.perf_counter()
    sigma0 = build_game_riccatis(p, TimeGrid(1.0, 1000)).Sigma[0][0, 0]
    elapsed = time.perf_counter() - start
    errs = [abs(build_game_riccatis(p, TimeGrid(1.0, s)).Sigma[0][0, 0] - closed) for s in (20, 40)]
    ratio = errs[0] / errs[1]
    report(1, "Riccati closed form and RK4 order", [
        ("|Sigma(0)-0.894427 tanh(0.894427)|", abs(sigma0 - exact) <= 1e-6, f"{abs(sigma0 - exact):.2e}"),
        ("error ratio", abs(ratio - 16) <= 0.2 * 16, f"{ratio:.3f}"),
        ("runtime", elapsed < 1.0, f"{elapsed:.3f}s"),
    ])


def test_criterion_2_boundary_identities():
    p = reference_example()
    grid = TimeGrid(1.0, 1000)
    syn = synthesize(p, "game", grid)
    b = syn.bundle
    q = 1 - 0.5 / 30
    pi0, m0, zeta0 = -2 * q * q, -2 * q * 0.5, 2 * q * 1.0
    report(2, "boundary identities", [
        ("Sigma(T)=K(T)=0 bitwise", not b.Sigma[-1].any() and not b.K[-1].any(), "exact"),
        ("Pi(0)", abs(b.Pi[0][0, 0] - pi0) <= 1e-14, f"{b.Pi[0][0, 0]:.15f}"),
        ("M(0)", abs(b.M[0][0, 0] - m0) <= 1e-14, f"{b.M[0][0, 0]:.15f}"),
        ("E zeta(0)", abs(syn.Ezeta[0][0] - zeta0) <= 1e-14, f"{syn.Ezeta[0][0]:.15f}"),
        ("Pi(0) ~ -1.933889", abs(b.Pi[0][0, 0] + 1.933889) <= 5e-7, f"{b.Pi[0][0, 0]:.6f}"),
    ])


def test_criterion_3_decoupling_consistency():
    p = reference_example()
    grid = TimeGrid(1.0, 2000)
    start = time.perf_counter()
    derived = decoupling_residual(simulate_agents(synthesize(p, "game", grid), range(30), seed=2024))
    elapsed = time.perf_counter() - start
    printed = decoupling_residual(
        simulate_agents(synthesize(p, "game", grid, phat_variant="printed"), range(30), seed=2024))
    report(3, "decoupling consistency", [
        ("derived residual", derived.sup <= 1e-6 * (1 + derived.sup_phat), f"{derived.sup:.2e} (sup|phat| {derived.sup_phat:.3f})"),
        ("printed variant residual (record)", True, f"{printed.sup:.3e}"),
        ("runtime", elapsed < 30, f"{elapsed:.1f}s"),
    ])


def test_criterion_4_fbsde_residual():
    p = reference_example()
    kappa = 1.0
    stats = []
    for steps in (500, 1000, 2000):
        grid = TimeGrid(1.0, steps)
        dW = nested_increments(7, range(200), grid, 2000 // steps)
        stats.append(fbsde_residual(simulate_agents(synthesize(p, "game", grid), range(200), seed=7, dW=dW)))
    bound = all(s.rms <= kappa * s.dt for s in stats)
    ratios = [a.defect_rms / b.defect_rms for a, b in zip(stats, stats[1:])]
    step_ratios = [a.rms / b.rms for a, b in zip(stats, stats[1:])]
    report(4, "FBSDE residual", [
        ("per-step rms <= dt", bound, ", ".join(f"{s.rms / s.dt:.3f} dt" for s in stats)),
        ("accumulated defect halving ratio", all(abs(r - 2) <= 0.6 for r in ratios), ", ".join(f"{r:.3f}" for r in ratios)),
        ("per-step rms ratio (record)", True, ", ".join(f"{r:.3f}" for r in step_ratios)),
    ])


def test_criterion_5_terminal_exactness(two_dim, two_dim_social):
    cases = [
        ("example game", reference_example(), "game", {}),
        ("example social", reference_example(Gamma1=-0.5, Gamma0=-0.5), "social", {}),
        ("2-d game", two_dim, "game", {}),
        ("2-d social", two_dim_social, "social", {}),
        ("euler", reference_example(), "game", {"method": "euler"}),
        ("printed variant", reference_example(), "game", {"phat_variant": "printed"}),
    ]
    checks = []
    for label, p, mode, kw in cases:
        ens = simulate_agents(synthesize(p, mode, TimeGrid(1.0, 300), **kw), range(p.N), seed=1)
        gap = np.abs(ens.x[:, -1] - ens.xi).max()
        checks.append((label, gap == 0.0, f"{gap:.1e}"))
    report(5, "terminal exactness", checks)


def test_criterion_6_optimality():
    p = reference_example()
    grid = TimeGrid(1.0, 1000)
    start = time.perf_counter()
    syn = synthesize(p, "game", grid)
    table = optimality_gap(p, "game", 1.0, EPS, grid, synthesis=syn)
    elapsed = time.perf_counter() - start
    population = optimality_gap(p, "game", 1.0, EPS, grid, synthesis=syn, estimator="population", seed=1)
    zero = reference_example(Q=0.0, G=0.0, H=0.0, f=0.0, eta1=0.0, eta0=0.0, alpha=0.0, c=0.0)
    dj = optimality_gap(zero, "game", 1.0, [0.1], TimeGrid(1.0, 1000)).dJ[0]
    limit = 0.05 * table.q * max(abs(e) for e in EPS)
    report(6, "optimality", [
        ("fit residual", table.fit_residual <= 1e-10, f"{table.fit_residual:.1e}"),
        ("|l| <= 0.05 q max|eps|", abs(table.l) <= limit, f"l={table.l:.2e}, bound {limit:.2e}"),
        ("q > 0", table.q > 0, f"{table.q:.6f}"),
        ("zero-weight dJ(0.1)", abs(dj - 0.025) <= 1e-15, f"{float(dj)!r}"),
        ("one-population realised l (record)", True, f"{population.l:.3e} over {population.samples} agents"),
        ("runtime", elapsed < 60, f"{elapsed:.1f}s"),
    ])


def test_criterion_7_convergence_rates():
    p = reference_example(C=0.0, Gamma1=-0.5, Gamma0=-0.5)
    start = time.perf_counter()
    rep = convergence_sweep(p, [10, 30, 100, 300, 1000], TimeGrid(1.0, 1000), paths=200, seed=0)
    elapsed = time.perf_counter() - start
    f = rep.fits
    report(7, "convergence rates", [
        ("Sigma slope", abs(f["sigma_sup"].slope + 1) <= 0.15, f"{f['sigma_sup'].slope:.4f}"),
        ("Pi slope", abs(f["pi_sup"].slope + 1) <= 0.15, f"{f['pi_sup'].slope:.4f}"),
        ("phi slope", abs(f["phi_sq"].slope + 2) <= 0.2, f"{f['phi_sq'].slope:.4f}"),
        ("x slope", abs(f["x_sq"].slope + 2) <= 0.2, f"{f['x_sq'].slope:.4f}"),
        ("zeta slope", f["zeta_sq"].slope <= -1 + 0.2, f"{f['zeta_sq'].slope:.4f}"),
        ("runtime", elapsed < 300, f"{elapsed:.1f}s"),
    ])


def test_criterion_8_gain_coincidence():
    p = reference_example(C=0.0, Gamma1=-0.5, Gamma0=-0.5)
    check = gain_coincidence_check(p, TimeGrid(1.0, 2000))
    mode_gap = mode_gain_difference(reference_example(Gamma1=0.0, Gamma0=0.0), TimeGrid(1.0, 2000))
    report(8, "gain coincidence", [
        ("sup|MTilde + PiBar - MBar|", check.identity_gap <= 1e-8, f"{check.identity_gap:.2e}"),
        ("game vs social gains at zero coupling", mode_gap <= 1e-10, f"{mode_gap:.2e}"),
    ])


def test_criterion_9_reproduction(tmp_path):
    runs = []
    elapsed = []
    for k, workers in enumerate((1, 4)):
        out = tmp_path / f"run{k}"
        start = time.perf_counter()
        code = main(["reproduce-paper", "--out", str(out), "--seed", "0", "--workers", str(workers)])
        elapsed.append(time.perf_counter() - start)
        runs.append((code, out))
    a, b = runs[0][1], runs[1][1]
    figures = ["riccati.svg", "zeta.svg", "state.svg", "control.svg"]
    tables = ["riccati.csv", "bsde.csv", "paths.csv", "costs.csv", "summary.csv", "manifest.json"]
    present = all((a / f).exists() for f in figures + tables)
    match, mismatch, errors = filecmp.cmpfiles(a, b, figures + tables, shallow=False)
    report(9, "reproduction", [
        ("exit codes", runs[0][0] == 0 and runs[1][0] == 0, f"{runs[0][0]}, {runs[1][0]}"),
        ("runtime", max(elapsed) <= 60, f"{max(elapsed):.1f}s"),
        ("four figures and tables", present, f"{len(figures)} figures, {len(tables)} tables"),
        ("byte-identical across 1 and 4 threads", not mismatch and not errors, f"{len(match)} identical"),
    ])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
