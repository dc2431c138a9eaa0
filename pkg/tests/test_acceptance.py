"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n>: PASS|FAIL`` line with the
measured quantities, then asserts.
"""
import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid
from scipy.optimize import brentq

import kec
from kec import calib, cli, config, contact, fpsolve, macro, sgkinetic as sg, uq
from kec.contact import ContactParams
from kec.control import ControlSpec

SCEN = Path(kec.__file__).parent / "scenarios"
P = ContactParams(mu=0.5, sigma2=0.1, tau=1e-5)  # lambda = 5


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def test1_runs():
    out = {}
    for name in ("fat", "mixed", "slim"):
        cfg = config.load_config(SCEN / f"test1_{name}.toml")
        out[name] = sg.run_kinetic(cfg.kinetic_scenario(), jobs=4)
    return out


def test_1_equilibrium_fidelity(capsys):
    grid = fpsolve.Grid1D.from_spacing(500.0, 0.02)
    x = grid.x
    worst_l1, worst_pt, worst_time, ok = 0.0, 0.0, 0.0, True
    for delta in (-1.0, -0.5, 0.5, 1.0):
        t0 = time.perf_counter()
        f = cli.solve_equilibrium(P, delta, 10.0, grid)
        elapsed = time.perf_counter() - t0
        feq = contact.equilibrium_density(P, delta, 10.0, x)
        l1 = trapezoid(np.abs(f - feq), x) / trapezoid(feq, x)
        ok &= l1 < 1e-2 and elapsed < 60.0
        worst_l1, worst_time = max(worst_l1, l1), max(worst_time, elapsed)
        if abs(delta) == 1.0:
            exact = stats.gamma.pdf(x, 5.0, scale=2.0) if delta == 1.0 else stats.invgamma.pdf(x, 6.0, scale=50.0)
            pt = np.max(np.abs(f - exact)) / exact.max()
            ok &= pt < 1e-3
            worst_pt = max(worst_pt, pt)
    report(capsys, 1, ok, f"max rel L1 {worst_l1:.2e} (<1e-2), max pointwise/peak {worst_pt:.2e} (<1e-3), "
                          f"slowest case {worst_time:.1f}s (<60s)")


def test_2_conservation(capsys, test1_runs):
    rng = np.random.default_rng(2)
    grid = fpsolve.Grid1D.from_spacing(100.0, 0.05)
    fp_drift = 0.0
    for scheme in fpsolve.SCHEMES:
        for delta in (-1.0, 0.5, 1.0):
            f = rng.random(grid.n_points) * np.exp(-grid.x / 20.0)
            m = fpsolve.moments(f, grid)[1]
            g = fpsolve.fp_step(f, grid, P, delta, m, 0.1, scheme=scheme)
            fp_drift = max(fp_drift, abs(grid.volumes @ g - grid.volumes @ f) / (grid.volumes @ f))
    st = sg.initial_state(uq.build_basis(uq.UncertaintyLaw.uniform(-1, 1), 4), grid,
                          (0.97, 0.01, 0.01, 0.01), 10.0, 5.0)
    new = sg.sg_contact_step(st, P, ControlSpec("sqrtx", 5.0, 0.1), 0.1)
    sg_drift = float(np.max(np.abs(new.mode_masses() - st.mode_masses())))
    seir_drift = max(float(np.max(np.abs(r.stats["mean_rho"].sum(axis=1) - 1.0))) for r in test1_runs.values())

    grid_m = fpsolve.Grid1D.from_spacing(300.0, 0.05)
    state = sg.initial_state(uq.build_basis(uq.UncertaintyLaw.bernoulli(0.5), 1), grid_m,
                             (1.0, 0.0, 0.0, 0.0), 10.0, 5.0)
    m0 = state.nodal_moments()[1][0]
    for _ in range(10):  # T = 1
        state = sg.sg_contact_step(state, P, None, 0.1)
    mean_drift = float(np.max(np.abs(state.nodal_moments()[1][0] - m0) / m0))
    ok = fp_drift < 1e-12 and sg_drift < 1e-12 and seir_drift < 1e-9 and mean_drift < 1e-3
    report(capsys, 2, ok, f"FP step {fp_drift:.1e}, sG step {sg_drift:.1e} (<1e-12); SEIR T=150 "
                          f"{seir_drift:.1e} (<1e-9); delta=+-1 mean drift {mean_drift:.1e} (<1e-3)")


def test_3_structure(capsys):
    rng = np.random.default_rng(3)
    grid = fpsolve.Grid1D.from_spacing(60.0, 0.1)
    min_val, excess = np.inf, -np.inf
    for k in range(100):
        delta = rng.uniform(-1.0, 1.0)
        dt = 10 ** rng.uniform(-3, 0)
        m = rng.uniform(2.0, 20.0)
        f = rng.random(grid.n_points) * (rng.random(grid.n_points) < rng.uniform(0.05, 1.0))
        g = rng.random(grid.n_points)
        f1 = fpsolve.fp_step(f, grid, P, delta, m, dt, scheme=fpsolve.CHANG_COOPER)
        g1 = fpsolve.fp_step(g, grid, P, delta, m, dt, scheme=fpsolve.CHANG_COOPER)
        min_val = min(min_val, f1.min() / max(f1.max(), 1e-300))
        before = grid.volumes @ np.abs(f - g)
        after = grid.volumes @ np.abs(f1 - g1)
        excess = max(excess, after - before)
    ok = min_val >= 0.0 and excess <= 1e-10
    report(capsys, 3, ok, f"min scaled value {min_val:.1e} (>=0), max L1 change {excess:.1e} (<=1e-10) "
                          f"over 100 fields")


def test_4_spectral_convergence(capsys):
    cfg = config.load_config(SCEN / "sg_convergence.toml")
    conv = cfg.section("convergence")
    t0 = time.perf_counter()
    err = sg.sg_convergence_study(cfg.contact, cfg.grid, cfg.dt, cfg.T, conv["M_list"], conv["M_ref"],
                                  law=cfg.law, m0=10.0)
    elapsed = time.perf_counter() - t0
    e = [err[M] for M in sorted(err)]
    ratio = err[16] / err[2]
    ok = all(b < a for a, b in zip(e, e[1:])) and ratio < 1e-6 and elapsed < 300
    table = ", ".join(f"M={M}:{err[M]:.1e}" for M in sorted(err))
    report(capsys, 4, ok, f"{table}; e16/e2 {ratio:.1e} (<1e-6); {elapsed:.0f}s")


def test_5_test1_ordering(capsys, test1_runs):
    fin = {k: r.stats["mean_rho"][-1] for k, r in test1_runs.items()}
    peak = {k: r.stats["mean_rho"][:, 2].max() for k, r in test1_runs.items()}
    S = [fin[k][0] for k in ("fat", "mixed", "slim")]
    R = [fin[k][3] for k in ("fat", "mixed", "slim")]
    I = [peak[k] for k in ("fat", "mixed", "slim")]
    ok = S[0] < S[1] < S[2] and R[0] > R[1] > R[2] and I[0] > I[1] > I[2]
    report(capsys, 5, ok, "U[-1,0] / U[-.5,.5] / U[0,1]: final S " + " < ".join(f"{v:.4f}" for v in S)
           + "; final R " + " > ".join(f"{v:.4f}" for v in R) + "; peak I " + " > ".join(f"{v:.4f}" for v in I))


def test_6_closure_consistency(capsys):
    cfg = config.load_config(SCEN / "test2.toml")
    sup = {}
    for tau in (1e-1, 1e-3, 1e-5):
        _, kI, mI = cli.closure_discrepancy(cfg, tau, jobs=4)
        sup[tau] = (float(np.abs(kI - mI).max()), float(np.abs(kI - mI).max() / mI.max()))
    ok = sup[1e-3][0] < sup[1e-1][0] and sup[1e-5][1] < 0.02
    report(capsys, 6, ok, f"sup|dI|: tau=1e-1 {sup[1e-1][0]:.4e} > tau=1e-3 {sup[1e-3][0]:.4e}; "
                          f"tau=1e-5 relative {sup[1e-5][1]:.2%} (<2%)")


def _steady_mean(delta, tau, nu):
    """Self-consistent mean of the S = 1 controlled equilibrium and its 1 - alpha moment."""
    params = ContactParams(mu=0.5, sigma2=0.1, tau=tau)
    x = np.linspace(0.0, 300.0, 15001)
    spec = ControlSpec("uniform", 5.0, nu / tau)

    def density(m):
        return contact.controlled_equilibrium_density(params, delta, m, spec, x)

    m = brentq(lambda m: trapezoid(x * density(m), x) - m, 1.0, 60.0, xtol=1e-12)
    return m, trapezoid(x ** (1.0 - contact.alpha_of(delta)) * density(m), x)


def test_7_control_damping(capsys):
    cfg = config.load_config(SCEN / "test3_damping.toml")
    sc = cfg.kinetic_scenario()

    def run(spec):
        st = sg.contact_only(sc.law, sc.order, sc.params, sc.grid, sc.dt, sc.T, spec, m0=10.0,
                             scheme=sc.scheme, clip=sc.clip, coupling=sc.coupling)
        EG, _ = sg.damping_statistics(st, 5.0)
        _, Vm = uq.expectation_and_variance(uq.project(st.nodal_moments()[1][0], st.basis))
        return EG, Vm

    nus = (0.1, 1.0, 10.0)
    G = {s: [run(ControlSpec(s, 5.0, nu))[0] for nu in nus] for s in ("uniform", "sqrtx")}
    increasing = all(all(b > a for a, b in zip(g, g[1:])) for g in G.values())
    selective_lower = all(q <= u for q, u in zip(G["sqrtx"], G["uniform"]))
    bound = []
    for delta in (-1.0, 1.0):
        for tau, nu in ((1e-5, 0.1), (1e-5, 10.0), (1.0, 0.1), (1.0, 1.0), (1.0, 10.0)):
            m, m_low = _steady_mean(delta, tau, nu)
            bound.append(abs(m - 5.0) <= P.mu * nu / tau * m_low)
    _, V_off = run(None)
    _, V_uni = run(ControlSpec("uniform", 5.0, 0.01))
    _, V_sq = run(ControlSpec("sqrtx", 5.0, 0.01))
    ok = increasing and selective_lower and all(bound) and V_uni < 0.01 * V_off
    fmt = lambda g: "/".join(f"{v:.3g}" for v in g)
    report(capsys, 7, ok, f"E[G] uniform {fmt(G['uniform'])}, sqrtx {fmt(G['sqrtx'])} for nu=0.1/1/10; "
                          f"mean-to-target bound {sum(bound)}/{len(bound)}; Var[m] nu=0.01 S=1 "
                          f"{V_uni / V_off:.2%} of uncontrolled (<1%) [S=sqrt(x): {V_sq / V_off:.1%}, "
                          f"limit depends on delta]")


def test_8_macro_fixed_points(capsys):
    lam, x_T = 5.0, 5.0
    init = macro.MacroState((0.97, 0.01, 0.01, 0.01), 10.0)
    epi = sg.EpiParams(0.02, 1 / 3.32, 0.1)
    law = uq.UncertaintyLaw.bernoulli(0.5)
    worst = {}
    for sel in ("uniform", "sqrtx"):
        res = macro.run_macro_uncertain(init, epi, lam, law, ControlSpec(sel, x_T, 1e-4), dt=2e-6, T=0.02,
                                        stride=10000)
        final = res.atoms[-1, :, 4:]
        Lam = macro.atom_lambda_factors(res.deltas, lam)
        target = np.full_like(final, x_T) if sel == "uniform" else (x_T / Lam)[:, None] * np.ones_like(final)
        worst[sel] = float(np.max(np.abs(final - target) / target))
    ok = max(worst.values()) < 0.01
    report(capsys, 8, ok, f"max relative gap: S=1 to x_T {worst['uniform']:.1e}, S=sqrt(x) to x_T/Lam "
                          f"{worst['sqrtx']:.1e} (<1%)")


def test_9_calibration_round_trip(capsys):
    cfg = calib.CalibConfig()
    s = calib.load_series(SCEN / "synthetic_series.csv", population=1e4)
    fit = calib.fit_unconstrained(s, "2020-02-01", "2020-03-02", cfg, 0.5)
    tf = calib.fit_targets(s, fit, "2020-03-02", "2020-03-31", "uniform", cfg)
    e_beta, e_lam = abs(fit.beta_hat / 0.02 - 1), abs(fit.lambda_hat / 5.0 - 1)
    e_xT = float(np.max(np.abs(tf.targets / 6.0 - 1)))
    ok = e_beta < 0.05 and e_lam < 0.05 and e_xT < 0.05
    detail = f"beta err {e_beta:.1e}, lambda err {e_lam:.1e}, x_T err {e_xT:.1e} (<5%)"
    root = os.environ.get("KEC_JHU_DIR")
    if root:
        ok_real, real = _italy_checks(Path(root), cfg)
        ok &= ok_real
        detail += "; real data: " + real
    else:
        detail += "; real-data part skipped (KEC_JHU_DIR unset)"
    report(capsys, 9, ok, detail)


def _italy_checks(root, cfg):
    s = calib.load_series(root / "time_series_covid19_confirmed_global.csv", calib.JHU, "Italy",
                          calib.ITALY_POPULATION, recovered_path=root / "time_series_covid19_recovered_global.csv",
                          deaths_path=root / "time_series_covid19_deaths_global.csv")
    betas, lams, early, swaps = [], [], True, []
    for p in (0.0, 0.5, 1.0):
        fit = calib.fit_unconstrained(s, "2020-02-24", "2020-03-09", cfg, p)
        betas.append(fit.beta_hat)
        lams.append(fit.lambda_hat)
        uni = calib.fit_targets(s, fit, "2020-03-09", "2020-05-04", "uniform", cfg)
        sq = calib.fit_targets(s, fit, "2020-03-09", "2020-05-04", "sqrtx", cfg)
        early &= bool(np.all(sq.targets[:2] >= uni.targets[:2]))
        swaps.append(calib.retrospective_swap(uni, "sqrtx", cfg).peak_ratio)
    ok = all(0.0176 <= b <= 0.0226 for b in betas) and all(abs(v - 5.0) < 0.05 for v in lams) \
        and early and all(r < 1 for r in swaps)
    return ok, (f"beta {min(betas):.4f}..{max(betas):.4f}, lambda {min(lams):.3f}..{max(lams):.3f}, "
                f"early sqrtx>=uniform {early}, swap peak ratios " + "/".join(f"{r:.3f}" for r in swaps))


def _observed_order(e_coarse, e_fine, levels):
    """Order ``p`` with ``(1 - r**p) / (2**-p - r**p) = e_coarse / e_fine``, ``r = 2**-levels``."""
    ratio = e_coarse / e_fine

    def g(p):
        r = 2.0 ** (-levels * p)
        return (1 - r) / (2.0 ** -p - r) - ratio

    return brentq(g, 0.05, 8.0)


def test_10_self_convergence(capsys):
    y0 = macro.MacroState((0.97, 0.01, 0.01, 0.01), 10.0).vector()
    epi = sg.EpiParams(0.02, 1 / 3.32, 0.1)
    T, dt = 20.0, 0.5
    ref = macro.rk4_integrate(y0, epi, 1.2, dt=dt / 16, T=T)[1][-1]
    e = [np.max(np.abs(macro.rk4_integrate(y0, epi, 1.2, dt=h, T=T)[1][-1] - ref)) for h in (dt, dt / 2)]
    p_rk4 = _observed_order(e[0], e[1], 4)

    grid = fpsolve.Grid1D.from_spacing(60.0, 0.2)
    base = dict(law=uq.UncertaintyLaw.uniform(-0.5, 0.5), order=2, params=P, epi=sg.EpiParams(0.02, 0.3, 0.1),
                grid=grid, T=4.0, clip=False, stride=1)

    def final_I(h):
        return sg.run_kinetic(sg.KineticScenario(dt=h, **base)).stats["mean_rho"][-1, 2]

    h0 = 0.4
    ref_k = final_I(h0 / 8)
    ek = [abs(final_I(h) - ref_k) for h in (h0, h0 / 2)]
    p_split = _observed_order(ek[0], ek[1], 3)
    ok = 3.0 <= p_rk4 <= 5.0 and abs(p_split - 1.0) < 0.25
    report(capsys, 10, ok, f"RK4 observed order {p_rk4:.2f} (4, within a factor 2 in error ratio); "
                           f"splitting observed order {p_split:.2f} (1)")


@pytest.mark.slow
def test_4_full_scale_convergence(capsys):
    grid = fpsolve.Grid1D.from_spacing(100.0, 0.02)
    err = sg.sg_convergence_study(P, grid, 0.1, 1.0, [2, 4, 8, 16, 32], 40, m0=10.0)
    e = [err[M] for M in sorted(err)]
    assert all(b < a for a, b in zip(e, e[1:]) if a > 1e-13)
