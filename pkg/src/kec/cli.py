"""Command-line runner: ``kec <subcommand> --config scenario.toml``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 failed ``--assert`` check.  ``KEC_LOG`` sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, calib, contact, fpsolve, macro, sgkinetic, uq
from .config import ConfigError, load_config, parse_override
from .control import OFF, ControlSpec

log = logging.getLogger("kec")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSERT = 0, 2, 3, 4


class AssertionFailure(Exception):
    """An ``--assert`` check did not hold."""


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def header_line(cfg):
    return f"# kec {__version__} config_sha256={cfg.sha256}"


def write_csv(path, cfg, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(header_line(cfg) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    log.info("wrote %s", path)
    return path


def write_json(path, cfg, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"kec": __version__, "config_sha256": cfg.sha256, **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s", path)
    return path


def _check(ok, message):
    if not ok:
        raise AssertionFailure(message)
    log.info("check passed: %s", message)


# equilibrium ---------------------------------------------------------------


def tail_exponent(lam, delta):
    """Power of the algebraic tail ``x**a`` of the ``delta < 0`` equilibrium.

    For ``-1 < delta < 0`` the factor ``exp(-b x**delta)`` still bends the
    log-log slope on practical domains, so only ``delta = -1`` is checked.
    """
    return lam / delta - 2.0 + 0.5 * (1.0 + delta)


def fitted_tail_slope(x, f, lo_frac=0.5, hi_frac=0.9):
    """Least-squares slope of ``log f`` against ``log x`` on a band of the domain."""
    band = (x >= lo_frac * x[-1]) & (x <= hi_frac * x[-1]) & (f > 0)
    slope, _ = np.polyfit(np.log(x[band]), np.log(f[band]), 1)
    return float(slope)


def solve_equilibrium(params, delta, m, grid, dt=0.1, n_steps=20):
    """Relax a Gamma(2) profile of mean ``m`` with the mean held at ``m``."""
    x = grid.x
    f0 = stats.gamma.pdf(x, 2.0, scale=m / 2.0)
    f0 /= grid.volumes @ f0
    return fpsolve.relax(f0, grid, params, delta, dt, n_steps, m_frozen=m, scheme=fpsolve.CHANG_COOPER)


def cmd_equilibrium(cfg, args):
    eq = cfg.section("equilibrium")
    deltas = eq.get("deltas", [-1.0, -0.5, 0.5, 1.0])
    m = float(eq.get("m", 10.0))
    params, grid = cfg.contact, cfg.grid
    x, vol = grid.x, grid.volumes
    rows, summary = [], []
    for d in deltas:
        f = solve_equilibrium(params, d, m, grid, eq.get("dt", 0.1), eq.get("n_steps", 20))
        feq = contact.equilibrium_density(params, d, m, x)
        l1 = float(vol @ np.abs(f - feq) / (vol @ feq))
        slope = fitted_tail_slope(x, f) if d < 0 else float("nan")
        expected = tail_exponent(params.lam, d) if d < 0 else float("nan")
        summary.append((d, l1, slope, expected))
        rows.extend((xi, d, a, b) for xi, a, b in zip(x, feq, f))
        log.info("delta=%g L1=%.3e", d, l1)
    out = Path(args.out_dir)
    write_csv(out / "equilibrium.csv", cfg, ["x", "delta", "analytic", "solved"], rows)
    write_csv(out / "equilibrium_summary.csv", cfg, ["delta", "l1_rel", "tail_slope", "tail_expected"], summary)
    if args.check:
        for d, l1, slope, expected in summary:
            _check(l1 < 1e-2, f"delta={d}: relative L1 {l1:.3e} < 1e-2")
            if d == -1:
                _check(abs(slope - expected) <= 0.05 * abs(expected),
                       f"delta={d}: tail slope {slope:.3f} within 5% of {expected:.3f}")


# kinetic -------------------------------------------------------------------


def _series_rows(times, stats_):
    for k, t in enumerate(times):
        for j, name in enumerate(sgkinetic.COMPARTMENTS):
            for key in sgkinetic.STATS:
                yield t, name, key, stats_[key][k, j]


def _damping_sweep(cfg, args):
    dmp = cfg.section("damping")
    sc = cfg.kinetic_scenario()
    x_T = float(dmp.get("x_T", cfg.control.x_T[0]))
    m0 = sc.m0[0]

    def run(control):
        st = sgkinetic.contact_only(sc.law, sc.order, sc.params, sc.grid, sc.dt, sc.T, control, m0=m0,
                                    init_lam=sc.init_lam, scheme=sc.scheme, clip=sc.clip,
                                    coupling=sc.coupling)
        EG, VG = sgkinetic.damping_statistics(st, x_T)
        _, m = st.nodal_moments()
        Em, Vm = uq.expectation_and_variance(uq.project(m[0], st.basis))
        return EG, VG, Em, Vm

    rows = [(OFF, 0.0) + run(None)]
    for sel in dmp.get("selectives", ["uniform", "sqrtx"]):
        for nu in dmp.get("nus", [0.1, 1.0, 10.0]):
            rows.append((sel, float(nu)) + run(ControlSpec(sel, x_T, nu)))
            log.info("damping %s nu=%g E[G]=%.4g", sel, nu, rows[-1][2])
    write_csv(Path(args.out_dir) / "damping.csv", cfg,
              ["selective", "nu", "mean_G", "var_G", "mean_m", "var_m"], rows)
    if args.check:
        by = {}
        for sel, nu, EG, *_ in rows[1:]:
            by.setdefault(sel, []).append((nu, EG))
        for sel, vals in by.items():
            vals.sort()
            _check(all(a[1] < b[1] for a, b in zip(vals, vals[1:])), f"{sel}: E[G] increases with nu")
        if "uniform" in by and "sqrtx" in by:
            u, s = dict(by["uniform"]), dict(by["sqrtx"])
            for nu in sorted(set(u) & set(s)):
                _check(s[nu] <= u[nu], f"nu={nu}: sqrtx E[G] <= uniform E[G]")


def cmd_kinetic(cfg, args):
    if cfg.section("damping"):
        return _damping_sweep(cfg, args)
    sc = cfg.kinetic_scenario()
    res = sgkinetic.run_kinetic(sc, jobs=args.jobs)
    out = Path(args.out_dir)
    write_csv(out / "timeseries.csv", cfg, ["t", "J", "stat", "value"], _series_rows(res.times, res.stats))
    stride = int(cfg.section("output").get("snapshot_stride", 1))
    basis = uq.build_basis(sc.law, sc.order)
    for t, coeffs in res.snapshots:
        rows = ((sc.grid.x[i], k, name, coeffs[j, k, i])
                for j, name in enumerate(sgkinetic.COMPARTMENTS)
                for k in range(basis.n_modes) for i in range(0, sc.grid.n_points, stride))
        write_csv(out / f"snapshot_t{t:g}.csv", cfg, ["x", "mode", "J", "value"], rows)
    mass = res.stats["mean_rho"].sum(axis=1)
    log.info("kinetic done: %d records, clip passes %d, mass drift %.2e", res.times.size, res.clip_count,
             np.abs(mass - mass[0]).max())
    if args.check:
        _check(np.abs(mass - mass[0]).max() < 1e-9, "total mass conserved to 1e-9")


# sg-convergence ------------------------------------------------------------


def cmd_sg_convergence(cfg, args):
    conv = cfg.section("convergence")
    M_list = conv.get("M_list", [2, 4, 6, 8, 12, 16])
    M_ref = conv.get("M_ref", 20)
    init = cfg.section("init")
    errors = sgkinetic.sg_convergence_study(
        cfg.contact, cfg.grid, cfg.dt, cfg.T, M_list, M_ref, law=cfg.law,
        scheme=cfg.section("solver").get("scheme", fpsolve.CENTRAL),
        m0=float(init.get("m", 10.0)) if not isinstance(init.get("m"), list) else float(init["m"][0]),
        init_lam=init.get("lam"))
    write_csv(Path(args.out_dir) / "convergence.csv", cfg, ["M", "error"], sorted(errors.items()))
    if args.check:
        errs = [errors[M] for M in sorted(errors)]
        _check(all(b < a for a, b in zip(errs, errs[1:])), "error strictly decreasing in M")


# macro / closure -------------------------------------------------------------


def _macro_initial(cfg):
    init = cfg.section("init")
    return macro.MacroState(init.get("rho", [0.97, 0.01, 0.01, 0.01]), init.get("m", 10.0))


def _macro_lam(cfg):
    lam = cfg.section("init").get("lam")
    return float(cfg.contact.lam if lam is None else lam)


def run_macro(cfg, dt=None, stride=None):
    control = cfg.control if cfg.control.active else None
    return macro.run_macro_uncertain(_macro_initial(cfg), cfg.epi, _macro_lam(cfg), cfg.law, control,
                                     dt or cfg.dt, cfg.T, stride=stride or cfg.stride)


def cmd_macro(cfg, args):
    res = run_macro(cfg)
    out = Path(args.out_dir)
    write_csv(out / "macro.csv", cfg, ["t", *macro.FIELDS], (np.r_[t, y] for t, y in zip(res.times, res.mean)))
    write_csv(out / "macro_atoms.csv", cfg, ["t", "delta", *macro.FIELDS],
              (np.r_[t, d, res.atoms[k, a]] for k, t in enumerate(res.times) for a, d in enumerate(res.deltas)))
    if args.check:
        drift = np.abs(res.atoms[..., :4].sum(axis=-1) - 1.0).max()
        _check(drift < 1e-10, f"mass drift {drift:.2e} < 1e-10")


def closure_discrepancy(cfg, tau, jobs=1):
    """Kinetic and macro expected ``rho_I`` on a common time grid."""
    sc = cfg.kinetic_scenario(params=contact.ContactParams(cfg.contact.mu, cfg.contact.sigma2, tau))
    kin = sgkinetic.run_kinetic(sc, jobs=jobs)
    macro_dt = float(cfg.section("closure").get("macro_dt", 0.05))
    record_dt = sc.stride * sc.dt
    k = int(round(record_dt / macro_dt))
    if abs(k * macro_dt - record_dt) > 1e-9:
        raise ConfigError("closure.macro_dt must divide time.stride * time.dt")
    mac = run_macro(cfg, macro_dt, k)
    n = min(kin.times.size, mac.times.size)
    if not np.allclose(kin.times[:n], mac.times[:n]):
        raise ConfigError("kinetic and macro records do not share a time grid")
    kI, mI = kin.stats["mean_rho"][:n, 2], mac.mean[:n, 2]
    return kin.times[:n], kI, mI


def cmd_closure_check(cfg, args):
    taus = cfg.section("closure").get("taus", [1e-1, 1e-3])
    rows, series = [], []
    for tau in taus:
        t, kI, mI = closure_discrepancy(cfg, tau, args.jobs)
        sup = float(np.abs(kI - mI).max())
        rows.append((tau, sup, sup / float(mI.max())))
        series.extend((ti, tau, a, b) for ti, a, b in zip(t, kI, mI))
        log.info("tau=%g sup|dI|=%.4e", tau, sup)
    out = Path(args.out_dir)
    write_csv(out / "closure.csv", cfg, ["tau", "sup_abs", "sup_rel"], rows)
    write_csv(out / "closure_series.csv", cfg, ["t", "tau", "rho_I_kinetic", "rho_I_macro"], series)
    if args.check:
        ordered = sorted(rows, key=lambda r: -r[0])
        _check(all(b[1] < a[1] for a, b in zip(ordered, ordered[1:])),
               "discrepancy strictly decreases with tau")


# calibrate -----------------------------------------------------------------


def _series(cfg, args, base):
    c = cfg.section("calibration")
    data = args.data or c.get("data")
    if data is None:
        raise ConfigError("calibration needs a data file (--data or calibration.data)")
    path = Path(data)
    if args.data is not None and path.is_dir():
        # a data directory holds the file names listed in the config
        base, path = path, path / c.get("data", "")
    elif not path.is_absolute() and args.data is None:
        path = base / path

    def rel(key):
        v = c.get(key)
        return None if v is None else str(base / v if not Path(v).is_absolute() else v)

    return calib.load_series(str(path), c.get("format", calib.SIMPLE), c.get("region", ""),
                             c.get("population"), recovered_path=rel("recovered"), deaths_path=rel("deaths"),
                             infected_kind=c.get("infected_kind", "active"))


def _read_json(path, what, hint):
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}; {hint}")
    with open(path) as fh:
        return json.load(fh)


def cmd_calibrate(cfg, args):
    c = cfg.section("calibration")
    ccfg = cfg.calib_config()
    base = Path(cfg.source).parent if cfg.source != "<memory>" else Path(".")
    out = Path(args.out_dir)
    fit_path = Path(args.fit) if args.fit else out / "fit.json"
    selectives = [args.selective] if args.selective else c.get("selective", ["uniform", "sqrtx"])
    if isinstance(selectives, str):
        selectives = [selectives]
    if args.stage == "pre":
        series = _series(cfg, args, base)
        p = args.p if args.p is not None else c.get("p", 0.5)
        fit = calib.fit_unconstrained(series, c.get("t0", series.dates[0]), c["tL"], ccfg, p)
        write_json(fit_path, cfg, {"stage": "pre", "fit": fit.to_dict()})
        log.info("beta=%.6g lambda=%.6g objective=%.3e", fit.beta_hat, fit.lambda_hat, fit.objective)
        if args.check:
            _check(fit.converged, "pre-lockdown fit converged")
        return
    if args.stage == "targets":
        doc = _read_json(fit_path, "pre-lockdown fit", "run `kec calibrate --stage pre` first or pass --fit")
        fit = calib.FitResult.from_dict(doc["fit"])
        series = _series(cfg, args, base)
        for sel in selectives:
            tf = calib.fit_targets(series, fit, c["tL"], c.get("tf", series.dates[-1]), sel, ccfg)
            rows = ((w.start, w.x_T, w.cost_total, w.cost[0], w.cost[1], w.cost[3]) for w in tf.windows)
            write_csv(out / f"targets_{sel}.csv", cfg,
                      ["window_start", "x_T", "cost_total", "cost_S", "cost_E", "cost_R"], rows)
            write_json(out / f"targets_{sel}.json", cfg, {"stage": "targets", "target_fit": tf.to_dict()})
        return
    # retro
    p_list = [args.p] if args.p is not None else c.get("p_list", [0.0, 0.5, 1.0])
    rows = []
    for sel in selectives:
        doc = _read_json(out / f"targets_{sel}.json", f"{sel} targets",
                         "run `kec calibrate --stage targets` first")
        tfit = calib.TargetFit.from_dict(doc["target_fit"])
        for swap in selectives:
            if swap == sel:
                continue
            for p in p_list:
                base_run = calib.retrospective_swap(tfit, sel, ccfg, p)
                res = calib.retrospective_swap(tfit, swap, ccfg, p)
                rows.append((p, sel, swap, base_run.peak, res.peak, res.peak / base_run.peak))
    write_csv(out / "retro_peaks.csv", cfg, ["p", "fitted_with", "swapped_to", "peak_fitted", "peak_swapped",
                                             "ratio"], rows)


# entry point -----------------------------------------------------------------

COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "kinetic": cmd_kinetic,
    "sg-convergence": cmd_sg_convergence,
    "macro": cmd_macro,
    "closure-check": cmd_closure_check,
    "calibrate": cmd_calibrate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--out-dir", default=".", help="directory for CSV/JSON outputs")
        p.add_argument("--assert", dest="check", action="store_true", help="exit 4 if a scenario check fails")
        p.add_argument("--jobs", type=int, default=1, help="worker cap for compartment-parallel steps")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        if name == "calibrate":
            p.add_argument("--stage", choices=("pre", "targets", "retro"), required=True)
            p.add_argument("--data", help="data file or directory (overrides calibration.data)")
            p.add_argument("--fit", help="pre-stage result (default OUT_DIR/fit.json)")
            p.add_argument("--p", type=float, help="Bernoulli parameter")
            p.add_argument("--selective", choices=("uniform", "sqrtx"))
    return parser


def _setup_logging():
    level = os.environ.get("KEC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("kec: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        overrides = [parse_override(o) for o in args.overrides]
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except AssertionFailure as exc:
        print(f"kec: assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"kec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"kec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
