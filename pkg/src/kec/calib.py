"""Data ingestion and least-squares calibration of the closed SEIR model.

Two stages:

* :func:`fit_unconstrained` estimates ``(beta, lam)`` on the days before the
  lockdown, with no control and ``m_I`` clamped;
* :func:`fit_targets` estimates a piecewise-constant target ``x_T`` on
  consecutive one-week windows after the lockdown date.

Model trajectories are Bernoulli expectations from
:func:`kec.macro.run_macro_uncertain`.  Data and model are compared in mass
fractions when a population is given, otherwise in persons.
"""
from __future__ import annotations

import csv
import datetime as _dt
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bracket as _bracket
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import qmc

from . import macro
from .contact import ContactParams, controlled_equilibrium_density
from .control import OFF, ControlSpec, restriction_cost
from .sgkinetic import EpiParams
from .uq import UncertaintyLaw

log = logging.getLogger(__name__)

SIMPLE = "simple"
JHU = "jhu"
ITALY_POPULATION = 59.64e6
JHU_DATE_FORMAT = "%m/%d/%y"
DEGENERATE_RTOL = 1e-9


class DataError(ValueError):
    """Malformed or inconsistent input series."""


@dataclass(frozen=True)
class EpiSeries:
    """Daily infected and recovered counts for one region."""

    dates: tuple
    infected: np.ndarray
    recovered: np.ndarray
    region: str = ""
    population: float | None = None

    def __post_init__(self):
        n = len(self.dates)
        if len(self.infected) != n or len(self.recovered) != n:
            raise DataError("dates, infected and recovered differ in length")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise DataError(f"dates must be consecutive days ({a} -> {b})")
        if np.any(np.asarray(self.infected) < 0) or np.any(np.asarray(self.recovered) < 0):
            raise DataError("counts must be nonnegative")

    def __len__(self):
        return len(self.dates)

    def index(self, date):
        date = as_date(date)
        k = (date - self.dates[0]).days
        if not 0 <= k < len(self):
            raise DataError(f"{date} outside the series {self.dates[0]}..{self.dates[-1]}")
        return k

    def scaled(self):
        """``(infected, recovered)`` as fractions when the population is known."""
        s = 1.0 / self.population if self.population else 1.0
        return np.asarray(self.infected, dtype=float) * s, np.asarray(self.recovered, dtype=float) * s


def as_date(value):
    if isinstance(value, _dt.date):
        return value
    return _dt.date.fromisoformat(str(value))


def _count(text, where):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v) or v < 0:
        raise DataError(f"{where}: invalid count {text!r}")
    return v


def _load_simple(path, region):
    dates, inf, rec = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:3] != ["date", "infected", "recovered"]:
            raise DataError(f"{path}: header must start with date,infected,recovered")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            where = f"{path}:{lineno}"
            try:
                dates.append(_dt.date.fromisoformat(row[0].strip()))
            except ValueError:
                raise DataError(f"{where}: bad date {row[0]!r}") from None
            inf.append(_count(row[1], where))
            rec.append(_count(row[2], where))
    _check_dates(dates, path)
    return dates, np.array(inf), np.array(rec)


def _check_dates(dates, path):
    for k, (a, b) in enumerate(zip(dates, dates[1:])):
        if (b - a).days != 1:
            raise DataError(f"{path}: dates not consecutive at row {k + 2} ({a} -> {b})")


def _load_jhu_wide(path, region):
    """Sum the rows of ``region`` in a wide JHU global time-series file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 5:
            raise DataError(f"{path}: not a JHU global time-series file")
        try:
            dates = [_dt.datetime.strptime(h.strip(), JHU_DATE_FORMAT).date() for h in header[4:]]
        except ValueError as exc:
            raise DataError(f"{path}: bad date column ({exc})") from None
        total = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if row[1].strip() != region:
                continue
            vals = np.array([_count(v or "0", f"{path}:{lineno}") for v in row[4:]])
            total = vals if total is None else total + vals
    if total is None:
        raise DataError(f"{path}: region {region!r} not found")
    _check_dates(dates, path)
    return dates, total


def load_series(path, fmt=SIMPLE, region="", population=None, *, recovered_path=None,
                deaths_path=None, infected_kind="active"):
    """Read an :class:`EpiSeries`.

    Parameters
    ----------
    path : str
        ``date,infected,recovered`` CSV, or the JHU confirmed-cases file.
    fmt : {"simple", "jhu"}
    region : str
        Country/Region for the JHU layout.
    population : float, optional
        Divides counts when comparing with the model.
    recovered_path, deaths_path : str, optional
        JHU recovered (required) and deaths files.
    infected_kind : {"active", "cumulative"}
        JHU only: active cases are confirmed minus recovered minus deaths.
    """
    if fmt == SIMPLE:
        dates, inf, rec = _load_simple(path, region)
    elif fmt == JHU:
        if recovered_path is None:
            raise DataError("the JHU layout needs the recovered file")
        dates, confirmed = _load_jhu_wide(path, region)
        dates_r, rec = _load_jhu_wide(recovered_path, region)
        if dates_r != dates:
            raise DataError("confirmed and recovered files cover different dates")
        deaths = np.zeros_like(confirmed)
        if deaths_path is not None:
            dates_d, deaths = _load_jhu_wide(deaths_path, region)
            if dates_d != dates:
                raise DataError("confirmed and deaths files cover different dates")
        if infected_kind == "active":
            inf = confirmed - rec - deaths
            bad = np.flatnonzero(inf < 0)
            if bad.size:
                raise DataError(f"negative active cases on {dates[bad[0]]}")
        elif infected_kind == "cumulative":
            inf = confirmed
        else:
            raise ValueError(f"unknown infected_kind {infected_kind!r}")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return EpiSeries(tuple(dates), inf, rec, region, population)


def write_simple(path, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "infected", "recovered"])
        for d, i, r in zip(series.dates, series.infected, series.recovered):
            w.writerow([d.isoformat(), repr(float(i)), repr(float(r))])


@dataclass(frozen=True)
class CalibConfig:
    """Fixed quantities and optimizer settings of the calibration."""

    zeta: float = 1.0 / 3.32
    gamma: float = 0.1
    mI_clamp: float = 3.0
    m0: float = 10.0
    seed_persons: float = 1.0
    theta: float = 1e-3
    beta_bounds: tuple = (0.0, 0.1)
    lam_bounds: tuple = (3.0 + 1e-9, 10.0)
    dt: float = 0.05
    restarts: int = 3
    seed: int = 0
    xatol: float = 1e-8
    maxiter: int = 4000
    nu: float = 1e-2
    k_L: int = 3
    k_r: int = 4
    xT_bounds: tuple = (1e-6, 20.0)
    cost_mu: float = 0.5
    cost_x_max: float = 200.0
    cost_dx: float = 0.02

    def epi(self, beta):
        return EpiParams(beta, self.zeta, self.gamma)


def relative_l2(model, data):
    """``||model - data|| / ||data||`` (plain norm when the data vanish)."""
    data = np.asarray(data, dtype=float)
    den = np.linalg.norm(data)
    num = np.linalg.norm(np.asarray(model, dtype=float) - data)
    return num / den if den > 0 else num


def misfit(model_I, model_R, data_I, data_R, theta):
    return (1.0 - theta) * relative_l2(model_I, data_I) + theta * relative_l2(model_R, data_R)


def initial_macro_state(cfg, population):
    """Seed persons in E, I, R; means ``m0`` with ``m_I`` clamped."""
    if not population:
        raise DataError("calibration needs a population to build the initial state")
    unit = cfg.seed_persons / population
    return macro.MacroState((1.0 - 3.0 * unit, unit, unit, unit), (cfg.m0, cfg.m0, cfg.mI_clamp, cfg.m0))


def _steps_per_day(dt):
    k = int(round(1.0 / dt))
    if abs(k * dt - 1.0) > 1e-9:
        raise ValueError("dt must divide one day")
    return k


def _law(p):
    return UncertaintyLaw.bernoulli(p)


def _control_dt(cfg, control, y, Lam):
    """Largest day-dividing step with ``dt * rate <= 1`` for the control relaxation."""
    if control is None or not control.active:
        return cfg.dt
    if control.selective == "uniform":
        rate = 1.0 / control.nu
    else:
        m_max = float(np.max(y[..., 4:]))
        rate = (max(control.x_T) + 2.0 * float(np.max(Lam)) * m_max) / control.nu
    per_day = max(_steps_per_day(cfg.dt), int(math.ceil(rate)))
    return 1.0 / per_day


def _integrate_atoms(y0, beta, Lam, cfg, days, control=None):
    """Daily samples of the atom trajectories over ``days`` days."""
    dt = _control_dt(cfg, control, y0, Lam)
    k = _steps_per_day(dt)
    _, Y = macro.rk4_integrate(y0, cfg.epi(beta), Lam, control, dt, float(days),
                               clamp_mI=cfg.mI_clamp, stride=k)
    return Y


def _atoms(p, lam):
    law = _law(p)
    z = np.array([1.0, 0.0])
    w = np.array([law.p, 1.0 - law.p])
    keep = w > 0
    deltas = law.delta(z[keep])
    return deltas, w[keep], macro.atom_lambda_factors(deltas, lam)


def simulate_daily(beta, lam, p, cfg, population, days):
    """Expected ``(rho_I, rho_R)`` at ``t0 + 0..days`` and the final atom states."""
    deltas, w, Lam = _atoms(p, lam)
    y0 = np.tile(initial_macro_state(cfg, population).vector(), (deltas.size, 1))
    Y = _integrate_atoms(y0, beta, Lam, cfg, days)
    mean = np.einsum("a,tak->tk", w, Y)
    return mean[:, 2], mean[:, 3], Y


@dataclass
class FitResult:
    """Outcome of the pre-lockdown fit."""

    beta_hat: float
    lambda_hat: float
    objective: float
    converged: bool
    p: float
    theta: float
    bounds: dict
    window: tuple
    population: float | None
    trace: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["window"] = [str(v) for v in self.window]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["window"] = tuple(as_date(v) for v in d["window"])
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _window_data(series, start, end):
    i0, i1 = series.index(start), series.index(end)
    if i1 <= i0:
        raise DataError("window end must follow its start")
    I, R = series.scaled()
    return I[i0:i1 + 1], R[i0:i1 + 1]


def fit_unconstrained(series, t0, tL, cfg=CalibConfig(), p=0.5):
    """Fit ``(beta, lam)`` on ``[t0, tL]``.

    Nelder-Mead in the unit box spanned by the bounds, restarted from Latin
    hypercube points; the best converged run wins.
    """
    t0, tL = as_date(t0), as_date(tL)
    data_I, data_R = _window_data(series, t0, tL)
    days = (tL - t0).days
    lo = np.array([cfg.beta_bounds[0], cfg.lam_bounds[0]])
    hi = np.array([cfg.beta_bounds[1], cfg.lam_bounds[1]])
    log.info("pre-lockdown fit p=%s window %s..%s population=%s", p, t0, tL, series.population)

    def objective(u):
        beta, lam = lo + (hi - lo) * np.clip(u, 0.0, 1.0)
        mI, mR, _ = simulate_daily(beta, lam, p, cfg, series.population, days)
        val = misfit(mI, mR, data_I, data_R, cfg.theta)
        return val if np.isfinite(val) else 1e300

    starts = qmc.LatinHypercube(d=2, seed=cfg.seed).random(cfg.restarts)
    best, trace = None, []
    for u0 in starts:
        res = minimize(objective, u0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * 2,
                       options={"xatol": cfg.xatol, "fatol": 1e-15, "maxiter": cfg.maxiter})
        beta, lam = lo + (hi - lo) * np.clip(res.x, 0.0, 1.0)
        trace.append({"start": (lo + (hi - lo) * u0).tolist(), "beta": float(beta), "lambda": float(lam),
                      "objective": float(res.fun), "success": bool(res.success), "nfev": int(res.nfev)})
        if best is None or res.fun < best.fun:
            best = res
    beta, lam = lo + (hi - lo) * np.clip(best.x, 0.0, 1.0)
    converged = any(t["success"] for t in trace)
    if not converged:
        log.warning("pre-lockdown fit did not converge; returning the best point")
    return FitResult(float(beta), float(lam), float(best.fun), converged, p, cfg.theta,
                     {"beta": list(cfg.beta_bounds), "lambda": list(cfg.lam_bounds)},
                     (t0, tL), series.population, trace)


@dataclass
class WindowFit:
    start: _dt.date
    end: _dt.date
    x_T: float
    objective: float
    degenerate: bool
    cost_total: float
    cost: tuple


@dataclass
class TargetFit:
    """Weekly target sequence and the stitched model trajectory."""

    selective: str
    p: float
    fit: FitResult
    windows: list
    times: np.ndarray
    rho_I: np.ndarray
    rho_R: np.ndarray

    @property
    def targets(self):
        return np.array([w.x_T for w in self.windows])

    def to_dict(self):
        return {
            "selective": self.selective, "p": self.p, "fit": self.fit.to_dict(),
            "windows": [{**asdict(w), "start": str(w.start), "end": str(w.end), "cost": list(w.cost)}
                        for w in self.windows],
            "times": self.times.tolist(), "rho_I": self.rho_I.tolist(), "rho_R": self.rho_R.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        windows = [WindowFit(**{**w, "start": as_date(w["start"]), "end": as_date(w["end"]),
                                "cost": tuple(w["cost"])}) for w in d["windows"]]
        return cls(d["selective"], d["p"], FitResult.from_dict(d["fit"]), windows,
                   np.asarray(d["times"], dtype=float), np.asarray(d["rho_I"]), np.asarray(d["rho_R"]))


def lockdown_windows(tL, tf, cfg):
    """Consecutive ``[t^n - k_L, t^n + k_r]`` windows tiling ``[tL + 1, tf]``.

    Windows share their end points, so a piecewise-constant target history
    is well defined; only complete windows are kept.
    """
    tL, tf = as_date(tL), as_date(tf)
    width = cfg.k_L + cfg.k_r
    out = []
    start = tL + _dt.timedelta(days=1)
    while start + _dt.timedelta(days=width) <= tf:
        out.append((start, start + _dt.timedelta(days=width)))
        start = start + _dt.timedelta(days=width)
    if not out:
        raise DataError("lockdown period shorter than one window")
    return out


def _control(selective, x_T, cfg):
    return ControlSpec(selective, x_T, cfg.nu)


def _minimize_target(f, x0, bounds):
    """Bracket from the warm start, else a 64-point scan then golden section.

    A misfit that barely moves between the bounds (control too weak to act)
    is reported as degenerate and the warm start is kept.
    """
    lo, hi = bounds
    f0 = f(x0)
    ends = [f(lo), f(hi)]
    if max(abs(v - f0) for v in ends) <= DEGENERATE_RTOL * max(1.0, abs(f0)):
        return float(x0), float(f0), True
    try:
        xa, xb = x0, min(hi, x0 * 1.1 + 1e-3)
        xa, xb, xc, *_ = _bracket(f, xa, xb, maxiter=50)
        if lo <= min(xa, xc) and max(xa, xc) <= hi:
            res = minimize_scalar(f, bracket=(xa, xb, xc), method="brent", options={"xtol": 1e-10})
            if lo <= res.x <= hi:
                return float(res.x), float(res.fun), False
    except (RuntimeError, ValueError, FloatingPointError):
        pass
    grid = np.linspace(lo, hi, 64)
    vals = np.array([f(x) for x in grid])
    k = int(np.argmin(vals))
    degenerate = np.ptp(vals) <= DEGENERATE_RTOL * max(1.0, abs(vals[k]))
    a, c = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if degenerate or a == c:
        return float(grid[k]), float(vals[k]), degenerate
    res = minimize_scalar(f, bracket=(a, c), method="golden", options={"xtol": 1e-10})
    if lo <= res.x <= hi and res.fun <= vals[k]:
        return float(res.x), float(res.fun), False
    return float(grid[k]), float(vals[k]), False


def window_cost(state_atoms, deltas, weights, lam, selective, x_T, cfg):
    """Expected ``J_S + J_E + J_R`` on the controlled equilibria at a window end."""
    spec = _control(selective, x_T, cfg)
    params = ContactParams(mu=cfg.cost_mu, sigma2=cfg.cost_mu / lam)
    x = np.linspace(0.0, cfg.cost_x_max, int(round(cfg.cost_x_max / cfg.cost_dx)) + 1)
    costs = np.zeros(4)
    for y, d, w in zip(state_atoms, deltas, weights):
        dens = []
        for j in range(4):
            f = controlled_equilibrium_density(params, float(d), float(y[4 + j]), spec, x, j) if spec.active \
                else None
            dens.append(y[j] * (f if f is not None else np.zeros_like(x)))
        c, _ = restriction_cost(dens, x, spec)
        costs += w * c
    return float(costs[[0, 1, 3]].sum()), tuple(costs.tolist())


def _pre_lockdown(fit, cfg, tL):
    """Atom states at ``tL + 1`` and the daily expected trajectory up to it."""
    t0 = as_date(fit.window[0])
    days = (as_date(tL) + _dt.timedelta(days=1) - t0).days
    mI, mR, Y = simulate_daily(fit.beta_hat, fit.lambda_hat, fit.p, cfg, fit.population, days)
    return Y[-1], mI, mR


def _run_windows(fit, cfg, tL, windows, selective, targets):
    """Integrate piecewise-constant targets; returns per-window daily trajectories."""
    deltas, w, Lam = _atoms(fit.p, fit.lambda_hat)
    y, _, _ = _pre_lockdown(fit, cfg, tL)
    out = []
    for (start, end), x_T in zip(windows, targets):
        Y = _integrate_atoms(y, fit.beta_hat, Lam, cfg, (end - start).days, _control(selective, x_T, cfg))
        out.append(Y)
        y = Y[-1]
    return out, deltas, w


def fit_targets(series, fit, tL, tf, selective="uniform", cfg=CalibConfig(), x0=None):
    """Weekly bounded 1-D fits of a common target ``x_T``, warm-started."""
    if selective == OFF:
        raise ValueError("target fitting needs an active control")
    windows = lockdown_windows(tL, tf, cfg)
    deltas, w, Lam = _atoms(fit.p, fit.lambda_hat)
    y, _, _ = _pre_lockdown(fit, cfg, tL)
    guess = cfg.m0 if x0 is None else x0
    results, times, traj_I, traj_R = [], [], [], []
    log.info("target fit S=%s p=%s nu=%s windows=%d", selective, fit.p, cfg.nu, len(windows))
    for start, end in windows:
        data_I, data_R = _window_data(series, start, end)
        days = (end - start).days

        def f(x_T, y=y):
            if not cfg.xT_bounds[0] <= x_T <= cfg.xT_bounds[1]:
                return 1e300
            Y = _integrate_atoms(y, fit.beta_hat, Lam, cfg, days, _control(selective, x_T, cfg))
            mean = np.einsum("a,tak->tk", w, Y)
            return misfit(mean[:, 2], mean[:, 3], data_I, data_R, cfg.theta)

        x_T, val, degenerate = _minimize_target(f, min(max(guess, cfg.xT_bounds[0]), cfg.xT_bounds[1]),
                                                cfg.xT_bounds)
        if degenerate:
            log.warning("window %s..%s: misfit insensitive to x_T", start, end)
        Y = _integrate_atoms(y, fit.beta_hat, Lam, cfg, days, _control(selective, x_T, cfg))
        mean = np.einsum("a,tak->tk", w, Y)
        total, costs = window_cost(Y[-1], deltas, w, fit.lambda_hat, selective, x_T, cfg)
        results.append(WindowFit(start, end, x_T, val, degenerate, total, costs))
        offset = (start - as_date(fit.window[0])).days
        skip = 0 if not times else 1
        times.extend(offset + np.arange(skip, days + 1))
        traj_I.extend(mean[skip:, 2])
        traj_R.extend(mean[skip:, 3])
        y, guess = Y[-1], x_T
    return TargetFit(selective, fit.p, fit, results, np.array(times, dtype=float),
                     np.array(traj_I), np.array(traj_R))


@dataclass
class SwapResult:
    p: float
    selective: str
    times: np.ndarray
    rho_I: np.ndarray
    peak: float
    baseline_peak: float

    @property
    def peak_ratio(self):
        return self.peak / self.baseline_peak


def retrospective_swap(target_fit, selective="sqrtx", cfg=CalibConfig(), p=None):
    """Re-run the lockdown with another selective function and the fitted targets.

    ``p`` overrides the Bernoulli parameter of the fit (the targets are kept).
    """
    fit = target_fit.fit
    if p is not None and p != fit.p:
        fit = FitResult(**{**asdict(fit), "p": float(p)})
    tL = target_fit.windows[0].start - _dt.timedelta(days=1)
    windows = [(wf.start, wf.end) for wf in target_fit.windows]
    traj, _, w = _run_windows(fit, cfg, tL, windows, selective, target_fit.targets)
    rho_I = [np.einsum("a,ta->t", w, traj[0][:, :, 2])]
    rho_I += [np.einsum("a,ta->t", w, Y[1:, :, 2]) for Y in traj[1:]]
    rho_I = np.concatenate(rho_I)
    return SwapResult(fit.p, selective, target_fit.times.copy(), rho_I, float(np.max(rho_I)),
                      float(np.max(target_fit.rho_I)))


def synthetic_series(beta, lam, p, cfg, population, start, days, *, targets=None, selective="uniform",
                     lockdown_day=None):
    """Noiseless daily series from the model (optionally with weekly targets after lockdown).

    Counts are returned in persons.
    """
    start = as_date(start)
    deltas, w, Lam = _atoms(p, lam)
    if targets is None:
        mI, mR, _ = simulate_daily(beta, lam, p, cfg, population, days)
    else:
        pre = lockdown_day + 1
        mI, mR, Y = simulate_daily(beta, lam, p, cfg, population, pre)
        y = Y[-1]
        width = cfg.k_L + cfg.k_r
        seg_I, seg_R = [mI], [mR]
        for x_T in targets:
            Yw = _integrate_atoms(y, beta, Lam, cfg, width, _control(selective, x_T, cfg))
            mean = np.einsum("a,tak->tk", w, Yw)
            seg_I.append(mean[1:, 2])
            seg_R.append(mean[1:, 3])
            y = Yw[-1]
        mI, mR = np.concatenate(seg_I), np.concatenate(seg_R)
    dates = tuple(start + _dt.timedelta(days=k) for k in range(mI.size))
    return EpiSeries(dates, mI * population, mR * population, "synthetic", population)
