"""Scenario files: TOML sections mirroring the modules, validated up front.

A scenario looks like::

    [model]
    kind = "kinetic"

    [uncertainty]
    kind = "uniform"      # or "bernoulli"
    a = -1.0
    b = 0.0
    order = 5

    [contact]
    mu = 0.5
    sigma2 = 0.1
    tau = 1e-5

    [epi]
    beta = 0.0025
    zeta = 0.3
    gamma = 0.1

    [grid]
    x_max = 200.0
    dx = 0.1

    [time]
    dt = 0.1
    T = 150.0

Unknown sections or keys are errors, so typos never pass silently.
"""
from __future__ import annotations

import copy
import hashlib
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import calib, fpsolve, sgkinetic, uq
from .contact import ContactParams
from .control import ControlSpec


class ConfigError(ValueError):
    """Schema or value error in a scenario file."""


_SCHEMA = {
    "model": {"kind", "name"},
    "uncertainty": {"kind", "a", "b", "p", "delta_map", "order", "quad_order"},
    "contact": {"mu", "sigma2", "tau"},
    "epi": {"beta", "zeta", "gamma"},
    "control": {"selective", "x_T", "nu"},
    "grid": {"x_max", "dx"},
    "time": {"dt", "T", "stride", "snapshots"},
    "init": {"rho", "m", "lam"},
    "solver": {"scheme", "coupling", "clip", "epidemic", "jobs"},
    "equilibrium": {"deltas", "m", "dt", "n_steps"},
    "convergence": {"M_list", "M_ref"},
    "closure": {"taus", "macro_dt", "slow_taus"},
    "damping": {"nus", "selectives", "x_T"},
    "output": {"damping", "snapshot_stride"},
    "calibration": {
        "data", "format", "region", "population", "recovered", "deaths", "infected_kind",
        "t0", "tL", "tf", "p", "p_list", "selective", "theta", "nu", "beta_bounds", "lam_bounds",
        "restarts", "seed", "dt", "mI_clamp", "m0",
    },
}

_MODELS = ("kinetic", "macro", "calibration", "equilibrium")


@dataclass
class ScenarioConfig:
    """Validated scenario plus the raw tables it came from."""

    raw: dict
    sha256: str
    source: str = "<memory>"
    _cache: dict = field(default_factory=dict, repr=False)

    def section(self, name):
        return self.raw.get(name, {})

    @property
    def model(self):
        return self.section("model").get("kind", "kinetic")

    @property
    def law(self):
        u = self.section("uncertainty")
        kind = u.get("kind", uq.UNIFORM)
        if kind == uq.BERNOULLI:
            return uq.UncertaintyLaw.bernoulli(u.get("p", 0.5), u.get("delta_map", uq.AFFINE_FLIP))
        return uq.UncertaintyLaw.uniform(u.get("a", -1.0), u.get("b", 1.0), u.get("delta_map", uq.IDENTITY),
                                         u.get("quad_order", 0))

    @property
    def order(self):
        return int(self.section("uncertainty").get("order", 0))

    @property
    def contact(self):
        c = self.section("contact")
        return ContactParams(c.get("mu", 0.5), c.get("sigma2", 0.1), c.get("tau", 1e-5))

    @property
    def epi(self):
        e = self.section("epi")
        return sgkinetic.EpiParams(e.get("beta", 0.0), e.get("zeta", 0.0), e.get("gamma", 0.0))

    @property
    def control(self):
        c = self.section("control")
        return ControlSpec(c.get("selective", "off"), c.get("x_T", 5.0), c.get("nu", 1.0))

    @property
    def grid(self):
        g = self.section("grid")
        return fpsolve.Grid1D.from_spacing(g.get("x_max", 200.0), g.get("dx", 0.1))

    @property
    def dt(self):
        return float(self.section("time").get("dt", 0.1))

    @property
    def T(self):
        return float(self.section("time").get("T", 1.0))

    @property
    def stride(self):
        return int(self.section("time").get("stride", 10))

    def kinetic_scenario(self, **overrides):
        init = self.section("init")
        solver = self.section("solver")
        kwargs = dict(
            law=self.law, order=self.order, params=self.contact, epi=self.epi, grid=self.grid,
            dt=self.dt, T=self.T, control=self.control,
            rho0=tuple(_vec4(init.get("rho", [0.97, 0.01, 0.01, 0.01]), "init.rho")),
            m0=tuple(_vec4(init.get("m", 10.0), "init.m")),
            init_lam=init.get("lam"),
            scheme=solver.get("scheme", fpsolve.CENTRAL),
            coupling=solver.get("coupling", sgkinetic.SPLIT),
            clip=bool(solver.get("clip", True)),
            epidemic=bool(solver.get("epidemic", True)),
            stride=self.stride,
            snapshot_times=tuple(self.section("time").get("snapshots", ())),
        )
        kwargs.update(overrides)
        return sgkinetic.KineticScenario(**kwargs)

    def calib_config(self):
        c = self.section("calibration")
        base = calib.CalibConfig()
        kw = {}
        for key in ("theta", "nu", "restarts", "seed", "dt", "mI_clamp", "m0"):
            if key in c:
                kw[key] = c[key]
        if "beta_bounds" in c:
            kw["beta_bounds"] = tuple(c["beta_bounds"])
        if "lam_bounds" in c:
            kw["lam_bounds"] = tuple(c["lam_bounds"])
        return calib.CalibConfig(**{**base.__dict__, **kw})


def _vec4(v, name):
    if isinstance(v, (int, float)):
        return [float(v)] * 4
    if not isinstance(v, list) or len(v) != 4:
        raise ConfigError(f"{name} must be a number or a list of 4 numbers")
    return [float(a) for a in v]


def _set_path(raw, dotted, value):
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    raw.setdefault(section, {})[key] = value


def parse_override(text):
    """``section.key=value`` with the value parsed as a TOML literal."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, _, value = text.partition("=")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return path.strip(), parsed


def from_dict(raw, source="<memory>", overrides=()):
    """Validate a parsed scenario; ``overrides`` are ``(path, value)`` pairs."""
    raw = copy.deepcopy(raw)
    for path, value in overrides:
        _set_path(raw, path, value)
    for name, table in raw.items():
        if name not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        unknown = set(table) - _SCHEMA[name]
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    canonical = repr(sorted((k, sorted(v.items())) for k, v in raw.items())).encode()
    cfg = ScenarioConfig(raw, hashlib.sha256(canonical).hexdigest(), source)
    _validate(cfg)
    return cfg


def load_config(path, overrides=()):
    """Read and validate a TOML scenario file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, str(path), overrides)


def _positive(cfg, section, key, allow_zero=False):
    v = cfg.section(section).get(key)
    if v is None:
        return
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{section}.{key} must be a number")
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{section}.{key} must be {'nonnegative' if allow_zero else 'positive'}")


def _validate(cfg):
    if cfg.model not in _MODELS:
        raise ConfigError(f"model.kind must be one of {_MODELS}")
    for key in ("mu", "sigma2", "tau"):
        _positive(cfg, "contact", key)
    for key in ("beta", "zeta", "gamma"):
        _positive(cfg, "epi", key, allow_zero=True)
    _positive(cfg, "grid", "x_max")
    _positive(cfg, "grid", "dx")
    _positive(cfg, "time", "dt")
    _positive(cfg, "time", "T")
    _positive(cfg, "control", "nu")
    try:
        cfg.law, cfg.contact, cfg.epi, cfg.control
        if "grid" in cfg.raw:
            cfg.grid
        if cfg.section("uncertainty"):
            uq.build_basis(cfg.law, cfg.order)
        cfg.kinetic_scenario() if cfg.model == "kinetic" else None
        if cfg.section("calibration"):
            cfg.calib_config()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None
    solver = cfg.section("solver")
    if solver.get("scheme", fpsolve.CENTRAL) not in fpsolve.SCHEMES:
        raise ConfigError(f"solver.scheme must be one of {fpsolve.SCHEMES}")
    if solver.get("coupling", sgkinetic.SPLIT) not in (sgkinetic.SPLIT, sgkinetic.FOLDED):
        raise ConfigError("solver.coupling must be 'split' or 'folded'")
    if cfg.model == "calibration" and "tL" not in cfg.section("calibration"):
        raise ConfigError("calibration.tL (lockdown date) is required")
    conv = cfg.section("convergence")
    if conv and not conv.get("M_ref", 0) > max(conv.get("M_list", [0])):
        raise ConfigError("convergence.M_ref must exceed every entry of M_list")
