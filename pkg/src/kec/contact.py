"""Closed-form ingredients of the contact-formation model.

Contact numbers ``x >= 0`` relax through binary interactions whose
transition function depends on ``delta`` in ``[-1, 1]``.  In the grazing
limit the contact density of a compartment with mean ``m`` obeys

    d_t f = (1 / tau) d_x [ A f + d_x (D f) ],

    A = (mu / 2 delta) x^(1 - alpha) ((x / m)^delta - 1),
    D = (sigma2 / 2) x^(2 - alpha),        alpha = (1 + delta) / 2,

whose equilibria are generalized Gamma densities.  Every formula carries an
explicit ``delta -> 0`` branch for ``|delta| < DELTA_EPS``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import gammaln

from .control import ControlSpec

DELTA_EPS = 1e-6


@dataclass(frozen=True)
class ContactParams:
    """Contact-dynamics parameters.

    Parameters
    ----------
    mu : float
        Maximal transition amplitude.
    sigma2 : float
        Diffusion strength.
    tau : float
        Relaxation time scale of contact formation.
    epsilon : float
        Interaction strength (only used by the unscaled transition function).
    """

    mu: float = 0.5
    sigma2: float = 0.1
    tau: float = 1e-5
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("mu", "sigma2", "tau", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def lam(self):
        return self.mu / self.sigma2


@dataclass(frozen=True)
class DeltaValue:
    delta: float

    def __post_init__(self):
        _check_delta(self.delta)

    @property
    def alpha(self):
        return alpha_of(self.delta)


def _check_delta(delta):
    if not -1.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [-1, 1], got {delta}")
    return float(delta)


def _as_delta(delta):
    if isinstance(delta, DeltaValue):
        return delta.delta
    return _check_delta(delta)


def alpha_of(delta):
    """Kernel exponent ``alpha = (1 + delta) / 2``."""
    return 0.5 * (1.0 + delta)


def _power_ratio(delta, log_s):
    """``(s**delta - 1) / delta`` from ``log s``; equals ``log s`` at delta = 0."""
    if abs(delta) < DELTA_EPS:
        return np.asarray(log_s, dtype=float)
    return np.expm1(delta * np.asarray(log_s, dtype=float)) / delta


def _h(u):
    """``(exp(u) - 1 - u) / u**2`` evaluated without cancellation."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    out = (np.expm1(safe) - safe) / safe**2
    series = 0.5 + u / 6.0 + u**2 / 24.0
    return np.where(small, series, out)


def _positive(s, name="s"):
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError(f"{name} must be positive")
    return s


def transition_phi(params, delta, s):
    """Unscaled transition function, bounded by ``mu`` in absolute value."""
    delta = _as_delta(delta)
    s = _positive(s)
    y = params.epsilon * _power_ratio(delta, np.log(s))
    # (e^y - 1) / (e^y + 1) == tanh(y / 2)
    return params.mu * np.tanh(0.5 * y)


def scaled_phi(params, delta, s):
    """Grazing-limit transition function ``(mu / 2 delta)(s**delta - 1)``."""
    delta = _as_delta(delta)
    s = _positive(s)
    return 0.5 * params.mu * _power_ratio(delta, np.log(s))


def kernel_B(delta, x):
    """Interaction kernel ``x**(-alpha)``; undefined at ``x = 0``."""
    delta = _as_delta(delta)
    x = _positive(x, "x")
    return x ** (-alpha_of(delta))


def _control_drift(params, control, x, compartment):
    if control is None or not control.active:
        return 0.0
    return (params.tau / control.nu) * control.bbar_at(x) * control.S2(x) * (x - control.target(compartment))


def fp_coefficients(params, delta, m, x, control=None, compartment=0):
    """Drift ``A`` and diffusion ``D`` of the Fokker-Planck operator.

    The optional control adds ``(tau / nu) S^2(x) (x - x_T)`` to the drift so
    that one flux carries both ``(1/tau) Q`` and the control operator.

    Returns
    -------
    A, D : ndarray
        Same shape as ``x``; both extended continuously to ``x = 0``.
    """
    delta = _as_delta(delta)
    if not m > 0:
        raise ValueError("mean m must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    alpha = alpha_of(delta)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    A = 0.5 * params.mu * xs ** (1.0 - alpha) * _power_ratio(delta, np.log(xs / m))
    if abs(delta) < DELTA_EPS:
        a0 = 0.0
    elif delta > 0:
        # x^(1 - alpha) ((x/m)^delta - 1) / delta -> -1/delta only when alpha = 1
        a0 = -0.5 * params.mu / delta if alpha == 1.0 else 0.0
    else:
        # x^((1 + delta) / 2) m^(-delta) / delta -> m / delta at delta = -1
        a0 = 0.5 * params.mu * m / delta if delta == -1.0 else 0.0
    A = np.where(pos, A, a0)
    A = A + _control_drift(params, control, x, compartment)
    D = 0.5 * params.sigma2 * x ** (2.0 - alpha)
    return A, D


def _log_equilibrium(lam, delta, m, x):
    """Unnormalized log-density at ``x > 0``.

    Uses ``-(lam/delta^2)(e^{delta L} - 1 - delta L) + (alpha - 2) log x`` with
    ``L = log(x/m)``, which equals the generalized Gamma exponent up to a
    constant and is free of cancellation as ``delta -> 0``.
    """
    alpha = alpha_of(delta)
    L = np.log(x / m)
    if abs(delta) < DELTA_EPS:
        quad = 0.5 * L**2
    else:
        quad = L**2 * _h(delta * L)
    return -lam * quad + (alpha - 2.0) * np.log(x)


def _closed_form_log_density(lam, delta, m, x):
    """Analytically normalized log-density (used to detect coarse grids)."""
    alpha = alpha_of(delta)
    if abs(delta) < DELTA_EPS:
        L = np.log(x / m)
        log_norm = -0.5 * np.log(m) + 0.5 * np.log(2 * np.pi / lam) + 1.0 / (8.0 * lam)
        return -1.5 * np.log(x) - 0.5 * lam * L**2 - log_norm
    a = lam / delta - 2.0 + alpha
    b = lam / delta**2
    k = (a + 1.0) / delta
    log_norm = (a + 1.0) * np.log(m) - np.log(abs(delta)) + gammaln(k) - k * np.log(b)
    return a * np.log(x) - b * (x / m) ** delta - log_norm


def equilibrium_mean_ratio(lam, delta):
    """Mean of the equilibrium with parameter ``m``, divided by ``m``.

    Equals 1 for ``delta`` in ``{-1, 0, 1}``; elsewhere the drift parameter
    and the equilibrium mean differ by this factor.
    """
    delta = _as_delta(delta)
    if abs(delta) < DELTA_EPS:
        return 1.0
    a = lam / delta - 2.0 + alpha_of(delta)
    b = lam / delta**2
    if (a + 2.0) / delta <= 0:
        return float("inf")
    return float(np.exp(gammaln((a + 2.0) / delta) - gammaln((a + 1.0) / delta) - np.log(b) / delta))


def _normalize_log(logf, x):
    f = np.exp(logf - np.max(logf[np.isfinite(logf)]))
    f = np.where(np.isfinite(logf), f, 0.0)
    mass = trapezoid(f, x)
    if not mass > 0:
        raise ValueError("density vanishes on the grid")
    return f / mass


def _check_grid(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 3 or np.any(np.diff(x) <= 0):
        raise ValueError("x_grid must be strictly increasing with at least 3 points")
    if x[0] < 0:
        raise ValueError("x_grid must start at a nonnegative point")
    return x


def _equilibrium_log(params, delta, m, x):
    lam = params.lam
    logf = np.full(x.shape, -np.inf)
    pos = x > 0
    logf[pos] = _log_equilibrium(lam, delta, m, x[pos])
    if np.any(~pos) and delta >= DELTA_EPS:
        exponent = lam / delta - 2.0 + alpha_of(delta)
        if exponent == 0.0:
            # finite limit: x^0 exp(-(lam/delta^2)(0)) relative to the same constant
            logf[~pos] = lam / delta**2 - (lam / delta) * np.log(m)
    return logf


def equilibrium_density(params, delta, m, x_grid):
    """Generalized Gamma equilibrium, normalized by the trapezoid rule.

    ``delta = 1`` gives Gamma(shape lam, rate lam/m), ``delta = -1`` the
    inverse Gamma with shape ``lam + 1`` and scale ``lam m``, and
    ``delta = 0`` the log-normal type limit with prefactor ``x**(-3/2)``.
    """
    delta = _as_delta(delta)
    if not m > 0:
        raise ValueError("mean m must be positive")
    x = _check_grid(x_grid)
    f = _normalize_log(_equilibrium_log(params, delta, m, x), x)
    if abs(delta) >= 1e-2 or abs(delta) < DELTA_EPS:
        pos = x > 0
        exact = np.zeros_like(x)
        exact[pos] = np.exp(_closed_form_log_density(params.lam, delta, m, x[pos]))
        mass = trapezoid(exact, x)
        if abs(mass - 1.0) > 1e-2:
            raise ValueError(f"grid too coarse or short to normalize (closed-form mass {mass:.4f})")
    return f


def control_integral(params, delta, control, x_grid, compartment=0):
    """Cumulative ``int_{x_ref}^x bbar y^(alpha-2) S^2 (y - x_T) dy`` on the grid.

    The trapezoid sum starts at the first interior point ``x_ref = x_grid[1]``;
    the value at ``x_grid[0]`` is extrapolated linearly (it only multiplies a
    vanishing density).
    """
    x = _check_grid(x_grid)
    alpha = alpha_of(_as_delta(delta))
    xi = x[1:]
    integrand = control.bbar_at(xi) * xi ** (alpha - 2.0) * control.S2(xi) * (xi - control.target(compartment))
    out = np.empty_like(x)
    out[1:] = cumulative_trapezoid(integrand, xi, initial=0.0)
    out[0] = out[1] - (out[2] - out[1]) * (x[1] - x[0]) / (x[2] - x[1])
    return out


def controlled_equilibrium_density(params, delta, m, control, x_grid, compartment=0):
    """Equilibrium of the contact operator plus the control operator.

    Multiplies the generalized Gamma by
    ``exp(-(2 / (sigma2 nu)) * control_integral)`` and renormalizes.  Here
    ``nu`` is measured on the time scale of the contact operator.
    """
    delta = _as_delta(delta)
    if not m > 0:
        raise ValueError("mean m must be positive")
    if not isinstance(control, ControlSpec):
        raise TypeError("control must be a ControlSpec")
    if not control.nu > 0:
        raise ValueError("nu must be positive")
    x = _check_grid(x_grid)
    logf = _equilibrium_log(params, delta, m, x)
    if control.active:
        logf = logf - (2.0 / (params.sigma2 * control.nu)) * control_integral(
            params, delta, control, x, compartment
        )
    return _normalize_log(logf, x)


def lambda_factor(delta, lam):
    """Second-moment closure factor ``((lam + delta) / lam) ** delta``."""
    delta = _as_delta(delta)
    if delta == -1.0 and not lam > 1.0:
        raise ValueError("lam must exceed 1 for delta = -1 (second moment undefined)")
    if not lam + delta > 0:
        raise ValueError("lam + delta must be positive")
    return ((lam + delta) / lam) ** delta


def drift_potential(params, delta, m, x, control=None, compartment=0):
    """Potential ``G`` with ``G' = (A + D') / D`` for ``x > 0``.

    The equilibrium of the (folded) operator is proportional to ``exp(-G)``;
    cell differences of ``G`` are the exact Chang-Cooper exponents.
    """
    delta = _as_delta(delta)
    x = _positive(x, "x")
    alpha = alpha_of(delta)
    G = -_log_equilibrium(params.lam, delta, m, x)
    if control is not None and control.active:
        x_T = control.target(compartment)
        if control.selective == "uniform":
            phi = _int_power(alpha, x) - x_T * _int_power(alpha - 1.0, x)
        else:
            phi = _int_power(alpha + 1.0, x) - x_T * _int_power(alpha, x)
        G = G + (2.0 * params.tau / (params.sigma2 * control.nu)) * phi
    return G


def drift_potential_slope(params, delta, m, x, control=None, compartment=0):
    """``(A + D') / D`` at ``x > 0``."""
    delta = _as_delta(delta)
    x = _positive(x, "x")
    alpha = alpha_of(delta)
    slope = (params.lam * _power_ratio(delta, np.log(x / m)) + 2.0 - alpha) / x
    if control is not None and control.active:
        slope = slope + (2.0 * params.tau / (params.sigma2 * control.nu)) * control.S2(x) * (
            x - control.target(compartment)
        ) * x ** (alpha - 2.0)
    return slope


def _int_power(q, x):
    """``int_1^x y^(q-1) dy`` (log branch at q = 0)."""
    lx = np.log(x)
    if abs(q) < 1e-12:
        return lx
    return np.expm1(q * lx) / q
