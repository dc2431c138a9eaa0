"""Selective control of contact formation.

The control acts on the contact number ``x`` of each compartment, steering
it towards a target ``x_T`` with intensity weighted by the selective
function ``S(x)``.  ``nu`` is the scaled penalization (the cost weight is
``penalization = nu * tau``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

OFF = "off"
UNIFORM = "uniform"
SQRTX = "sqrtx"
_SELECTIVE = (OFF, UNIFORM, SQRTX)


@dataclass(frozen=True)
class ControlSpec:
    """Control law configuration.

    Parameters
    ----------
    selective : {"off", "uniform", "sqrtx"}
        ``S = 0``, ``S = 1`` or ``S = sqrt(x)``.
    x_T : tuple of 4 floats
        Target contact numbers for S, E, I, R.  A scalar is broadcast.
    nu : float
        Scaled penalization.
    bbar : {"maxwellian"}
        Control kernel; only the constant kernel is implemented.
    """

    selective: str = OFF
    x_T: tuple = (5.0, 5.0, 5.0, 5.0)
    nu: float = 1.0
    bbar: str = "maxwellian"

    def __post_init__(self):
        if self.selective not in _SELECTIVE:
            raise ValueError(f"selective must be one of {_SELECTIVE}, got {self.selective!r}")
        xt = np.broadcast_to(np.asarray(self.x_T, dtype=float), (4,))
        object.__setattr__(self, "x_T", tuple(float(v) for v in xt))
        if any(v <= 0 for v in self.x_T):
            raise ValueError("targets x_T must be positive")
        if self.selective != OFF and not self.nu > 0:
            raise ValueError("nu must be positive for an active control")
        if self.bbar != "maxwellian":
            raise ValueError("only the Maxwellian control kernel (bbar = 1) is supported")

    @property
    def active(self):
        return self.selective != OFF

    def S2(self, x):
        """Squared selective function evaluated at ``x``."""
        x = np.asarray(x, dtype=float)
        if self.selective == UNIFORM:
            return np.ones_like(x)
        if self.selective == SQRTX:
            return x.copy()
        return np.zeros_like(x)

    def bbar_at(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def target(self, compartment=0):
        return self.x_T[compartment]


def relaxation_rate(spec, m_max, lam):
    """Upper estimate of the rate at which the control moves the mean.

    Uniform selection relaxes at ``1/nu``; for ``S^2 = x`` the linearized
    closed form gives ``(2 Lam m + x_T) / nu`` with the largest closure
    factor over ``delta``.
    """
    if not spec.active:
        return 0.0
    if spec.selective == UNIFORM:
        return 1.0 / spec.nu
    lam_max = max(lam / (lam - 1.0), (lam + 1.0) / lam) if lam > 1.0 else 2.0
    return (2.0 * lam_max * m_max + max(spec.x_T)) / spec.nu


def _check_penalization(kappa):
    if not kappa > 0:
        raise ValueError("penalization must be positive")


def optimal_control(x, x_T, kappa, eps_tau, S_at_x):
    """Instantaneous optimal control for the quadratic cost."""
    _check_penalization(kappa)
    x = np.asarray(x, dtype=float)
    S = np.asarray(S_at_x, dtype=float)
    return -(np.sqrt(eps_tau) * S / (kappa + eps_tau * S**2)) * (x - x_T)


def controlled_update(x, x_T, kappa, eps_tau, S_at_x):
    """Post-interaction contact number under the optimal control."""
    _check_penalization(kappa)
    x = np.asarray(x, dtype=float)
    s2 = eps_tau * np.asarray(S_at_x, dtype=float) ** 2
    return x - (s2 / (kappa + s2)) * (x - x_T)


def macro_control_G(spec, m, Lam, compartment=0):
    """Contribution of the control to ``dm/dt`` in the closed system.

    Uniform selection relaxes ``m`` to ``x_T``; ``S = sqrt(x)`` relaxes it to
    ``x_T / Lam`` because the second moment is closed as ``Lam * m**2``.
    """
    m = np.asarray(m, dtype=float)
    if spec.selective == OFF:
        return np.zeros_like(m)
    x_T = spec.target(compartment)
    if spec.selective == UNIFORM:
        return (x_T - m) / spec.nu
    return m * (x_T - Lam * m) / spec.nu


def damping_index(f, x, x_T):
    """``G_nu = int (x - x_T)^2 f dx`` by the trapezoid rule."""
    x = np.asarray(x, dtype=float)
    return float(trapezoid((x - x_T) ** 2 * np.asarray(f, dtype=float), x))


def restriction_cost(densities, x, spec, include_I=False):
    """Quadratic restriction cost per compartment.

    Parameters
    ----------
    densities : sequence of 4 arrays
        Equilibrium densities of S, E, I, R normalized to their masses.
    x : ndarray
        Grid.
    spec : ControlSpec

    Returns
    -------
    costs : ndarray, shape (4,)
        ``J_H = 1/2 int (1 + S^2/nu) (x - x_T)^2 f_H``.
    total : float
        ``J_S + J_E + J_R`` (plus ``J_I`` when ``include_I``).
    """
    x = np.asarray(x, dtype=float)
    weight = 1.0 + (spec.S2(x) / spec.nu if spec.active else 0.0)
    costs = np.array([
        0.5 * trapezoid(weight * (x - spec.target(j)) ** 2 * np.asarray(f, dtype=float), x)
        for j, f in enumerate(densities)
    ])
    keep = [0, 1, 2, 3] if include_I else [0, 1, 3]
    return costs, float(costs[keep].sum())
