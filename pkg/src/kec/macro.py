"""Closed macroscopic SEIR system for mass fractions and mean contacts.

The state vector is ``y = (rho_S, rho_E, rho_I, rho_R, m_S, m_E, m_I, m_R)``.
The unclosed second moment of the susceptible contacts is replaced by
``Lam * m_S**2`` with ``Lam`` the equilibrium shape factor of each
``delta`` atom.  Leading axes of ``y`` (and ``Lam``) index independent
trajectories, which are integrated together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contact import lambda_factor
from .control import ControlSpec, macro_control_G
from .kernels import integrate_seir
from .uq import BERNOULLI

MASS_FLOOR = 1e-12
FIELDS = ("rho_S", "rho_E", "rho_I", "rho_R", "m_S", "m_E", "m_I", "m_R")


@dataclass(frozen=True)
class MacroState:
    """Mass fractions and mean contacts at time ``t``."""

    rho: tuple
    m: tuple
    t: float = 0.0

    def __post_init__(self):
        rho = np.broadcast_to(np.asarray(self.rho, dtype=float), (4,))
        m = np.broadcast_to(np.asarray(self.m, dtype=float), (4,))
        if np.any(rho < 0):
            raise ValueError("mass fractions must be nonnegative")
        if np.any(m <= 0):
            raise ValueError("mean contacts must be positive")
        object.__setattr__(self, "rho", tuple(rho.tolist()))
        object.__setattr__(self, "m", tuple(m.tolist()))

    def vector(self):
        return np.array(self.rho + self.m)


def _safe_ratio(num, den, floor):
    ok = den >= floor
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def macro_rhs(y, epi, Lam, control=None, clamp_mI=None, mass_floor=MASS_FLOOR):
    """Right-hand side of the closed system.

    Parameters
    ----------
    y : ndarray, shape (..., 8)
    epi : EpiParams
    Lam : float or ndarray broadcastable to ``y[..., 0]``
    control : ControlSpec, optional
    clamp_mI : float, optional
        Holds ``m_I`` fixed (its derivative is zero).
    mass_floor : float
        Mean equations of compartments lighter than this return 0.

    Returns
    -------
    ndarray
        ``dy/dt`` with the shape of ``y``.
    """
    y = np.asarray(y, dtype=float)
    rS, rE, rI, rR, mS, mE, mI, mR = np.moveaxis(y, -1, 0)
    if clamp_mI is not None:
        mI = np.full_like(mI, clamp_mI)
    Lam = np.asarray(Lam, dtype=float)
    beta, zeta, gamma = epi.beta, epi.zeta, epi.gamma
    force = mI * rI
    incid = beta * mS * rS * force
    out = np.empty_like(y)
    out[..., 0] = -incid
    out[..., 1] = incid - zeta * rE
    out[..., 2] = zeta * rE - gamma * rI
    out[..., 3] = gamma * rI

    spec = control if control is not None else ControlSpec()
    G = [macro_control_G(spec, m, Lam, j) for j, m in enumerate((mS, mE, mI, mR))]
    out[..., 4] = -beta * (Lam - 1.0) * mS**2 * force + G[0]
    gain_E, ok_E = _safe_ratio(incid, rE, mass_floor)
    out[..., 5] = np.where(ok_E, gain_E * (Lam * mS - mE) + G[1], 0.0)
    if clamp_mI is not None:
        out[..., 6] = 0.0
    else:
        gain_I, ok_I = _safe_ratio(zeta * rE, rI, mass_floor)
        out[..., 6] = np.where(ok_I, gain_I * (mE - mI) + G[2], 0.0)
    gain_R, ok_R = _safe_ratio(gamma * rI, rR, mass_floor)
    out[..., 7] = np.where(ok_R, gain_R * (mI - mR) + G[3], 0.0)
    return out


def rk4_integrate(y0, epi, Lam, control=None, dt=0.05, T=1.0, clamp_mI=None, stride=1,
                  mass_floor=MASS_FLOOR, backend=None):
    """Classical RK4 from ``t = 0`` to ``T``.

    The loop runs in the compiled kernel when available (``backend`` picks
    one explicitly); both backends evaluate :func:`macro_rhs` arithmetic.

    Returns
    -------
    times : ndarray, shape (n_out,)
    Y : ndarray, shape (n_out,) + y0.shape
        Every ``stride``-th step plus the final one.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a positive multiple of dt")
    y = np.array(y0, dtype=float)
    if clamp_mI is not None:
        y[..., 6] = clamp_mI
    lead = y.shape[:-1]
    flat = y.reshape(-1, 8)
    lam_f = np.broadcast_to(np.asarray(Lam, dtype=float), lead).reshape(-1)
    Y = integrate_seir(flat, lam_f, epi, control, clamp_mI, mass_floor, dt, n, stride, backend=backend)
    times = np.minimum(np.arange(Y.shape[0]) * stride, n) * dt
    return times, Y.reshape((Y.shape[0],) + lead + (8,))


@dataclass
class MacroResult:
    """Trajectories of the ``delta`` atoms and their statistics.

    ``atoms`` has shape (n_out, n_atoms, 8); ``mean`` and ``var`` have shape
    (n_out, 8).
    """

    times: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray
    atoms: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def atom_lambda_factors(deltas, lam):
    return np.array([lambda_factor(float(d), lam) for d in deltas])


def run_macro_uncertain(initial, epi, lam, law, control=None, dt=0.05, T=1.0, clamp_mI=None,
                        stride=1):
    """Integrate the closed system for each atom of a two-point law.

    Parameters
    ----------
    initial : MacroState
    lam : float
        Shape parameter entering the closure factor.
    law : UncertaintyLaw
        Must be Bernoulli; atoms with zero weight are skipped.

    Returns
    -------
    MacroResult
    """
    if law.kind != BERNOULLI:
        raise ValueError("the closed macroscopic system needs a two-atom law")
    z = np.array([1.0, 0.0])
    w = np.array([law.p, 1.0 - law.p])
    keep = w > 0
    deltas = law.delta(z[keep])
    weights = w[keep]
    if np.any(deltas < 0) and not lam > 1:
        raise ValueError("lambda must exceed 1 for a delta = -1 atom")
    Lam = atom_lambda_factors(deltas, lam)
    y0 = np.tile(initial.vector(), (deltas.size, 1))
    times, Y = rk4_integrate(y0, epi, Lam, control, dt, T, clamp_mI, stride)
    mean = np.einsum("a,tak->tk", weights, Y)
    var = np.einsum("a,tak->tk", weights, (Y - mean[:, None, :]) ** 2)
    return MacroResult(times, deltas, weights, Y, mean, var)
