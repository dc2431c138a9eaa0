"""Implicit flux-form Fokker-Planck stepper for a single ``delta``.

The discrete operator acts on nodal values ``f_i`` of a uniform grid with
control volumes ``dx`` (``dx/2`` at the two ends), so the trapezoid mass is
exactly the conserved quantity.  Interface fluxes are written

    F_{i+1/2} = p_{i+1/2} f_{i+1} + q_{i+1/2} f_i

and the implicit Euler step solves

    V_i f_i^{n+1} - (dt/tau) (F_{i+1/2} - F_{i-1/2}) = V_i f_i^n

with ``F = 0`` at both ends.  With Chang-Cooper weights the matrix is an
M-matrix and the cell exponents are exact differences of the drift
potential, so discrete equilibria coincide with the analytic ones at the
nodes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import contact
from .kernels import solve_tridiag

CENTRAL = "central"
CHANG_COOPER = "chang_cooper"
SCHEMES = (CENTRAL, CHANG_COOPER)
MASS_FLOOR = 1e-14


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid ``x_i = i dx`` on ``[0, x_max]``."""

    x_max: float
    n_points: int

    def __post_init__(self):
        if not self.x_max > 0 or self.n_points < 3:
            raise ValueError("grid needs x_max > 0 and at least 3 points")

    @classmethod
    def from_spacing(cls, x_max, dx):
        n = int(round(x_max / dx)) + 1
        if abs((n - 1) * dx - x_max) > 1e-9 * x_max:
            raise ValueError("x_max must be a multiple of dx")
        return cls(float(x_max), n)

    @property
    def dx(self):
        return self.x_max / (self.n_points - 1)

    @property
    def x(self):
        return np.linspace(0.0, self.x_max, self.n_points)

    @property
    def x_half(self):
        x = self.x
        return 0.5 * (x[1:] + x[:-1])

    @property
    def volumes(self):
        v = np.full(self.n_points, self.dx)
        v[0] = v[-1] = 0.5 * self.dx
        return v


def bernoulli_fn(w):
    """``w / (exp(w) - 1)`` with value 1 at ``w = 0``."""
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < 1e-10
    safe = np.where(small, 1.0, w)
    with np.errstate(over="ignore"):
        out = safe / np.expm1(safe)
    return np.where(small, 1.0 - 0.5 * w, out)


def flux_weights(A_half, D_half, dx, scheme=CHANG_COOPER):
    """Interface weights ``lambda`` of the flux ``A[(1-l) f_{i+1} + l f_i]``.

    Central differencing uses 1/2; Chang-Cooper uses
    ``1/w - 1/(exp(w) - 1)`` with ``w = dx A / D``.
    """
    A_half = np.asarray(A_half, dtype=float)
    if scheme == CENTRAL:
        return np.full_like(A_half, 0.5)
    if scheme != CHANG_COOPER:
        raise ValueError(f"unknown scheme {scheme!r}")
    w = dx * A_half / np.asarray(D_half, dtype=float)
    small = np.abs(w) < 1e-3
    safe = np.where(small, 1.0, w)
    with np.errstate(over="ignore"):
        lam = 1.0 / safe - 1.0 / np.expm1(safe)
    return np.where(small, 0.5 - w / 12.0 + w**3 / 720.0, lam)


def cell_exponents(params, delta, m, grid, control=None, compartment=0):
    """``w_{i+1/2} = int_{x_i}^{x_{i+1}} (A + D') / D dx`` for every cell.

    Cells away from the origin use exact differences of the drift potential;
    the first cell, where the integral diverges, uses the midpoint value.
    """
    x = grid.x
    w = np.empty(grid.n_points - 1)
    G = contact.drift_potential(params, delta, m, x[1:], control, compartment)
    w[1:] = np.diff(G)
    w[0] = grid.dx * contact.drift_potential_slope(params, delta, m, grid.x_half[:1], control, compartment)[0]
    return w


def interface_coefficients(params, delta, m, grid, control=None, compartment=0, scheme=CHANG_COOPER):
    """Flux coefficients ``(p, q)`` with ``F_{i+1/2} = p f_{i+1} + q f_i``."""
    alpha = contact.alpha_of(delta)
    D_half = 0.5 * params.sigma2 * grid.x_half ** (2.0 - alpha)
    w = cell_exponents(params, delta, m, grid, control, compartment)
    d = D_half / grid.dx
    if scheme == CHANG_COOPER:
        return d * bernoulli_fn(-w), -d * bernoulli_fn(w)
    if scheme == CENTRAL:
        return d * (1.0 + 0.5 * w), -d * (1.0 - 0.5 * w)
    raise ValueError(f"unknown scheme {scheme!r}")


def upwind_transport_coefficients(velocity_flux):
    """``(p, q)`` for a pure transport flux ``c(x) f`` with upwinding."""
    c = np.asarray(velocity_flux, dtype=float)
    return np.maximum(c, 0.0), np.minimum(c, 0.0)


def control_transport_coefficients(control, grid, compartment=0):
    """Upwind coefficients for ``d_x((1/nu) S^2 (x - x_T) f)``."""
    xh = grid.x_half
    c = control.bbar_at(xh) * control.S2(xh) * (xh - control.target(compartment)) / control.nu
    return upwind_transport_coefficients(c)


def assemble(p, q, rate):
    """Off-diagonals of the implicit matrix for flux coefficients ``(p, q)``.

    ``rate`` multiplies the flux difference (``dt / tau`` or ``dt``).
    """
    n = p.size + 1
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[1:] = rate * q
    upper[:-1] = -rate * p
    return lower, upper


def implicit_step(f, p, q, rate, grid):
    """One implicit Euler step for ``d_t f = d_x F`` given flux coefficients."""
    lower, upper = assemble(p, q, rate)
    vol = grid.volumes
    rhs = vol[:, None] * np.reshape(f, (grid.n_points, -1))
    out = solve_tridiag(lower, upper, vol, rhs)
    return out.reshape(np.shape(f))


def fp_step(f, grid, params, delta, m_frozen, dt, control=None, *, compartment=0,
            scheme=CHANG_COOPER, refine=False, max_iter=5, tol=1e-10):
    """Implicit Euler step of the (optionally controlled) Fokker-Planck equation.

    Parameters
    ----------
    f : ndarray
        Nodal density values.
    grid : Grid1D
    params : ContactParams
    delta : float
    m_frozen : float
        Mean used inside the drift, frozen during the step.
    dt : float
    control : ControlSpec, optional
        Folded into the drift as ``(tau/nu) S^2 (x - x_T)``.
    scheme : {"chang_cooper", "central"}
    refine : bool
        Fixed-point iterations on the frozen mean (at most ``max_iter``).

    Returns
    -------
    ndarray
        Updated density.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not m_frozen > 0:
        raise ValueError("m_frozen must be positive")
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n_points,):
        raise ValueError("f does not match the grid")
    m = float(m_frozen)
    for _ in range(max_iter if refine else 1):
        p, q = interface_coefficients(params, delta, m, grid, control, compartment, scheme)
        out = implicit_step(f, p, q, dt / params.tau, grid)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite values after the Fokker-Planck solve")
        if not refine:
            break
        _, m_new, _ = moments(out, grid)
        if m_new is None or abs(m_new - m) <= tol * m:
            break
        m = m_new
    return out


def control_step(f, grid, control, dt, compartment=0):
    """Implicit upwind step of the control transport ``d_t f = (1/nu) d_x(S^2 (x - x_T) f)``.

    ``f`` may carry trailing columns (several fields sharing the operator).
    """
    p, q = control_transport_coefficients(control, grid, compartment)
    return implicit_step(f, p, q, dt, grid)


def moments(f, grid, mass_floor=MASS_FLOOR):
    """Mass, mean and second moment per unit mass.

    Returns ``(rho, m, m2)`` with ``m`` and ``m2`` set to ``None`` when the
    mass is below ``mass_floor``.
    """
    x = grid.x if isinstance(grid, Grid1D) else np.asarray(grid, dtype=float)
    vol = _volumes(x)
    f = np.asarray(f, dtype=float)
    rho = float(vol @ f)
    if rho <= mass_floor:
        return rho, None, None
    return rho, float(vol @ (x * f)) / rho, float(vol @ (x * x * f)) / rho


def nodal_moments(F, grid, mass_floor=MASS_FLOOR):
    """Vectorized moments of the rows of ``F``; NaN marks absent moments."""
    x = grid.x
    vol = grid.volumes
    rho = F @ vol
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(rho > mass_floor, F @ (vol * x) / rho, np.nan)
        m2 = np.where(rho > mass_floor, F @ (vol * x * x) / rho, np.nan)
    return rho, m, m2


def _volumes(x):
    dx = np.diff(x)
    vol = np.zeros_like(x)
    vol[:-1] += 0.5 * dx
    vol[1:] += 0.5 * dx
    return vol


def relax(f0, grid, params, delta, dt, n_steps, *, m_frozen=None, control=None,
          scheme=CHANG_COOPER, debug_csv=None):
    """Repeated ``fp_step`` with the mean lagged per step (or held at ``m_frozen``).

    Optionally writes ``t,rho,m,m2`` per step to ``debug_csv``.
    """
    f = np.asarray(f0, dtype=float)
    rows = []
    for n in range(n_steps):
        rho, m, m2 = moments(f, grid)
        rows.append((n * dt, rho, m, m2))
        f = fp_step(f, grid, params, delta, m if m_frozen is None else m_frozen, dt, control, scheme=scheme)
    rows.append((n_steps * dt,) + moments(f, grid))
    if debug_csv is not None:
        with open(debug_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "rho", "m", "m2"])
            for row in rows:
                writer.writerow(["" if v is None else repr(float(v)) for v in row])
    return f
