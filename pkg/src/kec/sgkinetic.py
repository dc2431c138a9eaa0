"""Stochastic-Galerkin solver for the uncertain kinetic SEIR model.

Each compartment density is expanded as ``f(z, x, t) = sum_h f_h(x, t) Psi_h(z)``.
A time step is the Lie splitting

1. contact step: control transport (if any) followed by the projected
   Fokker-Planck relaxation, implicit in time, block tridiagonal in ``x``;
2. epidemic step: explicit Euler exchange between compartments.

The mean contact number inside the drift is evaluated at the quadrature
nodes from the state at the start of each sub-step (lagged).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import contact, fpsolve, uq
from .control import ControlSpec, relaxation_rate
from .kernels import solve_block_tridiag, solve_tridiag

COMPARTMENTS = ("S", "E", "I", "R")
STATS = ("mean_rho", "var_rho", "mean_m", "var_m")
SPLIT = "split"
FOLDED = "folded"
TOL_NEG = 1e-10
CLIP_MAX_ITER = 200
EXCHANGE_TOL = 1e-6
CONTROL_CFL = 0.5


class EpidemicStepError(FloatingPointError):
    """Explicit exchange produced negative densities beyond tolerance."""


@dataclass(frozen=True)
class EpiParams:
    """Epidemic rates: contact rate ``beta``, ``zeta = 1/latency``, ``gamma = 1/duration``."""

    beta: float
    zeta: float
    gamma: float

    def __post_init__(self):
        if min(self.beta, self.zeta, self.gamma) < 0:
            raise ValueError("epidemic rates must be nonnegative")


@dataclass
class KineticState:
    """gPC coefficients ``coeffs[J, h, i]`` of the four compartments."""

    coeffs: np.ndarray
    basis: uq.GpcBasis
    grid: fpsolve.Grid1D
    t: float = 0.0
    means: np.ndarray = field(default=None, repr=False)
    clip_count: int = 0

    def __post_init__(self):
        expected = (4, self.basis.n_modes, self.grid.n_points)
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs must have shape {expected}")
        if self.means is None:
            self.means = np.ones((4, self.basis.n_quad))

    def copy(self):
        return replace(self, coeffs=self.coeffs.copy(), means=self.means.copy())

    def nodal(self):
        """Densities at the quadrature nodes, shape (4, n_quad, N)."""
        return np.einsum("hq,jhi->jqi", self.basis.psi, self.coeffs)

    def mode_masses(self):
        return self.coeffs @ self.grid.volumes

    def nodal_moments(self):
        """``(rho, m)`` at the nodes, shape (4, n_quad); NaN where empty."""
        F = self.nodal()
        rho, m, _ = fpsolve.nodal_moments(F.reshape(-1, self.grid.n_points), self.grid)
        return rho.reshape(4, -1), m.reshape(4, -1)


def initial_state(basis, grid, rho0, m0, shape_lam):
    """Deterministic Gamma data ``rho_J Gamma(shape lam, rate lam/m_J)``.

    The Gamma profile is the ``delta = 1`` equilibrium with mean ``m_J``.
    """
    rho0 = np.broadcast_to(np.asarray(rho0, dtype=float), (4,))
    m0 = np.broadcast_to(np.asarray(m0, dtype=float), (4,))
    shape = contact.ContactParams(mu=shape_lam, sigma2=1.0)
    coeffs = np.zeros((4, basis.n_modes, grid.n_points))
    for j in range(4):
        if rho0[j] > 0:
            coeffs[j, 0] = rho0[j] * contact.equilibrium_density(shape, 1.0, m0[j], grid.x)
    means = np.repeat(m0[:, None], basis.n_quad, axis=1).astype(float)
    return KineticState(coeffs, basis, grid, 0.0, means)


@dataclass
class SgOperators:
    """Galerkin tables at the half points, each of shape (N - 1, M + 1, M + 1).

    ``drift[i, h, k] = sum_q w_q A(z_q, x_{i+1/2}) Psi_k Psi_h`` and likewise
    ``diffusion`` for ``D``.  ``upper`` and ``lower`` are the projected flux
    coefficients multiplying ``f_{i+1}`` and ``f_i``.
    """

    drift: np.ndarray
    diffusion: np.ndarray
    upper: np.ndarray
    lower: np.ndarray


def _product_table(basis):
    """``T[q, h*K + k] = w_q Psi_h(z_q) Psi_k(z_q)``."""
    psi = basis.psi
    return (basis.weights[:, None, None] * psi.T[:, :, None] * psi.T[:, None, :]).reshape(basis.n_quad, -1)


def _galerkin(nodal_values, table, K):
    return (nodal_values.T @ table).reshape(-1, K, K)


def _means_of(coeffs, basis, grid, fallback, name="S"):
    """Nodal means of one compartment; empty nodes keep ``fallback``."""
    F = basis.psi.T @ coeffs
    rho, m, _ = fpsolve.nodal_moments(F, grid)
    filled = rho > fpsolve.MASS_FLOOR
    if np.any(filled & ~(m > 0)):
        raise FloatingPointError(f"nonpositive nodal mean in compartment {name}")
    return np.where(filled, m, fallback)


def _node_means(state, j):
    state.means[j] = _means_of(state.coeffs[j], state.basis, state.grid, state.means[j], COMPARTMENTS[j])
    return state.means[j]


def _nodal_flux_coefficients(params, basis, grid, means, control, j, scheme):
    nq = basis.n_quad
    p = np.empty((nq, grid.n_points - 1))
    q = np.empty_like(p)
    for k, (delta, m) in enumerate(zip(basis.deltas, means)):
        p[k], q[k] = fpsolve.interface_coefficients(params, float(delta), float(m), grid, control, j, scheme)
    return p, q


def assemble_sg_operators(state, params, control=None, compartment=0, scheme=fpsolve.CENTRAL):
    """Projected drift, diffusion and flux tables for one compartment.

    The drift is written in the ``1/tau`` scaled form, so an active
    ``control`` enters it as ``(tau/nu) S^2 (x - x_T)``, i.e. at rate ``1/nu``.
    """
    basis, grid = state.basis, state.grid
    means = _means_of(state.coeffs[compartment], basis, grid, state.means[compartment],
                      COMPARTMENTS[compartment])
    K = basis.n_modes
    table = _product_table(basis)
    xh = grid.x_half
    A = np.empty((basis.n_quad, xh.size))
    D = np.empty_like(A)
    for k, (delta, m) in enumerate(zip(basis.deltas, means)):
        A[k], D[k] = contact.fp_coefficients(params, float(delta), float(m), xh, control, compartment)
    p, q = _nodal_flux_coefficients(params, basis, grid, means, control, compartment, scheme)
    return SgOperators(_galerkin(A, table, K), _galerkin(D, table, K),
                       _galerkin(p, table, K), _galerkin(q, table, K))


def _fp_block_step(coeffs, p_tab, q_tab, rate, grid):
    n = grid.n_points
    K = coeffs.shape[0]
    vol = grid.volumes
    if K == 1:
        lower, upper = fpsolve.assemble(p_tab[:, 0, 0], q_tab[:, 0, 0], rate)
        return solve_tridiag(lower, upper, vol, vol * coeffs[0])[None, :]
    lower = np.zeros((n, K, K))
    upper = np.zeros((n, K, K))
    lower[1:] = rate * q_tab
    upper[:-1] = -rate * p_tab
    rhs = vol[:, None] * coeffs.T
    return solve_block_tridiag(lower, upper, vol, rhs).T


def _clip(coeffs, basis, grid, max_iter=CLIP_MAX_ITER):
    """Remove nodal undershoots below ``-TOL_NEG * max f``.

    Negative nodal values are set to zero, each node's mass is restored by
    rescaling and the result is projected back onto the basis.  With more
    quadrature nodes than modes the projection reintroduces smaller
    undershoots, so the cycle is repeated (alternating projections).  Mode
    masses are preserved at every pass.
    """
    vol = grid.volumes
    F = basis.psi.T @ coeffs
    tol = TOL_NEG * max(np.max(F), 0.0)
    if not np.min(F) < -tol:
        return coeffs, False
    mass = F @ vol
    for _ in range(max_iter):
        Fc = np.maximum(F, 0.0)
        mass_c = Fc @ vol
        scale = np.where(mass_c > 0, mass / np.where(mass_c > 0, mass_c, 1.0), 0.0)
        coeffs = uq.project(Fc * scale[:, None], basis)
        F = basis.psi.T @ coeffs
        if not np.min(F) < -tol:
            break
    return coeffs, True


def control_substeps(control, dt, m_max, lam):
    """Sub-steps keeping ``dt_sub * rate <= CONTROL_CFL`` in the split coupling."""
    rate = relaxation_rate(control, m_max, lam) if control is not None else 0.0
    return max(1, int(math.ceil(dt * rate / CONTROL_CFL)))


def _contact_one(state, params, control, dt, j, scheme, coupling, clip):
    coeffs = state.coeffs[j]
    if not np.any(coeffs):
        return coeffs, False
    basis, grid = state.basis, state.grid
    active = control is not None and control.active
    if active and coupling not in (SPLIT, FOLDED):
        raise ValueError(f"unknown control coupling {coupling!r}")
    split = active and coupling == SPLIT
    folded = control if active and coupling == FOLDED else None
    n_sub = control_substeps(control, dt, float(np.max(state.means[j])), params.lam) if split else 1
    h = dt / n_sub
    table = _product_table(basis)
    K = basis.n_modes
    means = state.means[j]
    if n_sub > 1:
        # intermediate relaxations only restore the shape: they use the drift
        # parameter whose equilibrium keeps the current mean
        ratio = np.array([contact.equilibrium_mean_ratio(params.lam, d) for d in basis.deltas])
    for s in range(n_sub):
        if split:
            coeffs = fpsolve.control_step(coeffs.T, grid, control, h, j).T
        means = _means_of(coeffs, basis, grid, means, COMPARTMENTS[j])
        drift_m = means if s == n_sub - 1 else means / ratio
        p, q = _nodal_flux_coefficients(params, basis, grid, drift_m, folded, j, scheme)
        coeffs = _fp_block_step(coeffs, _galerkin(p, table, K), _galerkin(q, table, K), h / params.tau, grid)
    if not np.all(np.isfinite(coeffs)):
        raise FloatingPointError(f"non-finite values in the contact step of {COMPARTMENTS[j]}")
    clipped = False
    if clip:
        coeffs, clipped = _clip(coeffs, basis, grid)
    return coeffs, clipped


def sg_contact_step(state, params, control, dt, *, scheme=fpsolve.CENTRAL, coupling=SPLIT,
                    clip=True, jobs=1):
    """Implicit contact/control step for every compartment.

    Parameters
    ----------
    state : KineticState
    params : ContactParams
    control : ControlSpec or None
    dt : float
    scheme : {"central", "chang_cooper"}
    coupling : {"split", "folded"}
        ``split`` alternates implicit control transport and relaxation,
        sub-cycled so that ``dt_sub`` times the control rate stays below
        ``CONTROL_CFL``; ``folded`` adds the control to the drift.
    clip : bool
        Clip nodal undershoots below ``-TOL_NEG * max f``.
    jobs : int
        Threads used across compartments.

    Returns
    -------
    KineticState
        A new state; ``clip_count`` counts compartments that were clipped.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    new = state.copy()

    def work(j):
        return _contact_one(state, params, control, dt, j, scheme, coupling, clip)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, 4)) as pool:
            results = list(pool.map(work, range(4)))
    else:
        results = [work(j) for j in range(4)]
    for j, (coeffs, clipped) in enumerate(results):
        new.coeffs[j] = coeffs
        new.clip_count += int(clipped)
    new.means = state.means.copy()
    for j in range(4):
        _node_means(new, j)
    return new


def _exchange(coeffs, epi, h, basis, grid, table):
    x, vol = grid.x, grid.volumes
    S, E, I, R = coeffs
    g = basis.psi.T @ (I @ (vol * x))
    gmat = (g @ table).reshape(basis.n_modes, basis.n_modes)
    incid = epi.beta * x * (gmat @ S)
    out = np.empty_like(coeffs)
    out[0] = S - h * incid
    out[1] = E + h * (incid - epi.zeta * E)
    out[2] = I + h * (epi.zeta * E - epi.gamma * I)
    out[3] = R + h * epi.gamma * I
    return out, g


def epidemic_step(state, epi, dt, check=True):
    """Explicit Euler exchange ``S -> E -> I -> R`` in coefficient space.

    The step is subdivided when ``dt * max(zeta, gamma, beta x_max g)`` would
    reach 1 (``g`` is the nodal ``m_I rho_I``), which keeps the explicit
    update positivity preserving at the nodes.
    """
    basis, grid = state.basis, state.grid
    table = _product_table(basis)
    vol, x = grid.volumes, grid.x
    coeffs = state.coeffs
    F_old = np.einsum("hq,jhi->jqi", basis.psi, coeffs) if check else None
    t_left = dt
    while t_left > 0:
        g = basis.psi.T @ (coeffs[2] @ (vol * x))
        rate = max(epi.zeta, epi.gamma, epi.beta * grid.x_max * float(np.max(np.abs(g))))
        n_sub = max(1, math.floor(t_left * rate) + 1) if rate * t_left >= 1.0 else 1
        h = t_left / n_sub
        coeffs, _ = _exchange(coeffs, epi, h, basis, grid, table)
        t_left -= h
        if n_sub == 1:
            break
    new = state.copy()
    new.coeffs = coeffs
    new.t = state.t + dt
    if check:
        # pointwise Euler keeps nodal values nonnegative when h * rate < 1;
        # the Galerkin product aliases slightly, hence the looser tolerance
        F_new = np.einsum("hq,jhi->jqi", basis.psi, coeffs)
        scale = max(float(np.max(F_old)), float(np.max(F_new)), 0.0)
        floor = 2.0 * min(float(np.min(F_old)), 0.0) - EXCHANGE_TOL * scale
        for j in range(4):
            worst = float(np.min(F_new[j]))
            if worst < floor:
                k, i = np.unravel_index(np.argmin(F_new[j]), F_new[j].shape)
                raise EpidemicStepError(
                    f"negative density {worst:.3e} in {COMPARTMENTS[j]} at x={x[i]:.4g}, "
                    f"node {k}, t={state.t:.4g}; reduce dt"
                )
    return new


def statistics(state):
    """E_z and Var_z of the masses and means, arrays of shape (4,)."""
    rho_hat = state.mode_masses()
    mean_rho, var_rho = uq.expectation_and_variance(rho_hat.T)
    _, m = state.nodal_moments()
    m_hat = uq.project(m.T, state.basis)
    mean_m, var_m = uq.expectation_and_variance(m_hat)
    return {"mean_rho": mean_rho, "var_rho": var_rho, "mean_m": mean_m, "var_m": var_m}


def damping_statistics(state, x_T, compartment=0):
    """E_z and Var_z of ``G = int (x - x_T)^2 f dx`` for one compartment."""
    F = state.basis.psi.T @ state.coeffs[compartment]
    x = state.grid.x
    G = F @ (state.grid.volumes * (x - x_T) ** 2)
    g_hat = uq.project(G, state.basis)
    return uq.expectation_and_variance(g_hat)


def contact_only(law, order, params, grid, dt, T, control=None, *, m0=10.0, init_lam=None,
                 scheme=fpsolve.CENTRAL, clip=True, coupling=SPLIT, compartment=0):
    """Contact (and control) dynamics of a single unit-mass compartment."""
    basis = uq.build_basis(law, order)
    rho0 = np.zeros(4)
    rho0[compartment] = 1.0
    state = initial_state(basis, grid, rho0, m0, params.lam if init_lam is None else init_lam)
    for _ in range(n_steps_for(T, dt)):
        state = sg_contact_step(state, params, control, dt, scheme=scheme, coupling=coupling, clip=clip)
    return state


@dataclass(frozen=True)
class KineticScenario:
    """Everything needed for one kinetic run."""

    law: uq.UncertaintyLaw
    order: int
    params: contact.ContactParams
    epi: EpiParams
    grid: fpsolve.Grid1D
    dt: float
    T: float
    control: ControlSpec = ControlSpec()
    rho0: tuple = (0.97, 0.01, 0.01, 0.01)
    m0: tuple = (10.0, 10.0, 10.0, 10.0)
    init_lam: float | None = None
    scheme: str = fpsolve.CENTRAL
    coupling: str = SPLIT
    clip: bool = True
    epidemic: bool = True
    stride: int = 10
    snapshot_times: tuple = ()


@dataclass
class KineticResult:
    times: np.ndarray
    stats: dict
    state: KineticState
    snapshots: list
    clip_count: int


def n_steps_for(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a positive multiple of dt")
    return n


def run_kinetic(sc, jobs=1, progress=None):
    """Alternate contact and epidemic steps; record statistics every ``stride`` steps."""
    basis = uq.build_basis(sc.law, sc.order)
    lam0 = sc.params.lam if sc.init_lam is None else sc.init_lam
    state = initial_state(basis, sc.grid, sc.rho0, sc.m0, lam0)
    n_steps = n_steps_for(sc.T, sc.dt)
    snap_steps = {n_steps_for(t, sc.dt) if t > 0 else 0 for t in sc.snapshot_times}
    times, rows, snaps = [], [], []

    def record(n):
        times.append(state.t)
        rows.append(statistics(state))
        if n in snap_steps:
            snaps.append((state.t, state.coeffs.copy()))

    record(0)
    for n in range(1, n_steps + 1):
        state = sg_contact_step(state, sc.params, sc.control, sc.dt, scheme=sc.scheme,
                                coupling=sc.coupling, clip=sc.clip, jobs=jobs)
        if sc.epidemic:
            state = epidemic_step(state, sc.epi, sc.dt)
        else:
            state.t += sc.dt
        if n % sc.stride == 0 or n == n_steps or n in snap_steps:
            record(n)
        if progress is not None:
            progress(n, n_steps)
    stats = {key: np.array([r[key] for r in rows]) for key in STATS}
    return KineticResult(np.array(times), stats, state, snaps, state.clip_count)


def sg_convergence_study(params, grid, dt, T, M_list, M_ref, *, law=None, scheme=fpsolve.CENTRAL,
                         m0=10.0, init_lam=None, clip=False):
    """L2-in-z error of the first moment at ``T`` against an order-``M_ref`` run.

    Contact dynamics only: no control, no epidemic exchange, Gamma initial
    data with mean ``m0``.  Errors are measured at the quadrature nodes of
    the reference basis.

    Returns
    -------
    dict
        ``{M: error}``.
    """
    if M_ref <= max(M_list):
        raise ValueError("M_ref must exceed every M in M_list")
    law = uq.UncertaintyLaw.uniform(-1.0, 1.0) if law is None else law
    lam0 = params.lam if init_lam is None else init_lam
    ref_basis = uq.build_basis(law, M_ref)

    def final_means(M):
        basis = uq.build_basis(law, M)
        state = initial_state(basis, grid, (1.0, 0.0, 0.0, 0.0), m0, lam0)
        for _ in range(n_steps_for(T, dt)):
            state = sg_contact_step(state, params, None, dt, scheme=scheme, clip=clip)
        F = uq.reconstruct(state.coeffs[0], basis, ref_basis.nodes)
        _, m, _ = fpsolve.nodal_moments(F, grid)
        return m

    m_ref = final_means(M_ref)
    errors = {}
    for M in M_list:
        m = m_ref if M == M_ref else final_means(M)
        errors[M] = float(np.sqrt(ref_basis.weights @ (m - m_ref) ** 2))
    return errors
