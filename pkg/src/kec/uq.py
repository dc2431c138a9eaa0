"""Polynomial chaos machinery for a scalar random input ``z``.

Two laws are supported: uniform on an interval (orthonormal shifted Legendre
polynomials, Gauss-Legendre quadrature) and a two-atom Bernoulli law
(exact two-point quadrature).  The random input enters the model through
``delta = delta_map(z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIFORM = "uniform"
BERNOULLI = "bernoulli"
IDENTITY = "identity"
AFFINE_FLIP = "affine_flip"


@dataclass(frozen=True)
class UncertaintyLaw:
    """Distribution of ``z`` and the map ``z -> delta``.

    Parameters
    ----------
    kind : {"uniform", "bernoulli"}
    a, b : float
        Interval of the uniform law.
    p : float
        Probability of the atom ``z = 1`` (``delta = -1`` under the affine flip).
    delta_map : {"identity", "affine_flip"}
        ``delta = z`` or ``delta = 1 - 2 z``.
    quad_order : int
        Minimum number of Gauss nodes (uniform law only); 0 means default.
    """

    kind: str
    a: float = -1.0
    b: float = 1.0
    p: float = 0.5
    delta_map: str = IDENTITY
    quad_order: int = 0

    def __post_init__(self):
        if self.kind not in (UNIFORM, BERNOULLI):
            raise ValueError(f"unknown law kind {self.kind!r}")
        if self.delta_map not in (IDENTITY, AFFINE_FLIP):
            raise ValueError(f"unknown delta map {self.delta_map!r}")
        if self.quad_order < 0:
            raise ValueError("quad_order must be nonnegative")
        if self.kind == UNIFORM:
            if not self.a < self.b:
                raise ValueError(f"degenerate interval [{self.a}, {self.b}]")
            lo, hi = sorted(self.delta(np.array([self.a, self.b])))
            if lo < -1.0 - 1e-14 or hi > 1.0 + 1e-14:
                raise ValueError("delta(z) leaves [-1, 1] on the interval")
        else:
            if not 0.0 <= self.p <= 1.0:
                raise ValueError("Bernoulli p must lie in [0, 1]")

    @classmethod
    def uniform(cls, a, b, delta_map=IDENTITY, quad_order=0):
        return cls(UNIFORM, a=float(a), b=float(b), delta_map=delta_map, quad_order=int(quad_order))

    @classmethod
    def bernoulli(cls, p, delta_map=AFFINE_FLIP):
        return cls(BERNOULLI, p=float(p), delta_map=delta_map)

    def delta(self, z):
        z = np.asarray(z, dtype=float)
        return z.copy() if self.delta_map == IDENTITY else 1.0 - 2.0 * z


def legendre_table(xi, order):
    """Orthonormal Legendre values ``sqrt(2h+1) P_h(xi)`` for h = 0..order.

    Uses the three-term recurrence on the classical polynomials and applies
    the normalization at the end.
    """
    xi = np.asarray(xi, dtype=float)
    out = np.empty((order + 1,) + xi.shape)
    out[0] = 1.0
    if order >= 1:
        out[1] = xi
    for n in range(1, order):
        out[n + 1] = ((2 * n + 1) * xi * out[n] - n * out[n - 1]) / (n + 1)
    scale = np.sqrt(2.0 * np.arange(order + 1) + 1.0)
    return out * scale.reshape((-1,) + (1,) * xi.ndim)


@dataclass(frozen=True)
class GpcBasis:
    """Orthonormal basis with its quadrature rule.

    Attributes
    ----------
    order : int
        Highest polynomial degree ``M``.
    law : UncertaintyLaw
    nodes, weights : ndarray, shape (n_quad,)
        Quadrature abscissae in ``z`` and probability weights (sum to 1).
    psi : ndarray, shape (M + 1, n_quad)
        ``psi[h, q] = Psi_h(z_q)``.
    """

    order: int
    law: UncertaintyLaw
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)

    @property
    def n_modes(self):
        return self.order + 1

    @property
    def n_quad(self):
        return self.nodes.size

    @property
    def deltas(self):
        return self.law.delta(self.nodes)

    def evaluate(self, z):
        """Basis values at arbitrary points, shape (M + 1, len(z))."""
        return _basis_values(self.law, self.order, z)

    def gram(self):
        return (self.psi * self.weights) @ self.psi.T


def _basis_values(law, order, z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if law.kind == UNIFORM:
        return legendre_table((2.0 * z - law.a - law.b) / (law.b - law.a), order)
    out = np.ones((order + 1, z.size))
    if order == 1:
        out[1] = (z - law.p) / np.sqrt(law.p * (1.0 - law.p))
    return out


def build_basis(law, order):
    """Construct the orthonormal basis of degree ``order`` for ``law``."""
    order = int(order)
    if order < 0:
        raise ValueError("order must be nonnegative")
    if law.kind == BERNOULLI:
        if order > 1:
            raise ValueError("a two-atom law supports at most order 1")
        if order == 1 and law.p in (0.0, 1.0):
            raise ValueError("order 1 needs both atoms to carry mass (0 < p < 1)")
        nodes = np.array([1.0, 0.0])
        weights = np.array([law.p, 1.0 - law.p])
    else:
        n_quad = max(law.quad_order, 2 * order + 2)
        xi, w = np.polynomial.legendre.leggauss(n_quad)
        nodes = 0.5 * (law.a + law.b) + 0.5 * (law.b - law.a) * xi
        weights = 0.5 * w
    psi = _basis_values(law, order, nodes)
    for arr in (nodes, weights, psi):
        arr.setflags(write=False)
    return GpcBasis(order, law, nodes, weights, psi)


def project(samples, basis):
    """Coefficients ``g_h = sum_q w_q g(z_q) Psi_h(z_q)``.

    ``samples`` has the quadrature index first; trailing axes are carried.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != basis.n_quad:
        raise ValueError(f"expected {basis.n_quad} nodal samples, got {samples.shape[0]}")
    flat = samples.reshape(basis.n_quad, -1)
    coeffs = (basis.psi * basis.weights) @ flat
    return coeffs.reshape((basis.n_modes,) + samples.shape[1:])


def reconstruct(coeffs, basis, z=None):
    """Evaluate ``sum_h g_h Psi_h`` at the quadrature nodes or at ``z``."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != basis.n_modes:
        raise ValueError(f"expected {basis.n_modes} coefficients, got {coeffs.shape[0]}")
    table = basis.psi if z is None else basis.evaluate(z)
    flat = coeffs.reshape(basis.n_modes, -1)
    return (table.T @ flat).reshape((table.shape[1],) + coeffs.shape[1:])


def expectation_and_variance(coeffs):
    """Mean ``g_0`` and variance ``sum_{h>=1} g_h**2`` along the first axis."""
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs[0], np.sum(coeffs[1:] ** 2, axis=0)
