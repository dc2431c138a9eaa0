"""Backend selection for the hot linear-algebra kernels.

The compiled Cython core is used when importable; otherwise (or when the
environment variable ``KEC_KERNELS=python`` is set) the pure-Python twin is
used.  Both expose the same functions:

``solve_tridiag(lower, upper, vol, rhs)``
    Scalar column-conservative tridiagonal system with one or many
    right-hand sides.
``solve_block_tridiag(lower, upper, vol, rhs)``
    Block version with ``(K, K)`` blocks and a single right-hand side.
``integrate_seir(...)``
    RK4 for the closed SEIR system, one trajectory per row.

In both, ``lower[i]`` multiplies ``x[i-1]`` in row ``i`` and ``upper[i]``
multiplies ``x[i+1]``; the diagonal is implied by requiring every column to
sum to ``vol[i]`` (times the identity in the block case).
"""
import os

import numpy as np

from . import _pycore

_compiled = None
if os.environ.get("KEC_KERNELS", "").lower() != "python":
    try:
        from . import _core as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _pycore


def _prepare(lower, upper, vol, rhs, block):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    lower = np.ascontiguousarray(lower, dtype=np.float64)
    upper = np.ascontiguousarray(upper, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    n = vol.shape[0]
    if n < 1 or lower.shape[0] != n or upper.shape[0] != n or rhs.shape[0] != n:
        raise ValueError("lower, upper, vol and rhs must share the leading dimension")
    if block:
        k = rhs.shape[1]
        if lower.shape[1:] != (k, k) or upper.shape[1:] != (k, k):
            raise ValueError("block shapes do not match the right-hand side")
    return lower, upper, vol, rhs


def solve_tridiag(lower, upper, vol, rhs, backend=None):
    """Solve a scalar conservative tridiagonal system.

    ``rhs`` may be 1-D (single right-hand side) or ``(n, r)``.
    """
    impl = _select(backend)
    squeeze = np.ndim(rhs) == 1
    rhs2 = np.reshape(rhs, (len(vol), -1))
    lower, upper, vol, rhs2 = _prepare(lower, upper, vol, rhs2, block=False)
    out = impl.tridiag_solve(lower, upper, vol, rhs2)
    return out[:, 0] if squeeze else out


def solve_block_tridiag(lower, upper, vol, rhs, backend=None):
    """Solve a conservative block tridiagonal system, ``rhs`` of shape ``(n, K)``."""
    impl = _select(backend)
    lower, upper, vol, rhs = _prepare(lower, upper, vol, rhs, block=True)
    return impl.block_tridiag_solve(lower, upper, vol, rhs)


_SEL_CODES = {"off": 0, "uniform": 1, "sqrtx": 2}


def integrate_seir(y0, lam_f, epi, control, clamp_mI, mass_floor, dt, n_steps, stride=1, backend=None):
    """RK4 trajectories of the closed SEIR system.

    Parameters
    ----------
    y0 : ndarray, shape (n_atoms, 8)
    lam_f : ndarray, shape (n_atoms,)
        Closure factors.
    epi : EpiParams
    control : ControlSpec or None
    clamp_mI : float or None

    Returns
    -------
    ndarray, shape (n_out, n_atoms, 8)
    """
    impl = _select(backend)
    y0 = np.ascontiguousarray(np.atleast_2d(y0), dtype=np.float64)
    lam_f = np.ascontiguousarray(np.broadcast_to(np.asarray(lam_f, dtype=np.float64), (y0.shape[0],)))
    if y0.shape[1] != 8:
        raise ValueError("state rows must have 8 entries")
    sel = 0 if control is None else _SEL_CODES[control.selective]
    x_T = np.ascontiguousarray(control.x_T if control is not None else (1.0,) * 4, dtype=np.float64)
    nu = float(control.nu) if control is not None else 1.0
    clamp = clamp_mI is not None
    return impl.seir_rk4(y0, lam_f, float(epi.beta), float(epi.zeta), float(epi.gamma), int(sel), x_T, nu,
                         int(clamp), float(clamp_mI) if clamp else 0.0, float(mass_floor), float(dt),
                         int(n_steps), int(stride))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pycore
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")
