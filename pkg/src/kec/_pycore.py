"""Pure-Python twin of ``_core.pyx``.

Same algorithm and argument conventions; used when the compiled extension is
unavailable or when ``KEC_KERNELS=python`` is set.
"""
import numpy as np


def tridiag_solve(lower, upper, vol, rhs):
    n, r = rhs.shape
    x = np.empty((n, r))
    piv = np.empty(n)
    lo = lower.tolist()
    up = upper.tolist()
    vo = vol.tolist()
    w = vo[0]
    piv[0] = w - lo[1] if n > 1 else w
    x[0] = rhs[0]
    pv = piv.tolist()
    for i in range(1, n):
        p = pv[i - 1]
        if p == 0.0 or not np.isfinite(p):
            raise np.linalg.LinAlgError("singular pivot in conservative tridiagonal solve")
        f = lo[i] / p
        w = vo[i] - w * (up[i - 1] / p)
        pv[i] = w - lo[i + 1] if i < n - 1 else w
        x[i] = rhs[i] - f * x[i - 1]
    if pv[n - 1] == 0.0 or not np.isfinite(pv[n - 1]):
        raise np.linalg.LinAlgError("singular pivot in conservative tridiagonal solve")
    x[n - 1] /= pv[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = (x[i] - up[i] * x[i + 1]) / pv[i]
    return x


def block_tridiag_solve(lower, upper, vol, rhs):
    n, k = rhs.shape
    eye = np.eye(k)
    gmat = np.empty((n, k, k))
    gvec = np.empty((n, k))
    w_prev = None
    for i in range(n):
        if i == 0:
            w = vol[0] * eye
            dp = rhs[0].copy()
        else:
            w = vol[i] * eye - w_prev @ gmat[i - 1]
            dp = rhs[i] - lower[i] @ gvec[i - 1]
        piv = w - lower[i + 1] if i < n - 1 else w
        if not np.all(np.isfinite(piv)):
            raise np.linalg.LinAlgError("singular pivot block in conservative block solve")
        try:
            if i < n - 1:
                sol = np.linalg.solve(piv, np.column_stack([upper[i], dp]))
                gmat[i] = sol[:, :k]
                gvec[i] = sol[:, k]
            else:
                gvec[i] = np.linalg.solve(piv, dp)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular pivot block in conservative block solve") from exc
        w_prev = w
    x = np.empty((n, k))
    x[n - 1] = gvec[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = gvec[i] - gmat[i] @ x[i + 1]
    return x


_SELECTIVE = ("off", "uniform", "sqrtx")


def seir_rk4(y0, lam_f, beta, zeta, gamma, sel, x_T, nu, clamp, clamp_val, floor, dt, n_steps, stride):
    """RK4 for independent closed-SEIR trajectories, vectorized over rows of ``y0``."""
    from .control import ControlSpec
    from .macro import macro_rhs
    from .sgkinetic import EpiParams

    epi = EpiParams(beta, zeta, gamma)
    control = ControlSpec(_SELECTIVE[sel], tuple(x_T), nu) if sel else None
    clamp_mI = clamp_val if clamp else None

    def f(v):
        return macro_rhs(v, epi, lam_f, control, clamp_mI, floor)

    y = np.array(y0, dtype=float)
    out = [y.copy()]
    for s in range(1, n_steps + 1):
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite macro state at t={s * dt:.6g}")
        if s % stride == 0 or s == n_steps:
            out.append(y.copy())
    return np.array(out)
