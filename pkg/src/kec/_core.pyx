# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled solvers for column-conservative (block) tridiagonal systems.

Both routines assume the matrix is

    row i:  lower[i] * x[i-1] + B[i] * x[i] + upper[i] * x[i+1] = rhs[i]

where the diagonal is *implied* by the column sums: ``B[i] = vol[i] * I -
upper[i-1] - lower[i+1]``.  This is the structure of an implicit conservative
flux discretization.  Elimination carries the column sums (``W``) instead of
forming differences of large numbers, so the diagonal never suffers
cancellation when ``dt / tau`` is huge.  For M-matrices every operation is
an addition of nonnegative numbers.
"""
import numpy as np

from libc.math cimport fabs, isfinite


def tridiag_solve(const double[::1] lower, const double[::1] upper,
                  const double[::1] vol, const double[:, ::1] rhs):
    cdef Py_ssize_t n = vol.shape[0]
    cdef Py_ssize_t r = rhs.shape[1]
    cdef Py_ssize_t i, j
    cdef double w, piv_prev, f
    cdef int bad = 0

    out = np.empty((n, r), dtype=np.float64)
    piv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] x = out
    cdef double[::1] piv = piv_arr

    with nogil:
        w = vol[0]
        piv[0] = w - lower[1] if n > 1 else w
        for j in range(r):
            x[0, j] = rhs[0, j]
        for i in range(1, n):
            piv_prev = piv[i - 1]
            if piv_prev == 0.0 or not isfinite(piv_prev):
                bad = 1
                break
            f = lower[i] / piv_prev
            w = vol[i] - w * (upper[i - 1] / piv_prev)
            piv[i] = w - lower[i + 1] if i < n - 1 else w
            for j in range(r):
                x[i, j] = rhs[i, j] - f * x[i - 1, j]
        if not bad:
            if piv[n - 1] == 0.0 or not isfinite(piv[n - 1]):
                bad = 1
        if not bad:
            for j in range(r):
                x[n - 1, j] = x[n - 1, j] / piv[n - 1]
            for i in range(n - 2, -1, -1):
                for j in range(r):
                    x[i, j] = (x[i, j] - upper[i] * x[i + 1, j]) / piv[i]
    if bad:
        raise np.linalg.LinAlgError("singular pivot in conservative tridiagonal solve")
    return out


cdef int _lu_factor(double* a, Py_ssize_t k, Py_ssize_t* perm) noexcept nogil:
    """In-place LU with partial pivoting of a row-major k x k block."""
    cdef Py_ssize_t c, rr, p, cc
    cdef double amax, t, piv
    for c in range(k):
        perm[c] = c
    for c in range(k):
        p = c
        amax = fabs(a[c * k + c])
        for rr in range(c + 1, k):
            if fabs(a[rr * k + c]) > amax:
                amax = fabs(a[rr * k + c])
                p = rr
        if amax == 0.0 or not isfinite(amax):
            return 1
        if p != c:
            for cc in range(k):
                t = a[c * k + cc]
                a[c * k + cc] = a[p * k + cc]
                a[p * k + cc] = t
            rr = perm[c]
            perm[c] = perm[p]
            perm[p] = rr
        piv = a[c * k + c]
        for rr in range(c + 1, k):
            a[rr * k + c] /= piv
            t = a[rr * k + c]
            if t != 0.0:
                for cc in range(c + 1, k):
                    a[rr * k + cc] -= t * a[c * k + cc]
    return 0


cdef void _lu_solve(const double* lu, Py_ssize_t k, const Py_ssize_t* perm,
                    const double* b, Py_ssize_t ldb, Py_ssize_t nrhs,
                    double* out, double* tmp) noexcept nogil:
    """Solve LU x = P b for ``nrhs`` columns; b and out are row-major (k, ldb)."""
    cdef Py_ssize_t col, rr, cc
    cdef double s
    for col in range(nrhs):
        for rr in range(k):
            tmp[rr] = b[perm[rr] * ldb + col]
        for rr in range(k):
            s = tmp[rr]
            for cc in range(rr):
                s -= lu[rr * k + cc] * tmp[cc]
            tmp[rr] = s
        for rr in range(k - 1, -1, -1):
            s = tmp[rr]
            for cc in range(rr + 1, k):
                s -= lu[rr * k + cc] * tmp[cc]
            tmp[rr] = s / lu[rr * k + rr]
        for rr in range(k):
            out[rr * ldb + col] = tmp[rr]


def block_tridiag_solve(const double[:, :, ::1] lower, const double[:, :, ::1] upper,
                        const double[::1] vol, const double[:, ::1] rhs):
    cdef Py_ssize_t n = vol.shape[0]
    cdef Py_ssize_t k = rhs.shape[1]
    cdef Py_ssize_t i, a, b, c
    cdef int bad = 0
    cdef double s

    out = np.empty((n, k), dtype=np.float64)
    gmat_arr = np.empty((n, k, k), dtype=np.float64)
    gvec_arr = np.empty((n, k), dtype=np.float64)
    work_arr = np.empty((4, k, k), dtype=np.float64)
    perm_arr = np.empty(k, dtype=np.intp)
    tmp_arr = np.empty(k, dtype=np.float64)
    dp_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] x = out
    cdef double[:, :, ::1] gmat = gmat_arr
    cdef double[:, ::1] gvec = gvec_arr
    cdef double[:, :, ::1] work = work_arr
    cdef Py_ssize_t[::1] perm = perm_arr
    cdef double[::1] tmp = tmp_arr
    cdef double[::1] dp = dp_arr
    # work[0] = W (column sums), work[1] = W_prev, work[2] = pivot block / LU

    with nogil:
        for i in range(n):
            # column-sum block W_i and modified right-hand side d'_i
            if i == 0:
                for a in range(k):
                    for b in range(k):
                        work[0, a, b] = 0.0
                    work[0, a, a] = vol[0]
                    dp[a] = rhs[0, a]
            else:
                for a in range(k):
                    for b in range(k):
                        s = 0.0
                        for c in range(k):
                            s += work[1, a, c] * gmat[i - 1, c, b]
                        work[0, a, b] = -s
                    work[0, a, a] += vol[i]
                    s = rhs[i, a]
                    for c in range(k):
                        s -= lower[i, a, c] * gvec[i - 1, c]
                    dp[a] = s
            for a in range(k):
                for b in range(k):
                    work[2, a, b] = work[0, a, b]
                    if i < n - 1:
                        work[2, a, b] -= lower[i + 1, a, b]
            if _lu_factor(&work[2, 0, 0], k, &perm[0]):
                bad = 1
                break
            if i < n - 1:
                _lu_solve(&work[2, 0, 0], k, &perm[0], &upper[i, 0, 0], k, k,
                          &gmat[i, 0, 0], &tmp[0])
            _lu_solve(&work[2, 0, 0], k, &perm[0], &dp[0], 1, 1, &gvec[i, 0], &tmp[0])
            for a in range(k):
                for b in range(k):
                    work[1, a, b] = work[0, a, b]
        if not bad:
            for a in range(k):
                x[n - 1, a] = gvec[n - 1, a]
            for i in range(n - 2, -1, -1):
                for a in range(k):
                    s = gvec[i, a]
                    for c in range(k):
                        s -= gmat[i, a, c] * x[i + 1, c]
                    x[i, a] = s
    if bad:
        raise np.linalg.LinAlgError("singular pivot block in conservative block solve")
    return out


cdef inline double _control_G(int sel, double m, double x_T, double lam_f, double nu) noexcept nogil:
    if sel == 1:
        return (x_T - m) / nu
    if sel == 2:
        return m * (x_T - lam_f * m) / nu
    return 0.0


cdef void _seir_rhs(const double* y, double lam_f, double beta, double zeta, double gamma,
                    int sel, const double* x_T, double nu, int clamp, double clamp_val,
                    double floor, double* out) noexcept nogil:
    cdef double rS = y[0], rE = y[1], rI = y[2], rR = y[3]
    cdef double mS = y[4], mE = y[5], mI = y[6], mR = y[7]
    if clamp:
        mI = clamp_val
    cdef double force = mI * rI
    cdef double incid = beta * mS * rS * force
    out[0] = -incid
    out[1] = incid - zeta * rE
    out[2] = zeta * rE - gamma * rI
    out[3] = gamma * rI
    out[4] = -beta * (lam_f - 1.0) * mS * mS * force + _control_G(sel, mS, x_T[0], lam_f, nu)
    out[5] = 0.0
    if rE >= floor:
        out[5] = incid / rE * (lam_f * mS - mE) + _control_G(sel, mE, x_T[1], lam_f, nu)
    out[6] = 0.0
    if not clamp and rI >= floor:
        out[6] = zeta * rE / rI * (mE - mI) + _control_G(sel, mI, x_T[2], lam_f, nu)
    out[7] = 0.0
    if rR >= floor:
        out[7] = gamma * rI / rR * (mI - mR) + _control_G(sel, mR, x_T[3], lam_f, nu)


def seir_rk4(const double[:, ::1] y0, const double[::1] lam_f, double beta, double zeta,
             double gamma, int sel, const double[::1] x_T, double nu, int clamp,
             double clamp_val, double floor, double dt, Py_ssize_t n_steps, Py_ssize_t stride):
    """Classical RK4 for independent closed-SEIR trajectories (one per row of ``y0``)."""
    cdef Py_ssize_t n_atoms = y0.shape[0]
    cdef Py_ssize_t n_out = n_steps // stride + 1 + (1 if n_steps % stride else 0)
    out_arr = np.empty((n_out, n_atoms, 8), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double y[8]
    cdef double tmp[8]
    cdef double k1[8]
    cdef double k2[8]
    cdef double k3[8]
    cdef double k4[8]
    cdef Py_ssize_t a, s, j, row
    cdef int bad_step = -1
    with nogil:
        for a in range(n_atoms):
            for j in range(8):
                y[j] = y0[a, j]
                out[0, a, j] = y[j]
            row = 1
            for s in range(1, n_steps + 1):
                _seir_rhs(y, lam_f[a], beta, zeta, gamma, sel, &x_T[0], nu, clamp, clamp_val, floor, k1)
                for j in range(8):
                    tmp[j] = y[j] + 0.5 * dt * k1[j]
                _seir_rhs(tmp, lam_f[a], beta, zeta, gamma, sel, &x_T[0], nu, clamp, clamp_val, floor, k2)
                for j in range(8):
                    tmp[j] = y[j] + 0.5 * dt * k2[j]
                _seir_rhs(tmp, lam_f[a], beta, zeta, gamma, sel, &x_T[0], nu, clamp, clamp_val, floor, k3)
                for j in range(8):
                    tmp[j] = y[j] + dt * k3[j]
                _seir_rhs(tmp, lam_f[a], beta, zeta, gamma, sel, &x_T[0], nu, clamp, clamp_val, floor, k4)
                for j in range(8):
                    y[j] = y[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                    if not isfinite(y[j]):
                        if bad_step < 0 or s < bad_step:
                            bad_step = s
                if bad_step >= 0:
                    break
                if s % stride == 0 or s == n_steps:
                    for j in range(8):
                        out[row, a, j] = y[j]
                    row += 1
    if bad_step >= 0:
        raise FloatingPointError(f"non-finite macro state at t={bad_step * dt:.6g}")
    return out_arr
