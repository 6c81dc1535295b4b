# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: banded solves and the 1D implicit micro march."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _thomas(const double[:] lower, const double[:] diag,
                  const double[:] upper, double[:] x,
                  double[:] cp) noexcept nogil:
    # x holds the rhs on entry and the solution on exit
    cdef Py_ssize_t n = diag.shape[0]
    cdef Py_ssize_t i
    cdef double m
    cp[0] = upper[0] / diag[0]
    x[0] = x[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / m
        x[i] = (x[i] - lower[i] * x[i - 1]) / m


cdef void _back(double[:] x, double[:] cp) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0] - 2, -1, -1):
        x[i] = x[i] - cp[i] * x[i + 1]


def tridiag_solve(lower, diag, upper, rhs):
    cdef const double[:] lo = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[:] di = np.ascontiguousarray(diag, dtype=np.float64)
    cdef const double[:] up = np.ascontiguousarray(upper, dtype=np.float64)
    out = np.array(rhs, dtype=np.float64, copy=True)
    cdef double[:] x = out
    cdef double[:] cp = np.empty(di.shape[0])
    with nogil:
        _thomas(lo, di, up, x, cp)
        _back(x, cp)
    return out


def cyclic_tridiag_solve(lower, diag, upper, rhs):
    cdef Py_ssize_t n = len(diag)
    cdef const double[:] lo = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[:] up = np.ascontiguousarray(upper, dtype=np.float64)
    cdef double[:] dmod = np.array(diag, dtype=np.float64, copy=True)
    out = np.array(rhs, dtype=np.float64, copy=True)
    cdef double[:] x = out
    cdef double[:] z = np.zeros(n)
    cdef double[:] cp = np.empty(n)
    cdef double gamma = -dmod[0]
    cdef double alpha = lo[0]     # couples row 0 to x[n-1]
    cdef double beta = up[n - 1]  # couples row n-1 to x[0]
    cdef double fact
    cdef Py_ssize_t i
    with nogil:
        dmod[0] = dmod[0] - gamma
        dmod[n - 1] = dmod[n - 1] - alpha * beta / gamma
        _thomas(lo, dmod, up, x, cp)
        _back(x, cp)
        z[0] = gamma
        z[n - 1] = beta
        _thomas(lo, dmod, up, z, cp)
        _back(z, cp)
        fact = (x[0] + alpha * x[n - 1] / gamma) / (
            1.0 + z[0] + alpha * z[n - 1] / gamma)
        for i in range(n):
            x[i] = x[i] - fact * z[i]
    return out


def implicit_fp_march_1d(a, c, bface, f, u0, double dt, double h):
    """Backward-Euler march of ``a du/dt - d/dx(B d(cu)/dx) = f``.

    Row ``m`` of ``a``, ``c``, ``f`` holds nodal values at the new time level
    of step ``m``; ``bface`` holds face values.  End nodes are Dirichlet zero.
    Returns the trajectory (steps, nx) and the energy ``sum a c u^2 h``.
    """
    cdef const double[:, :] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, :] C = np.ascontiguousarray(c, dtype=np.float64)
    cdef const double[:, :] BF = np.ascontiguousarray(bface, dtype=np.float64)
    cdef const double[:, :] F = np.ascontiguousarray(f, dtype=np.float64)
    cdef Py_ssize_t nsteps = A.shape[0]
    cdef Py_ssize_t nx = A.shape[1]
    traj = np.empty((nsteps, nx))
    energy = np.empty(nsteps)
    cdef double[:, :] U = traj
    cdef double[:] E = energy
    cdef double[:] prev = np.array(u0, dtype=np.float64, copy=True)
    cdef double[:] lo = np.zeros(nx)
    cdef double[:] di = np.ones(nx)
    cdef double[:] up = np.zeros(nx)
    cdef double[:] x = np.zeros(nx)
    cdef double[:] cp = np.empty(nx)
    cdef double ih2 = 1.0 / (h * h)
    cdef double idt = 1.0 / dt
    cdef double e
    cdef Py_ssize_t m, i
    with nogil:
        for m in range(nsteps):
            lo[0] = 0.0
            di[0] = 1.0
            up[0] = 0.0
            x[0] = 0.0
            lo[nx - 1] = 0.0
            di[nx - 1] = 1.0
            up[nx - 1] = 0.0
            x[nx - 1] = 0.0
            for i in range(1, nx - 1):
                lo[i] = -BF[m, i - 1] * C[m, i - 1] * ih2
                up[i] = -BF[m, i] * C[m, i + 1] * ih2
                di[i] = A[m, i] * idt + (BF[m, i - 1] + BF[m, i]) * C[m, i] * ih2
                x[i] = A[m, i] * idt * prev[i] + F[m, i]
            _thomas(lo, di, up, x, cp)
            _back(x, cp)
            e = 0.0
            for i in range(nx):
                U[m, i] = x[i]
                prev[i] = x[i]
                e = e + A[m, i] * C[m, i] * x[i] * x[i]
            E[m] = e * h
    return traj, energy
