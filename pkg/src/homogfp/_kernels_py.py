"""NumPy/SciPy implementations of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; only speed differs.
"""

import numpy as np
from scipy.linalg import solve_banded


def tridiag_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system; ``lower[0]`` and ``upper[-1]`` are ignored."""
    n = len(diag)
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, np.asarray(rhs, dtype=float))


def cyclic_tridiag_solve(lower, diag, upper, rhs):
    """Periodic tridiagonal solve (Sherman-Morrison).

    ``lower[0]`` couples row 0 to the last unknown and ``upper[-1]`` couples
    the last row to the first unknown.
    """
    n = len(diag)
    dmod = np.array(diag, dtype=float)
    gamma = -dmod[0]
    alpha = lower[0]
    beta = upper[n - 1]
    dmod[0] -= gamma
    dmod[n - 1] -= alpha * beta / gamma
    x = tridiag_solve(lower, dmod, upper, rhs)
    u = np.zeros(n)
    u[0] = gamma
    u[n - 1] = beta
    z = tridiag_solve(lower, dmod, upper, u)
    fact = (x[0] + alpha * x[n - 1] / gamma) / (1.0 + z[0] + alpha * z[n - 1] / gamma)
    return x - fact * z


def implicit_fp_march_1d(a, c, bface, f, u0, dt, h):
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    bface = np.asarray(bface, dtype=float)
    f = np.asarray(f, dtype=float)
    nsteps, nx = a.shape
    traj = np.zeros((nsteps, nx))
    energy = np.empty(nsteps)
    prev = np.array(u0, dtype=float)
    ih2 = 1.0 / (h * h)
    # interior unknowns only; the end nodes stay at zero
    ab = np.zeros((3, nx - 2))
    for m in range(nsteps):
        am, cm, bm = a[m], c[m], bface[m]
        ab[0, 1:] = -bm[1:-1] * cm[2:-1] * ih2
        ab[1] = am[1:-1] / dt + (bm[:-1] + bm[1:]) * cm[1:-1] * ih2
        ab[2, :-1] = -bm[1:-1] * cm[1:-2] * ih2
        rhs = am[1:-1] / dt * prev[1:-1] + f[m, 1:-1]
        traj[m, 1:-1] = solve_banded((1, 1), ab, rhs)
        prev = traj[m]
        energy[m] = np.sum(am * cm * prev**2) * h
    return traj, energy
