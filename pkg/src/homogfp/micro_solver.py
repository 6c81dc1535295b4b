"""Direct finite-difference solution of the oscillating problem::

    a^eps du/dt - div(B^eps grad(c^eps u)) = f,   u = 0 on the boundary,

with ``a = a1 a2``, ``c = b1 b2 + eps b`` and ``B`` evaluated at
``(x, t, x/eps^alpha, t/eps^beta)``.  Implicit Euler in time; in space the
flux form of :mod:`homogfp.grid` with ``B`` sampled at the centres of the
cells spanned by each one-sided gradient (the face midpoints in 1D).

The optional transformed path solves for ``w = c u``::

    dw/dt - div((c/a) B grad w) + B grad(c/a) . grad w - (dc/dt / c) w = (c/a) f

with the time term discretized as ``(w^{m+1} - (c^{m+1}/c^m) w^m) / dt``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .coefficients import T, CoefficientSet, EpsilonRealization, as_factor, to_general_form
from .grid import MacroGrid, gradient_stencils, orientation_signs, stiffness

log = logging.getLogger(__name__)

MIN_NODES_PER_PERIOD = 16
MIN_EPS_1D = 1.0 / 64
MIN_EPS_2D = 1.0 / 16
CHUNK = 256


class MicroSolverError(RuntimeError):
    pass


@dataclass
class MicroSolution:
    """``u_eps`` on ``(nt+1, *shape)`` of an eps-resolving grid."""

    grid: MacroGrid
    u: np.ndarray
    eps: float
    alpha: float
    beta: float
    energy: np.ndarray
    coeffs: CoefficientSet
    transformed: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def v(self) -> np.ndarray:
        return to_v(self, self.coeffs)

    def to_csv(self, path: str | Path) -> None:
        """Columns: x1[, x2], t, u, v."""
        g = self.grid
        xs = g.mesh()
        v = self.v
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{k + 1}" for k in range(g.n)] + ["t", "u", "v"])
            for m, t in enumerate(g.times):
                for idx in np.ndindex(*g.shape):
                    wr.writerow([repr(float(x[idx])) for x in xs]
                                + [repr(float(t)), repr(float(self.u[m][idx])), repr(float(v[m][idx]))])

    def write_energy_log(self, path: str | Path) -> None:
        """JSON record of the run and its per-step energy ``sum a c u^2 dx``."""
        rec = {
            "eps": self.eps, "alpha": self.alpha, "beta": self.beta,
            "nx": list(self.grid.shape), "nt": self.grid.nt, "T": self.grid.T,
            "transformed": self.transformed,
            "energy": [float(e) for e in self.energy],
            **self.meta,
        }
        Path(path).write_text(json.dumps(rec, indent=1))


def _count(length: float, step: float) -> int:
    """Number of intervals of size at most ``step`` covering ``length``."""
    q = length / step
    k = round(q)
    return int(k) if abs(q - k) < 1e-9 * max(1.0, q) else int(math.ceil(q))


def micro_grid(domain: MacroGrid, eps: float, alpha: float, beta: float,
               kx: int = 16, kt: int = 16, nx=None, nt: int | None = None) -> MacroGrid:
    """Grid with ``dx <= eps^alpha / kx`` and ``dt <= eps^beta / kt``.

    Explicit ``nx``/``nt`` are accepted if they satisfy the resolution guard.
    """
    if kx < MIN_NODES_PER_PERIOD or kt < MIN_NODES_PER_PERIOD:
        raise MicroSolverError(f"need at least {MIN_NODES_PER_PERIOD} nodes per micro period (got kx={kx}, kt={kt})")
    lx = eps**alpha
    lt = eps**beta
    lengths = [hi - lo for lo, hi in domain.bounds]
    if nx is None:
        nxs = tuple(_count(L, lx / kx) + 1 for L in lengths)
    else:
        nxs = (int(nx),) * domain.n if np.isscalar(nx) else tuple(int(k) for k in nx)
    if nt is None:
        nt = _count(domain.T, lt / kt)
    grid = MacroGrid(domain.bounds, nxs, int(nt), domain.T)
    tiny = 1 + 1e-9
    if any(h > lx / MIN_NODES_PER_PERIOD * tiny for h in grid.h) or grid.dt > lt / MIN_NODES_PER_PERIOD * tiny:
        raise MicroSolverError(
            f"grid does not resolve the microstructure: dx={grid.h}, dt={grid.dt:.3g} "
            f"vs eps^alpha/16={lx / 16:.3g}, eps^beta/16={lt / 16:.3g}"
        )
    return grid


def _face_B_1d(real: EpsilonRealization, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    xf = 0.5 * (x[:-1] + x[1:])
    return real.B((xf[None, :],), t[:, None])[0, 0]


def _march_1d(real: EpsilonRealization, grid: MacroGrid, f, u0: np.ndarray):
    x = grid.axes[0]
    h = grid.h[0]
    dt = grid.dt
    u = np.empty((grid.nt + 1, x.size))
    u[0] = u0
    energy = np.empty(grid.nt)
    times = grid.times
    X = (x[None, :],)
    for start in range(0, grid.nt, CHUNK):
        stop = min(grid.nt, start + CHUNK)
        t = times[start + 1: stop + 1]
        T = t[:, None]
        a = np.broadcast_to(real.a(X, T), (t.size, x.size))
        c = np.broadcast_to(real.c(X, T), (t.size, x.size))
        bf = np.broadcast_to(_face_B_1d(real, x, t), (t.size, x.size - 1))
        fv = np.broadcast_to(f(X, T), (t.size, x.size)) if f is not None else np.zeros((t.size, x.size))
        traj, en = kernels.implicit_fp_march_1d(
            np.ascontiguousarray(a), np.ascontiguousarray(c), np.ascontiguousarray(bf),
            np.ascontiguousarray(fv), np.ascontiguousarray(u[start]), dt, h,
        )
        u[start + 1: stop + 1] = traj
        energy[start:stop] = en
    return u, energy


def _orient_K(real: EpsilonRealization, grid: MacroGrid, t: float, scale=None) -> list[np.ndarray]:
    """``B`` (times ``scale(x, t)`` if given) at the centres of the orientation cells."""
    mesh = grid.mesh()
    out = []
    for signs in orientation_signs(grid.n):
        xc = tuple(m + 0.5 * sg * h for m, sg, h in zip(mesh, signs, grid.h))
        K = real.B(xc, t)
        if scale is not None:
            K = K * scale(xc, t)
        out.append(K)
    return out


def _march_nd(real: EpsilonRealization, grid: MacroGrid, f, u0: np.ndarray):
    st = gradient_stencils(grid.shape, grid.h, periodic=False)
    interior = ~grid.boundary_mask().ravel()
    keep = sp.diags(interior.astype(float))
    bdry = sp.diags((~interior).astype(float))
    mesh = grid.mesh()
    dt = grid.dt
    u = np.empty((grid.nt + 1,) + grid.shape)
    u[0] = u0
    energy = np.empty(grid.nt)
    vol = grid.cell_volume
    for m in range(grid.nt):
        t = float(grid.times[m + 1])
        a = real.a(mesh, t).ravel()
        c = real.c(mesh, t).ravel()
        A = stiffness(st, _orient_K(real, grid, t)) @ sp.diags(c)
        M = (keep @ (sp.diags(a / dt) + A) + bdry).tocsc()
        rhs = a / dt * u[m].ravel()
        if f is not None:
            rhs = rhs + f(mesh, t).ravel()
        rhs[~interior] = 0.0
        new = spla.spsolve(M, rhs)
        u[m + 1] = new.reshape(grid.shape)
        energy[m] = float(np.sum(a * c * new**2) * vol)
    return u, energy


def _march_transformed(real: EpsilonRealization, grid: MacroGrid, f, u0: np.ndarray):
    """Transformed path on ``w = c u``; returns ``u = w / c``."""
    st = gradient_stencils(grid.shape, grid.h, periodic=False)
    interior = ~grid.boundary_mask().ravel()
    keep = sp.diags(interior.astype(float))
    bdry = sp.diags((~interior).astype(float))
    mesh = grid.mesh()
    dt = grid.dt
    n = grid.n
    ratio = lambda x, t: real.c(x, t) / real.a(x, t)  # noqa: E731
    u = np.empty((grid.nt + 1,) + grid.shape)
    u[0] = u0
    energy = np.empty(grid.nt)
    c_prev = real.c(mesh, 0.0).ravel()
    w = (c_prev * u0.ravel())
    vol = grid.cell_volume
    signs = orientation_signs(n)
    for m in range(grid.nt):
        t = float(grid.times[m + 1])
        c = real.c(mesh, t).ravel()
        a = real.a(mesh, t).ravel()
        A = stiffness(st, _orient_K(real, grid, t, ratio))
        # drift B grad(c/a) . grad w, with one-sided differences of c/a in the
        # same orientation as those of w
        Bn = real.B(mesh, t).reshape(n, n, -1)
        rn = ratio(mesh, t).ravel()
        drift = sp.csr_matrix(A.shape)
        for s, ops in enumerate(st.ops):
            g = []
            for k in range(n):
                xs = tuple(mm + (signs[s][k] * grid.h[k] if j == k else 0.0) for j, mm in enumerate(mesh))
                g.append((ratio(xs, t).ravel() - rn) / (signs[s][k] * grid.h[k]))
            for k in range(n):
                vec = sum(Bn[k, l] * g[l] for l in range(n))
                drift = drift + sp.diags(vec * st.masks[s]) @ ops[k]
        drift = drift / len(st.ops)
        M = (keep @ (sp.diags(np.full(c.size, 1.0 / dt)) + A + drift) + bdry).tocsc()
        rhs = (c / c_prev) * w / dt
        if f is not None:
            rhs = rhs + (c / a) * f(mesh, t).ravel()
        rhs[~interior] = 0.0
        w = spla.spsolve(M, rhs)
        c_prev = c
        u[m + 1] = (w / c).reshape(grid.shape)
        energy[m] = float(np.sum(a / c * w**2) * vol)
    return u, energy


def solve_micro(coeffs: CoefficientSet, eps: float, f=None, ubar=None, domain: MacroGrid | None = None,
                kx: int = 16, kt: int = 16, nx=None, nt: int | None = None,
                transformed: bool = False) -> MicroSolution:
    """Solve the eps-problem on ``domain`` (bounds and horizon ``T``).

    ``kx``/``kt`` are nodes per micro period in space/time (at least 16).
    ``transformed`` selects the ``w = c u`` formulation.
    """
    domain = domain or coeffs.domain
    if domain is None:
        raise MicroSolverError("a domain (bounds and horizon) is required")
    if not 0 < eps <= 1:
        raise MicroSolverError(f"eps must lie in (0, 1], got {eps}")
    floor = MIN_EPS_1D if domain.n == 1 else MIN_EPS_2D
    if eps < floor * (1 - 1e-12):
        raise MicroSolverError(f"eps={eps} below the supported floor {floor:.4g} for n={domain.n}")
    if coeffs.alpha > 1:
        warnings.warn("alpha > 1: outside the range covered by the rigorous limit theory", stacklevel=2)
    real = to_general_form(coeffs, eps)
    grid = micro_grid(domain, eps, coeffs.alpha, coeffs.beta, kx, kt, nx, nt)
    fac = None if f is None else as_factor(f, "f")
    if fac is not None and fac.is_zero():
        fac = None
    if ubar is None:
        u0 = np.zeros(grid.shape)
    elif isinstance(ubar, np.ndarray):
        u0 = np.array(np.broadcast_to(ubar, grid.shape), dtype=float)
    else:
        u0 = as_factor(ubar, "ubar")(grid.mesh(), 0.0)
    u0[grid.boundary_mask()] = 0.0
    if transformed:
        u, energy = _march_transformed(real, grid, fac, u0)
    elif grid.n == 1:
        u, energy = _march_1d(real, grid, fac, u0)
    else:
        u, energy = _march_nd(real, grid, fac, u0)
    if not np.all(np.isfinite(u)):
        raise MicroSolverError("non-finite values in the micro solution")
    meta = {"kernel_backend": kernels.BACKEND, "dx": list(grid.h), "dt": grid.dt}
    return MicroSolution(grid, u, float(eps), float(coeffs.alpha), float(coeffs.beta), energy, coeffs, transformed, meta)


def b1_field(coeffs: CoefficientSet, eps: float, grid: MacroGrid) -> np.ndarray:
    """``b1(x, t, x/eps^alpha)`` on the nodes of ``grid``; leading axis of length 1 when t-independent."""
    real = EpsilonRealization(coeffs, eps)
    mesh = grid.mesh()
    if coeffs.b1.depends_on(T):
        return np.stack([real.b1(mesh, float(t)) for t in grid.times])
    return real.b1(mesh, 0.0)[None]


def to_v(micro: MicroSolution, coeffs: CoefficientSet | None = None) -> np.ndarray:
    """``v_eps = b1^eps u_eps``."""
    return micro.u * b1_field(coeffs or micro.coeffs, micro.eps, micro.grid)


# --- estimate diagnostics ----------------------------------------------------------


def energy_functional(v: np.ndarray, grid: MacroGrid) -> tuple[float, float]:
    """``(sup_t sum v^2 dx, sum_{m>=1} sum_edges |dv/dx|^2 dx dt)`` for ``v`` on ``(nt+1, *shape)``."""
    v = np.asarray(v, dtype=float)
    vol = grid.cell_volume
    sup = float(np.max(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1)) * vol)
    grad = 0.0
    for k, h in enumerate(grid.h):
        d = np.diff(v[1:], axis=1 + k) / h
        grad += float(np.sum(d**2))
    return sup, grad * vol * grid.dt


def time_shift_modulus(v: np.ndarray, grid: MacroGrid, h: float, delta: float) -> float:
    """``sum over t in [delta, T - delta] of sum_x |v(t+h) - v(t)|^2 dx dt``.

    ``h`` is rounded to the nearest multiple of ``dt`` (warning when this
    changes it).
    """
    T = grid.T
    if h < 0:
        raise ValueError("shift must be non-negative")
    if not (h < delta / 2 and delta / 2 < T / 4):
        raise ValueError(f"need 0 <= h < delta/2 < T/4 (h={h}, delta={delta}, T={T})")
    k = int(round(h / grid.dt))
    if abs(k * grid.dt - h) > 1e-9 * max(1.0, h):
        warnings.warn(f"shift {h} not on the time grid; using {k} steps", stacklevel=2)
    if k == 0:
        return 0.0
    times = grid.times
    sel = np.nonzero((times >= delta - 1e-12) & (times <= T - delta + 1e-12))[0]
    sel = sel[sel + k <= grid.nt]
    v = np.asarray(v, dtype=float)
    diff = v[sel + k] - v[sel]
    return float(np.sum(diff**2) * grid.cell_volume * grid.dt)
