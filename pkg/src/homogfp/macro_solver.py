"""Theta-scheme solver for the homogenized v-equation and recovery of u.

Spatial operator (Dirichlet rows replaced by identities)::

    L v = A(B_hom) v + P_eff . grad_c v + z_eff v

with ``A`` the flux-form stiffness of :mod:`homogfp.grid` on the
non-periodic macro grid and ``grad_c`` central differences.  One step::

    (Q/dt + theta L^{m+1}) v^{m+1} = (Q/dt - (1-theta) L^m) v^m
                                     + theta g^{m+1} + (1-theta) g^m

with ``Q = (q^m + q^{m+1})/2`` and ``g = f s``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .cell_solver import Regime, SLOW
from .coefficients import CoefficientSet, Factor, as_factor
from .effective import EffectiveModel
from .grid import CellGrid, MacroGrid, gradient_stencils, stiffness

log = logging.getLogger(__name__)


class MacroSolverError(RuntimeError):
    pass


@dataclass
class MacroSolution:
    """``v`` (and ``u`` once recovered) on ``(nt+1, *shape)``."""

    grid: MacroGrid
    v: np.ndarray
    theta: float
    u: np.ndarray | None = None
    peclet: float = 0.0
    max_residual: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.grid.dt

    def to_csv(self, path: str | Path) -> None:
        """Columns: x1[, x2], t, v, u (``u`` blank when not recovered)."""
        g = self.grid
        xs = g.mesh()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{k + 1}" for k in range(g.n)] + ["t", "v", "u"])
            for m, t in enumerate(g.times):
                for idx in np.ndindex(*g.shape):
                    u = "" if self.u is None else repr(float(self.u[m][idx]))
                    wr.writerow([repr(float(x[idx])) for x in xs] + [repr(float(t)), repr(float(self.v[m][idx])), u])


def constant_model(grid: MacroGrid, q=1.0, B=1.0, P=0.0, z=0.0, s=1.0, r=1.0,
                   cell_grid: CellGrid | None = None) -> EffectiveModel:
    """An :class:`EffectiveModel` with prescribed coefficients.

    Each argument is a constant or a callable of ``(x_mesh_tuple, t)``
    returning node values; ``B`` may be a scalar (times I) or ``n x n``
    (callables return shape ``(*shape, n, n)``), ``P`` a scalar or a
    length-``n`` vector (callables return ``(*shape, n)``).
    """
    n = grid.n
    shape = (grid.nt + 1,) + grid.shape
    mesh = grid.mesh()

    def table(val, tail=()):
        out = np.empty(shape + tail)
        for m, t in enumerate(grid.times):
            v = val(mesh, t) if callable(val) else val
            out[m] = np.broadcast_to(np.asarray(v, dtype=float), grid.shape + tail)
        return out

    if not callable(B) and np.ndim(B) == 0:
        B = float(B) * np.eye(n)
    if not callable(P) and np.ndim(P) == 0:
        P = np.full(n, float(P))
    return EffectiveModel(
        grid, cell_grid or CellGrid(n, 4, 4), Regime(SLOW, 0),
        table(q), table(B, (n, n)), table(P, (n,)), table(z), table(s), table(r), 0.0, 0.0, 0,
    )


def _macro_y_grid(n: int) -> CellGrid:
    return CellGrid(n, 256 if n == 1 else 64, 4)


def _y_average(factor_fn: Callable, grid: MacroGrid, t: float, cell_grid: CellGrid) -> np.ndarray:
    """``int_Y fn(x, t, y) dy`` at every macro node."""
    n = grid.n
    xs = tuple(m.reshape(m.shape + (1,) * n) for m in grid.mesh())
    ys = tuple(y.reshape((1,) * n + y.shape) for y in cell_grid.y_mesh())
    vals = factor_fn(xs, t, ys)
    return np.mean(vals.reshape(grid.shape + (-1,)), axis=-1)


def _nodal(values, grid: MacroGrid, t: float) -> np.ndarray:
    if isinstance(values, np.ndarray):
        return np.broadcast_to(values, grid.shape).astype(float)
    return as_factor(values, "field")(grid.mesh(), t)


def macro_initial(ubar, coeffs: CoefficientSet, grid: MacroGrid, cell_grid: CellGrid | None = None) -> np.ndarray:
    """``v(x, 0) = ubar(x) int_Y a1 dy / int_Y (a1/b1) dy``; zero on the boundary."""
    cg = cell_grid or _macro_y_grid(grid.n)
    u0 = _nodal(ubar, grid, 0.0)
    bmax = float(np.max(np.abs(u0[grid.boundary_mask()]))) if u0.size else 0.0
    if bmax > 1e-10:
        raise MacroSolverError(f"initial datum must vanish on the boundary (max {bmax:.3g})")
    ma1 = _y_average(lambda x, t, y: coeffs.a1(x, t, y), grid, 0.0, cg)
    mq = _y_average(lambda x, t, y: coeffs.a1(x, t, y) / coeffs.b1(x, t, y), grid, 0.0, cg)
    v0 = u0 * ma1 / mq
    v0[grid.boundary_mask()] = 0.0
    return v0


def recover_weight(coeffs: CoefficientSet, grid: MacroGrid, cell_grid: CellGrid | None = None) -> np.ndarray:
    """``r(x, t) = int_Y dy / b1`` on ``(nt+1, *shape)``."""
    cg = cell_grid or _macro_y_grid(grid.n)
    fn = lambda x, t, y: 1.0 / coeffs.b1(x, t, y)  # noqa: E731
    if coeffs.macro_independent("t"):
        r0 = _y_average(fn, grid, 0.0, cg)
        return np.broadcast_to(r0, (grid.nt + 1,) + grid.shape).copy()
    return np.stack([_y_average(fn, grid, float(t), cg) for t in grid.times])


def recover_u(v: np.ndarray | MacroSolution, coeffs: CoefficientSet | EffectiveModel,
              grid: MacroGrid | None = None, cell_grid: CellGrid | None = None) -> np.ndarray:
    """``u = v r``; ``r`` from the model when one is given, else by quadrature of ``1/b1``."""
    if isinstance(v, MacroSolution):
        grid = grid or v.grid
        v = v.v
    if isinstance(coeffs, EffectiveModel):
        return v * coeffs.r
    if grid is None:
        raise ValueError("a macro grid is required")
    return v * recover_weight(coeffs, grid, cell_grid)


# --- assembly -----------------------------------------------------------------------


class _Operator:
    def __init__(self, grid: MacroGrid):
        self.grid = grid
        self.st = gradient_stencils(grid.shape, grid.h, periodic=False)
        S = len(self.st.ops)
        self.central = [sum(ops[k] for ops in self.st.ops) / S for k in range(grid.n)]
        self.interior = ~grid.boundary_mask().ravel()
        self._last = None

    def L(self, model: EffectiveModel, m: int) -> sp.csr_matrix:
        """Operator at time level ``m``; reused while the coefficients do not change."""
        key = (model.B_hom[m], model.P_eff[m], model.z_eff[m])
        if self._last is not None and all(np.array_equal(a, b) for a, b in zip(key, self._last[0])):
            return self._last[1]
        L = self._assemble(model, m)
        self._last = (key, L)
        return L

    def _assemble(self, model: EffectiveModel, m: int) -> sp.csr_matrix:
        n = self.grid.n
        K = np.moveaxis(model.B_hom[m], (-2, -1), (0, 1))
        A = stiffness(self.st, K)
        P = model.P_eff[m].reshape(-1, n)
        for k in range(n):
            if np.any(P[:, k]):
                A = A + sp.diags(P[:, k]) @ self.central[k]
        return (A + sp.diags(model.z_eff[m].ravel())).tocsr()


def _dirichlet(M: sp.csr_matrix, interior: np.ndarray) -> sp.csr_matrix:
    keep = sp.diags(interior.astype(float))
    return (keep @ M + sp.diags((~interior).astype(float))).tocsr()


def _solve(M: sp.csr_matrix, rhs: np.ndarray, n: int, tol: float) -> np.ndarray:
    if n == 1:
        N = M.shape[0]
        lower = np.zeros(N)
        upper = np.zeros(N)
        lower[1:] = M.diagonal(-1)
        upper[:-1] = M.diagonal(1)
        return kernels.tridiag_solve(lower, M.diagonal(), upper, rhs)
    d = M.diagonal()
    prec = spla.LinearOperator(M.shape, matvec=lambda x: x / d)
    x, info = spla.bicgstab(M, rhs, rtol=0.0, atol=tol, M=prec, maxiter=20 * M.shape[0])
    if info != 0:
        raise MacroSolverError(f"BiCGSTAB did not converge (info={info})")
    return x


def mesh_peclet(model: EffectiveModel) -> float:
    """``max |P_k| h_k / B_kk`` over all nodes and time levels."""
    out = 0.0
    for k, h in enumerate(model.grid.h):
        diag = model.B_hom[..., k, k]
        out = max(out, float(np.max(np.abs(model.P_eff[..., k]) * h / diag)))
    return out


def solve_macro(model: EffectiveModel, f=None, ubar=None, theta: float = 0.5, tol: float = 1e-10,
                v0: np.ndarray | None = None, coeffs: CoefficientSet | None = None) -> MacroSolution:
    """Time-step the v-equation on ``model.grid``.

    ``f`` is a source ``f(x, t)`` (expression, :class:`Factor`, callable or
    None).  The initial state is ``v0`` if given, else
    :func:`macro_initial` of ``ubar`` (requires ``coeffs``), else ``ubar``
    itself when no coefficients are supplied.
    """
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1]")
    grid = model.grid
    if np.any(model.q_eff <= 0):
        raise MacroSolverError(f"q_eff must be positive (min {model.q_eff.min():.3g})")
    if v0 is None:
        if ubar is None:
            v0 = np.zeros(grid.shape)
        elif coeffs is not None:
            v0 = macro_initial(ubar, coeffs, grid)
        else:
            v0 = _nodal(ubar, grid, 0.0).copy()
            v0[grid.boundary_mask()] = 0.0
    pe = mesh_peclet(model)
    if pe > 2:
        log.warning("mesh Peclet number %.3g exceeds 2; central drift may oscillate", pe)
    fac: Factor | None = None if f is None else as_factor(f, "f")
    op = _Operator(grid)
    interior = op.interior
    dt = grid.dt
    nt = grid.nt

    def g(m):
        if fac is None:
            return np.zeros(int(np.prod(grid.shape)))
        return (fac(grid.mesh(), float(grid.times[m])) * model.s[m]).ravel()

    v = np.empty((nt + 1,) + grid.shape)
    v[0] = v0
    cur = v0.ravel().astype(float)
    L_prev = op.L(model, 0)
    g_prev = g(0)
    worst = 0.0
    cache = None
    for m in range(nt):
        L_next = op.L(model, m + 1)
        g_next = g(m + 1)
        qd = 0.5 * (model.q_eff[m] + model.q_eff[m + 1]).ravel() / dt
        if cache is None or not (cache[0] is L_prev and cache[1] is L_next and np.array_equal(cache[2], qd)):
            Q = sp.diags(qd)
            cache = (L_prev, L_next, qd, _dirichlet(Q + theta * L_next, interior), (Q - (1 - theta) * L_prev).tocsr())
        lhs, explicit = cache[3], cache[4]
        rhs = explicit @ cur + theta * g_next + (1 - theta) * g_prev
        rhs[~interior] = 0.0
        nxt = _solve(lhs, rhs, grid.n, tol)
        worst = max(worst, float(np.max(np.abs(lhs @ nxt - rhs))))
        v[m + 1] = nxt.reshape(grid.shape)
        cur, L_prev, g_prev = nxt, L_next, g_next
    if worst > max(tol, 1e-8 * max(1.0, float(np.max(np.abs(v))))):
        log.warning("macro linear residual %.3g above tolerance", worst)
    return MacroSolution(grid, v, theta, None, pe, worst, {"scheme": "theta", "dt": dt})
