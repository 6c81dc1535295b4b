"""Corrector cell problems for ``chi^j`` and ``zeta`` in the three regimes.

All equations are solved in the form obtained after multiplying by ``a2``,
with ``A(K)`` the flux-form operator of :mod:`homogfp.grid`:

* FastEqual (beta = 2 alpha), on Q, by period marching::

      a2 (a1/b1) d_tau w + A(b2 B) w = D(V)

* FastStrict (beta > 2 alpha), on Y, with tau-averaged coefficients::

      A(M_S(b2 B / a2)) w = D(M_S(V / a2))

* Slow (beta < 2 alpha), on Y for every tau-node::

      A(b2 B) w = D(V)

``D(V) = 2^-n sum_s G_s^T V_s`` is minus the discrete divergence of the
flux ``V``.  For ``chi^j`` the flux is ``b2 B e_j``; for ``zeta`` it is
``B (grad_x b2 + omega grad_y(b / b1))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .coefficients import SampledCoefficients
from .grid import CellField, CellGrid, GradientStencils, apply_gradients, cell_stencils, divergence_of, stiffness

log = logging.getLogger(__name__)

FAST_EQUAL = "FastEqual"
FAST_STRICT = "FastStrict"
SLOW = "Slow"


class CellSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Regime:
    tag: str
    omega: int

    def __post_init__(self):
        if self.tag not in (FAST_EQUAL, FAST_STRICT, SLOW):
            raise ValueError(f"unknown regime {self.tag!r}")
        if self.omega not in (0, 1):
            raise ValueError("omega must be 0 or 1")


def classify_regime(alpha, beta, tol: float = 1e-12, override: str | None = None) -> Regime:
    """Regime from the exponents; exact comparison when both are rationals."""
    if isinstance(alpha, Rational) and isinstance(beta, Rational):
        a, b = Fraction(alpha), Fraction(beta)
        if not 0 < a <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        if b <= 0:
            raise ValueError("beta must be positive")
        cmp = (b > 2 * a) - (b < 2 * a)
        omega = int(a == 1)
    else:
        a, b = float(alpha), float(beta)
        if not 0 < a <= 1 + tol:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        if b <= 0:
            raise ValueError("beta must be positive")
        cmp = 0 if abs(b - 2 * a) <= tol else (1 if b > 2 * a else -1)
        omega = int(abs(a - 1) <= tol)
    tag = override or {0: FAST_EQUAL, 1: FAST_STRICT, -1: SLOW}[cmp]
    return Regime(tag, omega)


# --- linear algebra -----------------------------------------------------------


def projected_cg(A: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10, maxiter: int | None = None):
    """Jacobi-preconditioned CG for ``A x = rhs`` on the zero-mean subspace.

    ``A`` is symmetric positive semidefinite with the constants as kernel.
    The mean is projected out of the residual and the search direction at
    every iteration; the returned ``x`` has zero mean.  Stops when
    ``max|A x - rhs| <= tol``.
    """
    rhs = rhs - rhs.mean()
    N = rhs.size
    maxiter = maxiter or 10 * N + 100
    dinv = 1.0 / A.diagonal()
    x = np.zeros(N)
    r = rhs.copy()
    if np.max(np.abs(r)) <= tol:
        return x, 0
    z = dinv * r
    z -= z.mean()
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r -= r.mean()
        if it % 50 == 0:  # guard against drift of the recursive residual
            r = rhs - A @ x
            r -= r.mean()
        if np.max(np.abs(r)) <= tol:
            r_true = rhs - A @ x
            if np.max(np.abs(r_true)) <= tol:
                x -= x.mean()
                return x, it
            r = r_true - r_true.mean()
        z = dinv * r
        z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CellSolverError(
        f"CG did not converge in {maxiter} iterations (residual {np.max(np.abs(r)):.3e})"
    )


def _solve_singular(A, rhs, tol):
    out = np.empty_like(rhs)
    for k in range(rhs.shape[0]):
        out[k], _ = projected_cg(A, rhs[k], tol)
    return out


# --- periodic parabolic fixed point -----------------------------------------------


@dataclass
class ParabolicCellOperator:
    """``capacity_m (w_m - w_{m-1}) / htau + A_m w_m = forcing_m`` on a tau-periodic grid.

    ``capacity`` has shape ``(ntau, N)``, ``forcing`` ``(k, ntau, N)`` for
    ``k`` simultaneous right-hand sides, ``stiffness`` a list of ``ntau``
    sparse matrices.
    """

    capacity: np.ndarray
    stiffness: list
    forcing: np.ndarray


@dataclass
class FixedPointReport:
    periods: int
    defects: list[float]
    contraction: float | None
    converged: bool

    def as_dict(self):
        return {
            "periods": self.periods,
            "defects": self.defects,
            "contraction": self.contraction,
            "converged": self.converged,
        }


def _step_solvers(op: ParabolicCellOperator, grid: CellGrid):
    ntau = grid.ntau
    solvers = []
    for m in range(ntau):
        M = (sp.diags(op.capacity[m] / grid.htau) + op.stiffness[m]).tocsr()
        if grid.n == 1:
            N = M.shape[0]
            idx = np.arange(N)
            diag = M.diagonal()
            upper = np.asarray(M[idx, (idx + 1) % N]).ravel()
            lower = np.asarray(M[idx, (idx - 1) % N]).ravel()
            solvers.append(
                lambda rhs, lo=lower, d=diag, up=upper: kernels.cyclic_tridiag_solve(lo, d, up, rhs)
            )
        else:
            lu = spla.splu(M.tocsc())
            solvers.append(lu.solve)
    return solvers


def periodic_parabolic_fixed_point(
    op: ParabolicCellOperator, grid: CellGrid, tol: float = 1e-10, max_periods: int = 500
) -> tuple[np.ndarray, FixedPointReport]:
    """Period marching with backward Euler steps until the period map has converged.

    Starting from zero, one period is marched over ``tau in [0, 1]``; the end
    state becomes the next initial state until ``max|w(1) - w(0)| < tol``.
    Returns the last period on the tau-nodes, shape ``(k, ntau, N)``.
    """
    k, ntau, N = op.forcing.shape
    solvers = _step_solvers(op, grid)
    cap = op.capacity / grid.htau
    start = np.zeros((k, N))
    states = np.zeros((k, ntau, N))
    defects: list[float] = []
    for period in range(1, max_periods + 1):
        prev = start
        for m in range(1, ntau + 1):
            mm = m % ntau
            rhs = cap[mm] * prev + op.forcing[:, mm]
            cur = np.stack([solvers[mm](rhs[j]) for j in range(k)])
            states[:, mm] = cur
            prev = cur
        defect = float(np.max(np.abs(prev - start))) if k else 0.0
        defects.append(defect)
        start = prev
        if defect < tol:
            break
    else:
        raise CellSolverError(
            f"periodic fixed point not reached in {max_periods} periods (defect {defects[-1]:.3e})"
        )
    ratios = [d1 / d0 for d0, d1 in zip(defects, defects[1:]) if d0 > 0 and d1 > 0]
    report = FixedPointReport(len(defects), defects, max(ratios) if ratios else None, True)
    return states, report


# --- cell problems ---------------------------------------------------------------


@dataclass
class CellCorrectors:
    """Solved correctors at one macro point.

    ``chi`` has shape ``(n, *q_shape)`` (FastEqual, Slow) or ``(n, *y_shape)``
    (FastStrict); ``zeta`` likewise without the leading axis.
    """

    chi: np.ndarray
    zeta: np.ndarray | None
    regime: Regime
    grid: CellGrid
    residual: float = 0.0
    mean_defect: float = 0.0
    fixed_point: dict = field(default_factory=dict)

    @property
    def on_q(self) -> bool:
        return self.regime.tag != FAST_STRICT

    def chi_q(self) -> np.ndarray:
        """``chi`` broadcast to Q."""
        if self.on_q:
            return self.chi
        return np.broadcast_to(self.chi[..., None], self.chi.shape + (self.grid.ntau,))

    def zeta_q(self) -> np.ndarray:
        z = np.zeros(self.grid.q_shape) if self.zeta is None else self.zeta
        if self.on_q:
            return z
        return np.broadcast_to(z[..., None], z.shape + (self.grid.ntau,))

    def fields(self) -> list[CellField]:
        dom = "Q" if self.on_q else "Y"
        out = [CellField(np.ascontiguousarray(self.chi[j]), self.grid, dom, "scalar", f"chi{j + 1}") for j in range(self.grid.n)]
        if self.zeta is not None:
            out.append(CellField(np.ascontiguousarray(self.zeta), self.grid, dom, "scalar", "zeta"))
        return out


def _B_orient(sampled: SampledCoefficients, m: int) -> list[np.ndarray]:
    """``B_s`` at tau-node ``m`` per orientation, shape ``(n, n, N)`` each."""
    n = sampled.grid.n
    return [B[..., m].reshape(n, n, -1) for B in sampled.B_orient]


def chi_fluxes(sampled: SampledCoefficients, m: int) -> list[np.ndarray]:
    """``b2 B_s e_j`` at tau-node ``m``; per orientation an array ``(j, n, N)``."""
    return [np.moveaxis(sampled.b2[m] * Bs, 1, 0) for Bs in _B_orient(sampled, m)]


def zeta_fluxes(sampled: SampledCoefficients, m: int, omega: int, st: GradientStencils) -> list[np.ndarray]:
    """``B_s (grad_x b2 + omega G_s (b/b1))`` per orientation ``s`` at tau-node ``m``."""
    gb2 = sampled.derivatives.grad_b2[:, m][:, None]
    if omega:
        ratio = sampled.b[..., m] / sampled.b1
        grads = apply_gradients(st, ratio)
    else:
        grads = [np.zeros((sampled.grid.n, st.size))] * len(st.ops)
    return [np.einsum("kl...,l...->k...", Bs, gb2 + g) for Bs, g in zip(_B_orient(sampled, m), grads)]


def _regime_system(sampled: SampledCoefficients, regime: Regime, st: GradientStencils, want_zeta: bool):
    """Operators and right-hand sides for all correctors.

    Returns ``(stiffness list per tau-node or single matrix, rhs)`` where
    ``rhs`` has shape ``(k, ntau, N)`` (Q regimes) or ``(k, N)`` (FastStrict).
    """
    g = sampled.grid
    ntau = g.ntau
    rhs_q = []
    Ks = []
    for m in range(ntau):
        Ks.append([sampled.b2[m] * Bs for Bs in _B_orient(sampled, m)])
        per_s = chi_fluxes(sampled, m)
        rows = [divergence_of(st, [V[j] for V in per_s]) for j in range(g.n)]
        if want_zeta:
            rows.append(divergence_of(st, zeta_fluxes(sampled, m, regime.omega, st)))
        rhs_q.append(np.stack(rows))
    rhs_q = np.stack(rhs_q, axis=1)  # (k, ntau, N)
    if regime.tag == FAST_STRICT:
        Kbar = [sum(K[s] / a for K, a in zip(Ks, sampled.a2)) / ntau for s in range(len(st.ops))]
        rhs = np.einsum("kmN,m->kN", rhs_q, 1.0 / sampled.a2) / ntau
        return stiffness(st, Kbar), rhs
    return [stiffness(st, K) for K in Ks], rhs_q


def _solve_all(sampled: SampledCoefficients, regime: Regime, grid: CellGrid, tol: float,
               want_zeta: bool, max_periods: int = 500, fp_tol: float | None = None) -> CellCorrectors:
    st = cell_stencils(grid)
    ops, rhs = _regime_system(sampled, regime, st, want_zeta)
    n = grid.n
    fp_info: dict = {}
    if regime.tag == FAST_STRICT:
        sol = _solve_singular(ops, rhs, tol)
        sol -= sol.mean(axis=1, keepdims=True)
        fields = sol.reshape((-1,) + grid.y_shape)
        mean_defect = float(np.max(np.abs(sol.mean(axis=1))))
    elif regime.tag == SLOW:
        sol = np.empty_like(rhs)
        for m in range(grid.ntau):
            sol[:, m] = _solve_singular(ops[m], rhs[:, m], tol)
        sol -= sol.mean(axis=2, keepdims=True)
        mean_defect = float(np.max(np.abs(sol.mean(axis=2))))
        fields = np.moveaxis(sol.reshape((-1, grid.ntau) + grid.y_shape), 1, -1)
    else:
        w = (sampled.a1 / sampled.b1).reshape(-1)
        cap = np.stack([a2 * w for a2 in sampled.a2])
        op = ParabolicCellOperator(cap, ops, rhs)
        sol, rep = periodic_parabolic_fixed_point(op, grid, fp_tol if fp_tol is not None else tol, max_periods)
        sol -= sol.mean(axis=(1, 2), keepdims=True)
        mean_defect = float(np.max(np.abs(sol.mean(axis=(1, 2)))))
        fields = np.moveaxis(sol.reshape((-1, grid.ntau) + grid.y_shape), 1, -1)
        fp_info = rep.as_dict()
    chi = np.ascontiguousarray(fields[:n])
    zeta = np.ascontiguousarray(fields[n]) if want_zeta else None
    corr = CellCorrectors(chi, zeta, regime, grid, 0.0, mean_defect, fp_info)
    corr.residual = cell_residual(corr, sampled, grid)
    return corr


def solve_chi(sampled: SampledCoefficients, regime: Regime, grid: CellGrid, tol: float = 1e-10, **kw) -> CellCorrectors:
    """Solve for ``chi^1..chi^n`` only (``zeta`` left as None)."""
    return _solve_all(sampled, regime, grid, tol, want_zeta=False, **kw)


def solve_zeta(sampled: SampledCoefficients, regime: Regime, grid: CellGrid, tol: float = 1e-10, **kw) -> np.ndarray:
    """Solve for ``zeta``; returns the field (Q- or Y-shaped per regime)."""
    return _solve_all(sampled, regime, grid, tol, want_zeta=True, **kw).zeta


def solve_correctors(sampled: SampledCoefficients, regime: Regime, grid: CellGrid, tol: float = 1e-10, **kw) -> CellCorrectors:
    """``chi`` and ``zeta`` together; they share one operator per tau-node."""
    return _solve_all(sampled, regime, grid, tol, want_zeta=True, **kw)


def cell_residual(correctors: CellCorrectors, sampled: SampledCoefficients, grid: CellGrid) -> float:
    """Max-abs residual of the discrete cell equations (in the solved scaling)."""
    st = cell_stencils(grid)
    want_zeta = correctors.zeta is not None
    ops, rhs = _regime_system(sampled, correctors.regime, st, want_zeta)
    stack = [correctors.chi[j] for j in range(grid.n)]
    if want_zeta:
        stack.append(correctors.zeta)
    if correctors.regime.tag == FAST_STRICT:
        res = [ops @ f.reshape(-1) - r for f, r in zip(stack, rhs)]
        return float(max(np.max(np.abs(v)) for v in res))
    w = (sampled.a1 / sampled.b1).reshape(-1)
    worst = 0.0
    for k, f in enumerate(stack):
        for m in range(grid.ntau):
            cur = f[..., m].reshape(-1)
            res = ops[m] @ cur - rhs[k, m]
            if correctors.regime.tag == FAST_EQUAL:
                prev = f[..., m - 1].reshape(-1)
                res = res + sampled.a2[m] * w * (cur - prev) / grid.htau
            worst = max(worst, float(np.max(np.abs(res))))
    return worst
