"""Effective coefficients of the single-scale (v-form) homogenized equation.

The homogenized problem for ``v`` reads::

    q_eff dv/dt - div(B_hom grad v) + P_eff . grad v + z_eff v = f s

with ``s = int_S dtau / a2`` and ``u = v r``, ``r = int_Y dy / b1``.  All
cell integrals are node means on the periodic cell grid.  Gradients of
correctors use the same one-sided stencils ``G_s`` as the cell solver, so
that the two expressions of ``B_hom`` agree up to the solver residual.

Macroscopic divergences inside ``z_eff`` are taken across macro nodes of
the assembled per-node vector ``W`` (second-order differences).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cell_solver import (
    FAST_EQUAL,
    FAST_STRICT,
    SLOW,
    CellCorrectors,
    CellSolverError,
    Regime,
    classify_regime,
    solve_correctors,
)
from .coefficients import (
    CoefficientError,
    CoefficientSet,
    MacroDerivatives,
    SampledCoefficients,
    T,
    TAU,
    X1,
    X2,
    _fd_steps,
    sample_on_cell,
)
from .grid import CellField, CellGrid, MacroGrid, cell_stencils

log = logging.getLogger(__name__)

PURE_FP = "pure-FP"
PURE_FICK = "pure-Fick"
FORMAL_B_EQ_I = "formal-B-eq-I"
SPECIAL_CASES = (PURE_FP, PURE_FICK, FORMAL_B_EQ_I)


class EffectiveError(RuntimeError):
    """Assembly failure at a macro node."""


# --- per-node pieces ---------------------------------------------------------


def _gradients_q(field_q: np.ndarray, grid: CellGrid) -> np.ndarray:
    """One-sided gradients of a Q-field; shape ``(S, n, N, ntau)``."""
    st = cell_stencils(grid)
    X = np.asarray(field_q, dtype=float).reshape(st.size, grid.ntau)
    return np.stack([np.stack([op @ X for op in ops]) for ops in st.ops])


def _on_q(values: np.ndarray, corr: CellCorrectors) -> np.ndarray:
    if corr.on_q:
        return values
    return np.broadcast_to(values[..., None], values.shape + (corr.grid.ntau,))


def _B_flat(sampled: SampledCoefficients) -> np.ndarray:
    """Per-orientation ``B_s``; shape ``(S, n, n, N, ntau)``."""
    g = sampled.grid
    return np.stack([B.reshape(g.n, g.n, -1, g.ntau) for B in sampled.B_orient])


def _flux_table(corr: CellCorrectors, sampled: SampledCoefficients):
    """``E[s, k, j] = delta_kj - G_s^k chi^j`` and ``BE = B E`` per orientation."""
    g = corr.grid
    n = g.n
    chi = corr.chi_q()
    grads = np.stack([_gradients_q(chi[j], g) for j in range(n)], axis=2)  # (S, k, j, N, ntau)
    E = np.eye(n)[None, :, :, None, None] - grads
    BE = np.einsum("siknm,skjnm->sijnm", _B_flat(sampled), E)
    return E, BE


def compute_q_eff(sampled: SampledCoefficients, grid: CellGrid) -> float:
    """``int_Y a1/b1 dy``."""
    return float(np.mean(sampled.a1 / sampled.b1))


def source_weight(sampled: SampledCoefficients) -> float:
    """``s = int_S dtau / a2``."""
    return float(np.mean(1.0 / sampled.a2))


def recovery_weight(sampled: SampledCoefficients) -> float:
    """``r = int_Y dy / b1``."""
    return float(np.mean(1.0 / sampled.b1))


def _check_regime(corr: CellCorrectors, regime: Regime | str | None):
    if regime is None:
        return
    tag = regime.tag if isinstance(regime, Regime) else regime
    if tag != corr.regime.tag:
        raise CellSolverError(
            f"correctors were solved for {corr.regime.tag}, B_hom requested for {tag}"
        )


def b_hom_forms(corr: CellCorrectors, sampled: SampledCoefficients, grid: CellGrid) -> tuple[np.ndarray, np.ndarray]:
    """Both expressions of ``B_hom``: the flux form and the energy form.

    The energy form carries the cross term ``int (a1/b1) d_tau chi^j chi^i``
    in FastEqual (backward difference in tau, matching the solver).
    """
    n = grid.n
    E, BE = _flux_table(corr, sampled)
    wgt = (sampled.b2 / sampled.a2)[None, None, None, :]
    form1 = np.mean(np.mean(BE, axis=0) * wgt, axis=(-2, -1))
    energy = np.einsum("skinm,skjnm->sijnm", E, BE)
    form2 = np.mean(np.mean(energy, axis=0) * wgt, axis=(-2, -1))
    if corr.regime.tag == FAST_EQUAL:
        chi = corr.chi.reshape(n, -1, grid.ntau)
        w = (sampled.a1 / sampled.b1).reshape(-1, 1)
        dchi = (chi - np.roll(chi, 1, axis=-1)) / grid.htau
        form2 = form2 + np.einsum("jnm,inm->ij", w * dchi, chi) / chi[0].size
    return form1, form2


def compute_B_hom(corr: CellCorrectors, sampled: SampledCoefficients, grid: CellGrid,
                  regime: Regime | str | None = None) -> tuple[np.ndarray, float]:
    """``B_hom`` (flux form) and the max-abs gap to the energy form."""
    _check_regime(corr, regime)
    form1, form2 = b_hom_forms(corr, sampled, grid)
    return form1, float(np.max(np.abs(form1 - form2)))


def antisymmetric_part(B: np.ndarray) -> np.ndarray:
    return 0.5 * (B - np.swapaxes(B, -1, -2))


def symmetric_min_eig(B: np.ndarray) -> float:
    sym = 0.5 * (B + np.swapaxes(B, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def compute_B_eff(corr: CellCorrectors, sampled: SampledCoefficients, grid: CellGrid) -> CellField:
    """``B grad_y(y - chi)`` at the cell nodes (orientation average)."""
    _, BE = _flux_table(corr, sampled)
    vals = np.mean(BE, axis=0).reshape((grid.n, grid.n) + grid.q_shape)
    return CellField(vals, grid, "Q", "matrix", "B_eff")


def _flux_mean(B: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """``(1/S) sum_s B_s g_s``; ``B`` is ``(S, n, n, N, ntau)``, ``grads`` ``(S, n, N, ntau)``."""
    return np.mean(np.einsum("sklnm,slnm->sknm", B, grads), axis=0)


@dataclass
class LocalTerms:
    """Per-node pieces of ``P_eff`` and ``z_eff``.

    ``W`` is the part of ``P_eff`` whose macroscopic divergence enters
    ``z_eff``; ``z_local`` is ``z_eff`` without that divergence.
    """

    P: np.ndarray
    W: np.ndarray
    z_local: float


def local_terms(corr: CellCorrectors, sampled: SampledCoefficients,
                derivs: MacroDerivatives | None, grid: CellGrid) -> LocalTerms:
    if derivs is None:
        raise EffectiveError("macroscopic derivatives are required for P_eff and z_eff")
    if corr.zeta is None:
        raise EffectiveError("zeta has not been solved")
    n = grid.n
    omega = corr.regime.omega
    B = _B_flat(sampled)
    a2 = sampled.a2[None, None, :]
    b2 = sampled.b2[None, None, :]
    gb2 = derivs.grad_b2[:, None, :]
    ga2 = derivs.grad_inv_a2[:, None, :]

    S = B.shape[0]
    Bgz = _flux_mean(B, _gradients_q(_on_q(corr.zeta, corr), grid))
    Bgb2 = _flux_mean(B, np.broadcast_to(gb2, (S, n) + B.shape[3:]))
    if omega:
        ratio = sampled.b / sampled.b1[..., None]
        Bgr = _flux_mean(B, _gradients_q(ratio, grid))
    else:
        Bgr = np.zeros_like(Bgb2)
    W = np.mean(b2 / a2 * Bgz - Bgb2 / a2 - Bgr / a2, axis=(1, 2))

    B_eff = compute_B_eff(corr, sampled, grid).values.reshape(n, n, -1, grid.ntau)
    P = np.mean(b2 * np.einsum("iknm,inm->knm", B_eff, np.broadcast_to(ga2, (n,) + B.shape[3:])), axis=(1, 2)) + W

    F = Bgb2 + Bgr - b2 * Bgz
    z_local = float(np.mean(sampled.a1 * derivs.dt_inv_b1) + np.mean(np.sum(F * ga2, axis=0)))
    return LocalTerms(P, W, z_local)


def compute_P_eff(corr: CellCorrectors, sampled: SampledCoefficients,
                  derivs: MacroDerivatives | None, grid: CellGrid) -> np.ndarray:
    return local_terms(corr, sampled, derivs, grid).P


def _local_W(coeffs: CoefficientSet, x: Sequence[float], t: float, grid: CellGrid, regime: Regime, tol: float) -> np.ndarray:
    s = sample_on_cell(coeffs, x, t, grid)
    corr = solve_correctors(s, regime, grid, tol)
    return local_terms(corr, s, s.derivatives, grid).W


def compute_z_eff(corr: CellCorrectors, sampled: SampledCoefficients, derivs: MacroDerivatives | None,
                  grid: CellGrid, div_W: float | None = None, tol: float = 1e-10) -> float:
    """``z_eff`` at one point.

    ``div_W`` is the macroscopic divergence of ``W`` (see :class:`LocalTerms`).
    When omitted it is zero for x-independent data and otherwise obtained by
    centred differences of ``W`` with fresh cell solves at ``x +- h``.
    """
    terms = local_terms(corr, sampled, derivs, grid)
    if div_W is None:
        coeffs = sampled.coeffs
        if coeffs.macro_independent("x"):
            div_W = 0.0
        else:
            hx, _ = _fd_steps(coeffs)
            div_W = 0.0
            for k in range(grid.n):
                xp, xm = list(sampled.x), list(sampled.x)
                xp[k] += hx[k]
                xm[k] -= hx[k]
                Wp = _local_W(coeffs, xp, sampled.t, grid, corr.regime, tol)
                Wm = _local_W(coeffs, xm, sampled.t, grid, corr.regime, tol)
                div_W += (Wp[k] - Wm[k]) / (2 * hx[k])
    return terms.z_local + float(div_W)


# --- model over the macro grid ---------------------------------------------------


@dataclass
class CellSolve:
    """Everything assembled at one macro point."""

    x: tuple[float, ...]
    t: float
    q: float
    s: float
    r: float
    B_hom: np.ndarray
    form_gap: float
    terms: LocalTerms
    correctors: CellCorrectors | None = None
    sampled: SampledCoefficients | None = None


@dataclass
class EffectiveModel:
    """Effective fields on ``(times, *macro shape)``.

    Arrays: ``q_eff`` and ``z_eff``, ``s``, ``r`` of shape ``(nt+1, *shape)``;
    ``P_eff`` with a trailing ``n`` axis; ``B_hom`` with trailing ``(n, n)``.
    ``cells`` keeps the per-node assemblies that were actually computed
    (all of them only when ``keep_cells`` was requested).
    """

    grid: MacroGrid
    cell_grid: CellGrid
    regime: Regime
    q_eff: np.ndarray
    B_hom: np.ndarray
    P_eff: np.ndarray
    z_eff: np.ndarray
    s: np.ndarray
    r: np.ndarray
    form_gap: float
    residual: float
    cell_solves: int
    cells: list[CellSolve] = field(default_factory=list)

    @property
    def B_sym(self) -> np.ndarray:
        return 0.5 * (self.B_hom + np.swapaxes(self.B_hom, -1, -2))

    @property
    def B_antisym(self) -> np.ndarray:
        return antisymmetric_part(self.B_hom)

    @property
    def min_eig(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.B_sym)))

    @property
    def antisym_norm(self) -> float:
        return float(np.max(np.abs(self.B_antisym)))

    def u_form(self) -> dict[str, np.ndarray]:
        """Coefficients for ``u = v r`` divided by ``s``: capacity and diffusion."""
        rs = self.r * self.s
        return {"capacity": self.q_eff / rs, "diffusion": self.B_hom / rs[..., None, None]}

    def B_eff(self, index: int = 0) -> CellField:
        c = self.cells[index]
        if c.correctors is None:
            raise EffectiveError("correctors were not kept for this node")
        return compute_B_eff(c.correctors, c.sampled, self.cell_grid)

    def summary(self) -> dict[str, Any]:
        uf = self.u_form()
        return {
            "regime": self.regime.tag,
            "omega": self.regime.omega,
            "min_eig": self.min_eig,
            "form_gap": self.form_gap,
            "antisym_norm": self.antisym_norm,
            "cell_residual": self.residual,
            "cell_solves": self.cell_solves,
            "q_eff_range": [float(self.q_eff.min()), float(self.q_eff.max())],
            "u_diffusion_range": [float(uf["diffusion"].min()), float(uf["diffusion"].max())],
        }

    def to_csv(self, path: str | Path) -> None:
        """Columns: t, x1[, x2], q_eff, B11..Bnn (row-major), P1..Pn, z_eff, s, r."""
        n = self.grid.n
        xs = self.grid.mesh()
        head = ["t"] + [f"x{k + 1}" for k in range(n)] + ["q_eff"]
        head += [f"B{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        head += [f"P{k + 1}" for k in range(n)] + ["z_eff", "s", "r"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(head)
            for m, t in enumerate(self.grid.times):
                for idx in np.ndindex(*self.grid.shape):
                    row = [t] + [x[idx] for x in xs] + [self.q_eff[m][idx]]
                    row += list(self.B_hom[m][idx].ravel()) + list(self.P_eff[m][idx])
                    row += [self.z_eff[m][idx], self.s[m][idx], self.r[m][idx]]
                    wr.writerow([repr(float(v)) for v in row])


def assemble_node(coeffs: CoefficientSet, x: Sequence[float], t: float, cell_grid: CellGrid,
                  regime: Regime, tol: float = 1e-10, keep: bool = False) -> CellSolve:
    sampled = sample_on_cell(coeffs, x, t, cell_grid)
    corr = solve_correctors(sampled, regime, cell_grid, tol)
    B_hom, gap = compute_B_hom(corr, sampled, cell_grid, regime)
    terms = local_terms(corr, sampled, sampled.derivatives, cell_grid)
    return CellSolve(
        tuple(float(v) for v in x), float(t), compute_q_eff(sampled, cell_grid),
        source_weight(sampled), recovery_weight(sampled), B_hom, gap, terms,
        corr if keep else None, sampled if keep else None,
    )


def _divergence(W: np.ndarray, grid: MacroGrid) -> np.ndarray:
    """``div W`` per time level; ``W`` has shape ``(nt+1, *shape, n)``."""
    out = np.zeros(W.shape[:-1])
    for k, h in enumerate(grid.h):
        out += np.gradient(W[..., k], h, axis=1 + k, edge_order=2)
    return out


def effective_model(coeffs: CoefficientSet, grid: MacroGrid, cell_grid: CellGrid,
                    regime: Regime | None = None, tol: float = 1e-10,
                    keep_cells: bool = False) -> EffectiveModel:
    """Assemble the effective model at every macro node and time level.

    One cell solve is reused across x (resp. t) when no factor depends on x
    (resp. t).  Solver failures are re-raised naming the macro point.
    """
    if coeffs.n != grid.n or cell_grid.n != grid.n:
        raise CoefficientError("dimension mismatch between coefficients, macro grid and cell grid")
    if regime is None:
        regime = classify_regime(coeffs.alpha, coeffs.beta, override=coeffs.regime)
    n = grid.n
    x_free = coeffs.macro_independent("x")
    t_free = coeffs.macro_independent("t")
    times = grid.times
    mesh = grid.mesh()
    t_idx = [0] if t_free else range(len(times))
    x_idx = [(0,) * n] if x_free else list(np.ndindex(*grid.shape))
    x_probe = tuple(0.5 * (lo + hi) for lo, hi in grid.bounds) if x_free else None

    shape = (len(times),) + grid.shape
    q = np.empty(shape)
    s = np.empty(shape)
    r = np.empty(shape)
    zl = np.empty(shape)
    Bh = np.empty(shape + (n, n))
    P = np.empty(shape + (n,))
    W = np.empty(shape + (n,))
    gap = 0.0
    resid = 0.0
    cells: list[CellSolve] = []
    solves = 0
    for m in t_idx:
        for idx in x_idx:
            x = x_probe if x_free else tuple(float(c[idx]) for c in mesh)
            t = 0.0 if t_free else float(times[m])
            keep = keep_cells or not cells
            try:
                cs = assemble_node(coeffs, x, t, cell_grid, regime, tol, keep)
            except (CellSolverError, CoefficientError, EffectiveError, np.linalg.LinAlgError) as exc:
                raise EffectiveError(f"assembly failed at x={x}, t={t}: {exc}") from exc
            solves += 1
            if keep:
                cells.append(cs)
            gap = max(gap, cs.form_gap)
            if cs.correctors is not None:
                resid = max(resid, cs.correctors.residual)
            tsl = slice(None) if t_free else m
            xsl = tuple(slice(None) for _ in range(n)) if x_free else idx
            sel = (tsl,) + xsl
            q[sel], s[sel], r[sel], zl[sel] = cs.q, cs.s, cs.r, cs.terms.z_local
            Bh[sel] = cs.B_hom
            P[sel] = cs.terms.P
            W[sel] = cs.terms.W
    z = zl if x_free else zl + _divergence(W, grid)
    model = EffectiveModel(grid, cell_grid, regime, q, Bh, P, z, s, r, gap, resid, solves, cells)
    if np.any(q <= 0):
        log.warning("non-positive q_eff encountered (min %.3g)", q.min())
    if model.min_eig <= 0:
        log.warning("symmetric part of B_hom is not positive definite (min eig %.3g)", model.min_eig)
    return model


# --- closed forms ----------------------------------------------------------------


def _is_identity_B(coeffs: CoefficientSet) -> bool:
    for i, row in enumerate(coeffs.B):
        for j, f in enumerate(row):
            if not f.symbolic or f.expr != (1 if i == j else 0):
                return False
    return True


def _harmonic_y(values: np.ndarray) -> float:
    return float(1.0 / np.mean(1.0 / values))


def closed_form_special(coeffs: CoefficientSet, cell_grid: CellGrid, case: str,
                        x: Sequence[float] | None = None, t: float = 0.0) -> dict[str, Any]:
    """Averaged u-form coefficients of the special cases by direct quadrature.

    Returns ``capacity`` and ``diffusion`` (an ``n x n`` matrix) of
    ``capacity du/dt - div(diffusion grad u) = f`` for the pure Fick and pure
    Fokker-Planck cases, and the diffusion factor ``(int b2)(int 1/b1)^-1``
    for the formal B = I limit.
    """
    if case not in SPECIAL_CASES:
        raise CoefficientError(f"unknown special case {case!r}; expected one of {SPECIAL_CASES}")
    n = coeffs.n
    if x is None:
        if coeffs.domain is not None:
            x = tuple(0.5 * (lo + hi) for lo, hi in coeffs.domain.bounds)
        else:
            x = (0.5,) * n
    sampled = sample_on_cell(coeffs, x, t, cell_grid)
    a1, a2, b1, b2 = sampled.a1, sampled.a2, sampled.b1, sampled.b2
    s = float(np.mean(1.0 / a2))
    r = float(np.mean(1.0 / b1))
    if case == FORMAL_B_EQ_I:
        if not _is_identity_B(coeffs):
            raise CoefficientError("formal-B-eq-I requires B = I")
        if not all(f.symbolic and f.expr == 1 for f in (coeffs.a1, coeffs.a2)):
            raise CoefficientError("formal-B-eq-I requires a1 = a2 = 1")
        d = float(np.mean(b2)) / r
        return {"case": case, "capacity": 1.0, "diffusion": d * np.eye(n)}
    if not all(not f.depends_on(X1, X2, T) for f in (coeffs.a1, coeffs.a2, coeffs.b1, coeffs.b2)):
        raise CoefficientError(f"{case} requires a1, a2, b1, b2 independent of (x, t)")
    if case == PURE_FP:
        if not _is_identity_B(coeffs):
            raise CoefficientError("pure-FP requires B = I")
        cap = float(np.mean(a1 / b1)) / (s * r)
        d = float(np.mean(b2 / a2)) / (r * s)
        return {"case": case, "capacity": cap, "diffusion": d * np.eye(n)}
    # pure Fick
    if not (all(f.symbolic and f.expr == 1 for f in (coeffs.b1, coeffs.b2)) and coeffs.b.is_zero()):
        raise CoefficientError("pure-Fick requires b1 = b2 = 1 and b = 0")
    regime = classify_regime(coeffs.alpha, coeffs.beta, override=coeffs.regime)
    Bq = sampled.B  # (n, n, *y, ntau)
    if not coeffs.B_depends_on_y():
        Bm = Bq.reshape(n, n, -1, cell_grid.ntau)[:, :, 0, :]
        Bh = np.mean(Bm / a2, axis=-1)
    elif n == 1:
        Bl = Bq[0, 0]  # (ny, ntau)
        if regime.tag == SLOW:
            Bh = np.mean([_harmonic_y(Bl[:, m]) / a2[m] for m in range(cell_grid.ntau)])
        elif regime.tag == FAST_STRICT:
            Bh = _harmonic_y(np.mean(Bl / a2, axis=1))
        else:
            if coeffs.B[0][0].depends_on(TAU):
                raise CoefficientError("pure-Fick closed form in FastEqual needs B independent of tau")
            Bh = _harmonic_y(Bl[:, 0]) * s
        Bh = np.array([[Bh]])
    else:
        raise CoefficientError("pure-Fick closed form needs n = 1 or B independent of y")
    cap = float(np.mean(a1)) / s
    return {"case": case, "capacity": cap, "diffusion": np.asarray(Bh) / s}

