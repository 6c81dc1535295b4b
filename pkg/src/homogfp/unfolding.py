"""Discrete time-periodic unfolding, space-time cell average and oscillation.

A space-time field ``w`` on a :class:`~homogfp.grid.MacroGrid` is re-indexed
by ``(eps-cell xi, time slab, y-node, tau-node)``.  Cells are the lattice
``eps^alpha (k + [0, 1)^n)`` anchored at the origin and slabs
``eps^beta (l + [0, 1))``; only cells inside the domain and complete slabs
are kept (the field is taken as zero elsewhere).  On a commensurate grid
(an integer number of nodes per cell and per slab, cell nodes left-closed)
the unfolding is a pure permutation of node values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import CellField, CellGrid, MacroGrid


class UnfoldingError(ValueError):
    pass


def _ratio(a: float, b: float, tol: float = 1e-9) -> int | None:
    q = a / b
    k = round(q)
    return int(k) if abs(q - k) <= tol * max(1.0, abs(q)) else None


@dataclass
class UnfoldedField:
    """``values`` has shape ``(*cells, slabs, *y_nodes, tau_nodes)``.

    ``cells[k]`` lists the lattice indices of the kept cells along axis ``k``
    and ``slabs`` those of the kept time slabs.  ``x_index[k]`` (cells x
    y-nodes) and ``t_index`` (slabs x tau-nodes) give the source nodes.
    ``exact`` is False when nearest-node sampling was used.
    """

    values: np.ndarray
    eps: float
    alpha: float
    beta: float
    grid: MacroGrid
    cells: tuple[np.ndarray, ...]
    slabs: np.ndarray
    x_index: tuple[np.ndarray, ...]
    t_index: np.ndarray
    exact: bool
    excluded_measure: float

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def cell_grid(self) -> CellGrid:
        shp = self.values.shape
        return CellGrid(self.n, shp[self.n + 1], shp[-1])

    def q_axes(self) -> tuple[int, ...]:
        return tuple(range(self.n + 1, 2 * self.n + 2))

    def q_mean(self) -> np.ndarray:
        """Mean over ``(y, tau)`` per cell and slab."""
        return np.mean(self.values, axis=self.q_axes())

    @property
    def cell_measure(self) -> float:
        return (self.eps**self.alpha) ** self.n * self.eps**self.beta

    def l2_squared(self) -> float:
        """``sum over Lambda of int_Q |values|^2`` times the cell measure."""
        return float(np.sum(np.mean(self.values**2, axis=self.q_axes())) * self.cell_measure)

    def with_values(self, values: np.ndarray) -> UnfoldedField:
        return UnfoldedField(values, self.eps, self.alpha, self.beta, self.grid, self.cells, self.slabs,
                             self.x_index, self.t_index, self.exact, self.excluded_measure)

    def scatter(self, per_cell: np.ndarray) -> np.ndarray:
        """Space-time field equal to ``per_cell[cell, slab]`` on the cell's nodes, zero elsewhere."""
        n = self.n
        out = np.zeros((self.grid.nt + 1,) + self.grid.shape)
        idx = _gather_index(self.x_index, self.t_index, n)
        full = np.broadcast_to(
            per_cell.reshape(per_cell.shape + (1,) * (n + 1)), self.values.shape
        )
        out[idx] = full
        return out

    def to_csv(self, path: str | Path) -> None:
        """Columns: xi1[, xi2], slab, y1[, y2], tau, value."""
        n = self.n
        shp = self.values.shape
        ny, ntau = shp[n + 1], shp[-1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"xi{k + 1}" for k in range(n)] + ["slab"] + [f"y{k + 1}" for k in range(n)] + ["tau", "value"])
            for idx in np.ndindex(*shp):
                cell = [int(self.cells[k][idx[k]]) for k in range(n)]
                slab = int(self.slabs[idx[n]])
                ys = [idx[n + 1 + k] / ny for k in range(n)]
                tau = idx[-1] / ntau
                wr.writerow(cell + [slab] + [repr(y) for y in ys] + [repr(tau), repr(float(self.values[idx]))])


def _gather_index(x_index, t_index, n):
    """Advanced index producing the ``(*cells, slabs, *y, tau)`` layout."""
    nd = 2 * n + 2
    parts = []
    tshape = [1] * nd
    tshape[n] = t_index.shape[0]
    tshape[-1] = t_index.shape[1]
    parts.append(t_index.reshape(tshape))
    for k, xi in enumerate(x_index):
        s = [1] * nd
        s[k] = xi.shape[0]
        s[n + 1 + k] = xi.shape[1]
        parts.append(xi.reshape(s))
    return tuple(parts)


def _lattice(lo: float, hi: float, period: float, h: float, strict: bool, nodes: int | None):
    """Kept cell indices and the node indices of their sample points."""
    k0 = math.ceil(lo / period - 1e-9)
    k1 = math.floor(hi / period + 1e-9)
    cells = np.arange(k0, k1)
    per = _ratio(period, h)
    exact = per is not None and _ratio(lo, h) is not None
    if strict and not exact:
        raise UnfoldingError(
            f"grid (h={h:.6g}, origin {lo}) is not commensurate with the cell size {period:.6g}"
        )
    if exact and nodes is None:
        nodes = per
        offsets = np.arange(per)
        base = np.rint((cells * period - lo) / h).astype(int)
        idx = base[:, None] + offsets[None, :]
    else:
        nodes = nodes or max(per or 0, 16)
        pts = (cells[:, None] + np.arange(nodes)[None, :] / nodes) * period
        idx = np.rint((pts - lo) / h).astype(int)
        exact = False
    return cells, idx, exact


def unfold(w: np.ndarray, grid: MacroGrid, eps: float, alpha: float, beta: float,
           strict: bool = True, nodes: tuple[int, int] | None = None) -> UnfoldedField:
    """Unfold ``w`` (shape ``(nt+1, *grid.shape)``) at scale ``eps``.

    In strict mode (default) the grid must be commensurate with the
    eps-cells; otherwise nearest-node sampling with ``nodes = (ny, ntau)``
    points per cell is used and the result is flagged ``exact=False``.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (grid.nt + 1,) + grid.shape:
        raise UnfoldingError(f"field shape {w.shape} does not match the grid")
    ny, nq = (None, None) if nodes is None else nodes
    lx, lt = eps**alpha, eps**beta
    cells, x_index, exact = [], [], True
    for (lo, hi), h in zip(grid.bounds, grid.h):
        c, idx, ex = _lattice(lo, hi, lx, h, strict, ny)
        cells.append(c)
        x_index.append(idx)
        exact &= ex
    slabs, t_index, ext = _lattice(0.0, grid.T, lt, grid.dt, strict, nq)
    exact &= ext
    if any(c.size == 0 for c in cells) or slabs.size == 0:
        raise UnfoldingError("no complete eps-cell or time slab inside the domain")
    if not exact and len({ix.shape[1] for ix in x_index}) > 1:
        raise UnfoldingError("unequal nodes per cell across axes")
    vals = w[_gather_index(tuple(x_index), t_index, grid.n)]
    vol_x = np.prod([hi - lo for lo, hi in grid.bounds])
    kept = np.prod([c.size * lx for c in cells]) * slabs.size * lt
    excluded = float(vol_x * grid.T - kept)
    return UnfoldedField(vals, float(eps), float(alpha), float(beta), grid, tuple(cells), slabs,
                         tuple(x_index), t_index, bool(exact), excluded)


def cell_average(w: np.ndarray, grid: MacroGrid, eps: float, alpha: float, beta: float,
                 strict: bool = True) -> np.ndarray:
    """``M_eps(w)``: per space-time cell mean, constant on the cell, zero outside."""
    U = unfold(w, grid, eps, alpha, beta, strict)
    return U.scatter(U.q_mean())


def oscillation(w: np.ndarray, grid: MacroGrid, eps: float, alpha: float, beta: float,
                strict: bool = True) -> UnfoldedField:
    """``Z_eps(w) = T_eps(w) - M_eps(w)``."""
    U = unfold(w, grid, eps, alpha, beta, strict)
    m = U.q_mean()
    return U.with_values(U.values - m.reshape(m.shape + (1,) * (grid.n + 1)))


def micro_time_average(phi: CellField | np.ndarray, grid: CellGrid | None = None) -> CellField:
    """tau-mean of a Q-field per y-node."""
    if isinstance(phi, CellField):
        if phi.domain != "Q":
            raise ValueError("micro_time_average needs a field on Q")
        return CellField(np.mean(phi.values, axis=-1), phi.grid, "Y", phi.kind, f"M_S({phi.name})")
    if grid is None:
        raise ValueError("a cell grid is required for raw arrays")
    return CellField(np.mean(np.asarray(phi, dtype=float), axis=-1), grid, "Y", "scalar", "M_S")
