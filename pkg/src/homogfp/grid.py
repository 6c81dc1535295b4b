"""Uniform tensor grids on the periodic cell and on the macroscopic box.

The cell ``Q = Y x S`` with ``Y = (0,1)^n`` and ``S = (0,1)`` is sampled at
``y_i = i/ny`` and ``tau_m = m/ntau`` (the node at 1 is identified with 0).
Macroscopic grids include the Dirichlet boundary nodes.

Discrete gradients follow one convention throughout the package: for every
choice ``s`` of forward/backward differences per axis there is a difference
operator ``G_s``, and the flux-form operator ``-div(K grad w)`` is

    A(K) = 2^-n * sum_s G_s^T diag(K) G_s .

In 1D this is the three-point stencil with arithmetic face averages of ``K``.
The operator is symmetric positive semidefinite whenever ``K`` is pointwise
SPD, and on periodic grids its kernel is the constants.
"""

from __future__ import annotations

import csv
import functools
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp

Domain = Literal["Q", "Y", "S"]


@dataclass(frozen=True)
class CellGrid:
    n: int
    ny: int
    ntau: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"cell dimension must be 1 or 2, got {self.n}")
        if self.ny < 4 or self.ntau < 4:
            raise ValueError("cell grids need at least 4 nodes per direction")

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def htau(self) -> float:
        return 1.0 / self.ntau

    @property
    def y_shape(self) -> tuple[int, ...]:
        return (self.ny,) * self.n

    @property
    def q_shape(self) -> tuple[int, ...]:
        return self.y_shape + (self.ntau,)

    @property
    def num_nodes(self) -> int:
        return self.ny**self.n * self.ntau

    @property
    def y_nodes(self) -> np.ndarray:
        return np.arange(self.ny) * self.hy

    @property
    def tau_nodes(self) -> np.ndarray:
        return np.arange(self.ntau) * self.htau

    def y_mesh(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``y_shape``."""
        return tuple(np.meshgrid(*([self.y_nodes] * self.n), indexing="ij"))

    def q_mesh(self) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
        """``(y-components, tau)`` broadcastable to ``q_shape``."""
        ys = tuple(c[..., None] for c in self.y_mesh())
        tau = self.tau_nodes.reshape((1,) * self.n + (self.ntau,))
        return ys, tau


def build_cell_grid(n: int, ny: int, ntau: int) -> CellGrid:
    return CellGrid(int(n), int(ny), int(ntau))


@dataclass(frozen=True)
class MacroGrid:
    """Tensor grid of ``Omega x (0, T)``; ``nx`` nodes per axis incl. boundary."""

    bounds: tuple[tuple[float, float], ...]
    nx: int | tuple[int, ...]
    nt: int
    T: float

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        nx = (self.nx,) * len(b) if np.isscalar(self.nx) else tuple(self.nx)
        object.__setattr__(self, "nx", tuple(int(k) for k in nx))
        if len(b) not in (1, 2) or len(self.nx) != len(b):
            raise ValueError("macro grid must be 1D or 2D with one count per axis")
        if min(self.nx) < 3:
            raise ValueError("macro grids need nx >= 3")
        if self.nt < 1 or self.T <= 0:
            raise ValueError("need nt >= 1 and T > 0")
        if any(hi <= lo for lo, hi in b):
            raise ValueError("empty domain interval")

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nx  # type: ignore[return-value]

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (k - 1) for (lo, hi), k in zip(self.bounds, self.nx))

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, k) for (lo, hi), k in zip(self.bounds, self.nx))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.n):
            idx = [slice(None)] * self.n
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def contains(self, x: Sequence[float], t: float, tol: float = 1e-12) -> bool:
        ok = all(lo - tol <= xi <= hi + tol for xi, (lo, hi) in zip(x, self.bounds))
        return ok and -tol <= t <= self.T + tol

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))


@dataclass(frozen=True)
class CellField:
    """Values on a cell grid; the last axes follow ``y_shape`` (+ ``ntau``).

    ``kind`` is ``scalar``, ``vector`` (one leading component axis) or
    ``matrix`` (two leading axes).
    """

    values: np.ndarray
    grid: CellGrid
    domain: Domain = "Q"
    kind: str = "scalar"
    name: str = "value"

    def __post_init__(self):
        lead = {"scalar": 0, "vector": 1, "matrix": 2}[self.kind]
        expect = {"Q": self.grid.q_shape, "Y": self.grid.y_shape, "S": (self.grid.ntau,)}[
            self.domain
        ]
        if self.values.shape[lead:] != expect:
            raise ValueError(
                f"field shape {self.values.shape} does not match {self.domain} grid {expect}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cell field contains non-finite values")


def _domain_of(shape: tuple[int, ...], grid: CellGrid) -> Domain:
    if shape == grid.q_shape:
        return "Q"
    if shape == grid.y_shape:
        return "Y"
    if shape == (grid.ntau,):
        return "S"
    raise ValueError(f"array of shape {shape} does not live on {grid}")


def integrate_cell(field: CellField | np.ndarray, grid: CellGrid, domain: Domain | None = None):
    """Midpoint (node-average) quadrature over Q, Y or S.

    For uniform periodic grids this coincides with the trapezoidal rule.
    Leading component axes are kept, so vector and matrix fields integrate
    component-wise.
    """
    if isinstance(field, CellField):
        values, lead = field.values, {"scalar": 0, "vector": 1, "matrix": 2}[field.kind]
        own = field.domain
    else:
        values, lead = np.asarray(field, dtype=float), 0
        own = _domain_of(values.shape, grid)
    own_shape = values.shape[lead:]
    if domain is None:
        domain = own
    if domain != own:
        raise ValueError(f"cannot integrate a field on {own} over {domain}")
    axes = tuple(range(lead, lead + len(own_shape)))
    out = values.mean(axis=axes)
    return float(out) if np.ndim(out) == 0 else out


# --- difference operators -------------------------------------------------


def _diff_1d(m: int, h: float, forward: bool, periodic: bool) -> tuple[sp.csr_matrix, np.ndarray]:
    """1D one-sided difference quotient and the mask of nodes where it exists."""
    eye = sp.identity(m, format="csr")
    if periodic:
        shift = sp.csr_matrix(np.roll(np.eye(m), 1 if forward else -1, axis=1))
        d = (shift - eye) / h if forward else (eye - shift) / h
        return d.tocsr(), np.ones(m, dtype=bool)
    if forward:
        d = sp.diags([-np.ones(m), np.ones(m - 1)], [0, 1], shape=(m, m))
        mask = np.arange(m) < m - 1
    else:
        d = sp.diags([np.ones(m), -np.ones(m - 1)], [0, -1], shape=(m, m))
        mask = np.arange(m) > 0
    d = sp.diags(mask.astype(float)) @ d
    return (d / h).tocsr(), mask


@dataclass
class GradientStencils:
    """The ``2^n`` one-sided gradient operators on a tensor grid.

    ``ops[s][k]`` differentiates along axis ``k`` for orientation ``s``;
    ``masks[s]`` marks the nodes where the whole gradient ``G_s`` exists.
    """

    shape: tuple[int, ...]
    h: tuple[float, ...]
    periodic: bool
    ops: list[list[sp.csr_matrix]] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def gradient_stencils(shape: Sequence[int], h: Sequence[float], periodic: bool) -> GradientStencils:
    shape = tuple(int(s) for s in shape)
    h = tuple(float(v) for v in h)
    st = GradientStencils(shape, h, periodic)
    one_d = {
        (k, fw): _diff_1d(shape[k], h[k], fw, periodic)
        for k in range(len(shape))
        for fw in (True, False)
    }
    for orient in itertools.product((True, False), repeat=len(shape)):
        comps, mask = [], np.ones(shape, dtype=bool)
        for k, fw in enumerate(orient):
            d, m1 = one_d[(k, fw)]
            mats = [sp.identity(s, format="csr") for s in shape]
            mats[k] = d
            op = mats[0]
            for mat in mats[1:]:
                op = sp.kron(op, mat, format="csr")
            comps.append(op)
            bshape = [1] * len(shape)
            bshape[k] = shape[k]
            mask = mask & m1.reshape(bshape)
        flat = sp.diags(mask.ravel().astype(float))
        st.ops.append([(flat @ c).tocsr() for c in comps])
        st.masks.append(mask.ravel())
    return st


def orientation_signs(n: int) -> list[tuple[int, ...]]:
    """Sign pattern (+1 forward, -1 backward) of each orientation, in ``ops`` order."""
    return [tuple(1 if fw else -1 for fw in o) for o in itertools.product((True, False), repeat=n)]


def stiffness(st: GradientStencils, K) -> sp.csr_matrix:
    """Assemble ``A(K) = 2^-n sum_s G_s^T K_s G_s``.

    ``K`` has shape ``(n, n, *shape)`` (or ``shape`` for a scalar), or is a
    list with one such array per orientation.
    """
    n = st.n
    Ks = list(K) if isinstance(K, (list, tuple)) else [K] * len(st.ops)
    total = sp.csr_matrix((st.size, st.size))
    for ops, mask, Ko in zip(st.ops, st.masks, Ks):
        Ko = np.asarray(Ko, dtype=float)
        if Ko.shape == st.shape:
            Ko = np.einsum("ij,...->ij...", np.eye(n), Ko)
        Kf = Ko.reshape(n, n, -1)
        for k in range(n):
            for l in range(n):
                if not np.any(Kf[k, l]):
                    continue
                total = total + ops[k].T @ sp.diags(Kf[k, l] * mask) @ ops[l]
    return (total / 2**n).tocsr()


def apply_gradients(st: GradientStencils, w: np.ndarray) -> list[np.ndarray]:
    """``[G_s w]`` as arrays of shape ``(n, size)``."""
    wf = np.asarray(w, dtype=float).ravel()
    return [np.stack([op @ wf for op in ops]) for ops in st.ops]


def divergence_of(st: GradientStencils, fluxes: Sequence[np.ndarray]) -> np.ndarray:
    """``2^-n sum_s G_s^T V_s``; the negative discrete divergence of ``V``.

    ``fluxes[s]`` has shape ``(n, size)`` (one vector field per orientation).
    """
    out = np.zeros(st.size)
    for ops, mask, V in zip(st.ops, st.masks, fluxes):
        for k in range(st.n):
            out += ops[k].T @ (V[k] * mask)
    return out / 2**st.n


def central_gradient(st: GradientStencils, w: np.ndarray) -> np.ndarray:
    """Average of the one-sided gradients (central differences on periodic grids)."""
    gs = apply_gradients(st, w)
    return sum(gs) / len(gs)


@functools.lru_cache(maxsize=16)
def cell_stencils(grid: CellGrid) -> GradientStencils:
    return gradient_stencils(grid.y_shape, (grid.hy,) * grid.n, periodic=True)


def periodic_gradient(field: CellField | np.ndarray, grid: CellGrid) -> CellField:
    """Central-difference ``grad_y`` with wrap-around, applied per tau slice.

    The discrete Y-integral of every component is exactly zero.
    """
    values = field.values if isinstance(field, CellField) else np.asarray(field, dtype=float)
    domain = _domain_of(values.shape, grid)
    if domain == "S":
        raise ValueError("periodic_gradient needs a field that depends on y")
    out = []
    for k in range(grid.n):
        fwd = np.roll(values, -1, axis=k)
        bwd = np.roll(values, 1, axis=k)
        out.append((fwd - bwd) / (2.0 * grid.hy))
    return CellField(np.stack(out), grid, domain, "vector", "grad")


# --- CSV ---------------------------------------------------------------------


def cellfield_to_csv(field: CellField, path: str | Path) -> None:
    """One row per node: ``y1[,y2][,tau], value columns``; header included."""
    g = field.grid
    vals = field.values
    lead = {"scalar": 0, "vector": 1, "matrix": 2}[field.kind]
    comp_shape = vals.shape[:lead]
    comp_names = (
        [field.name]
        if lead == 0
        else [f"{field.name}_{'_'.join(str(i + 1) for i in idx)}" for idx in np.ndindex(comp_shape)]
    )
    flat = vals.reshape(int(np.prod(comp_shape)) if lead else 1, -1)
    if field.domain == "S":
        coords = [g.tau_nodes]
        header = ["tau"]
    else:
        ys = [c.ravel() for c in g.y_mesh()]
        header = [f"y{k + 1}" for k in range(g.n)]
        if field.domain == "Q":
            ys = [np.repeat(c, g.ntau) for c in ys]
            coords = ys + [np.tile(g.tau_nodes, g.ny**g.n)]
            header.append("tau")
        else:
            coords = ys
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + comp_names)
        for i in range(flat.shape[1]):
            w.writerow([repr(float(c[i])) for c in coords] + [repr(float(v)) for v in flat[:, i]])


def cellfield_from_csv(path: str | Path, grid: CellGrid, kind: str = "scalar") -> CellField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    ncoord = sum(1 for h in header if h.startswith("y") or h == "tau")
    domain: Domain = "Q" if "tau" in header and ncoord > 1 else ("S" if header[0] == "tau" else "Y")
    data = body[:, ncoord:].T
    expect = {"Q": grid.q_shape, "Y": grid.y_shape, "S": (grid.ntau,)}[domain]
    if kind == "scalar":
        values = data[0].reshape(expect)
    elif kind == "vector":
        values = data.reshape((data.shape[0],) + expect)
    else:
        n = int(round(np.sqrt(data.shape[0])))
        values = data.reshape((n, n) + expect)
    return CellField(values, grid, domain, kind, header[ncoord].split("_")[0])
