"""Coefficient family of the weakly non-product problem.

The Fokker coefficient is ``c = b1(x,t,y) b2(x,t,tau) + eps * b(x,t,y,tau)``
and the capacity ``a = a1(x,t,y) a2(x,t,tau)``.  Every factor is a
:class:`Factor`: either a symbolic expression in ``x1, x2, t, y1, y2, tau``
(analytic macroscopic derivatives are available) or a plain callable
``f(x, t, y, tau)`` (derivatives by centred differences).

Factors are evaluated with coordinate tuples: ``x`` and ``y`` are sequences
of ``n`` arrays, ``t`` and ``tau`` arrays, all mutually broadcastable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import sympy

from .grid import CellGrid, MacroGrid, orientation_signs

log = logging.getLogger(__name__)

X1, X2, T, Y1, Y2, TAU = sympy.symbols("x1 x2 t y1 y2 tau", real=True)
ALL_SYMBOLS = (X1, X2, T, Y1, Y2, TAU)
_NAMES = {
    "x": X1, "x1": X1, "x2": X2, "t": T,
    "y": Y1, "y1": Y1, "y2": Y2, "tau": TAU,
    "pi": sympy.pi, "e": sympy.E,
}
MACRO_SYMBOLS = {X1: "x", X2: "x", T: "t"}

# which variables each factor may depend on
ROLES = {
    "a1": {X1, X2, T, Y1, Y2},
    "b1": {X1, X2, T, Y1, Y2},
    "a2": {X1, X2, T, TAU},
    "b2": {X1, X2, T, TAU},
    "b": set(ALL_SYMBOLS),
    "B": set(ALL_SYMBOLS),
}


class CoefficientError(ValueError):
    """Malformed or inadmissible coefficient data."""


def parse_expr(text: str | float) -> sympy.Expr:
    try:
        return sympy.sympify(text, locals=_NAMES)
    except (sympy.SympifyError, TypeError, SyntaxError) as exc:
        raise CoefficientError(f"cannot parse expression {text!r}: {exc}") from None


class Factor:
    """One scalar coefficient factor.

    ``calls`` counts evaluations; it is used to check that code paths which
    must not read a factor (e.g. ``b`` when alpha < 1) never do.
    """

    def __init__(self, source: sympy.Expr | str | float | Callable, name: str = "factor"):
        self.name = name
        self.calls = 0
        self._derived: dict = {}
        if callable(source) and not isinstance(source, sympy.Basic):
            self.expr = None
            self._func = source
        else:
            self.expr = source if isinstance(source, sympy.Basic) else parse_expr(source)
            bad = self.expr.free_symbols - set(ALL_SYMBOLS)
            if bad:
                raise CoefficientError(f"{name}: unknown symbols {sorted(map(str, bad))}")
            self._func = sympy.lambdify(ALL_SYMBOLS, self.expr, modules="numpy")

    def __repr__(self):
        return f"Factor({self.name}={self.expr if self.expr is not None else self._func!r})"

    @property
    def symbolic(self) -> bool:
        return self.expr is not None

    def depends_on(self, *symbols) -> bool:
        """Conservative: callables are assumed to depend on everything."""
        if self.expr is None:
            return True
        return bool(self.expr.free_symbols & set(symbols))

    def is_zero(self) -> bool:
        return self.expr is not None and self.expr == 0

    def __call__(self, x: Sequence, t, y: Sequence | None = None, tau=None) -> np.ndarray:
        self.calls += 1
        xs = list(x) + [0.0] * (2 - len(x))
        ys = list(y) + [0.0] * (2 - len(y)) if y is not None else [0.0, 0.0]
        tau = 0.0 if tau is None else tau
        if self.expr is None:
            out = self._func(tuple(x), t, tuple(y) if y is not None else None, tau)
        else:
            out = self._func(xs[0], xs[1], t, ys[0], ys[1], tau)
        shape = np.broadcast_shapes(*(np.shape(a) for a in (*x, t, *(y or ()), tau)))
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def diff(self, symbol) -> Factor | None:
        if self.expr is None:
            return None
        key = ("diff", symbol)
        if key not in self._derived:
            self._derived[key] = Factor(sympy.diff(self.expr, symbol), f"d{self.name}/d{symbol}")
        return self._derived[key]

    def map(self, fn: Callable[[sympy.Expr], sympy.Expr], name: str) -> Factor | None:
        """Apply ``fn`` to the expression; cached by ``name``."""
        if self.expr is None:
            return None
        key = ("map", name)
        if key not in self._derived:
            self._derived[key] = Factor(fn(self.expr), name)
        return self._derived[key]


def as_factor(value, name: str) -> Factor:
    return value if isinstance(value, Factor) else Factor(value, name)


@dataclass
class CoefficientSet:
    """The family ``(a1, a2, b1, b2, b, B)`` with exponents ``alpha, beta``.

    ``B`` is an ``n x n`` nested list of factors; a single factor means
    ``B = factor * I``.  ``C`` defaults to the bound computed from sampled
    extremes (see :func:`validate_bounds`).
    """

    n: int
    a1: Factor
    a2: Factor
    b1: Factor
    b2: Factor
    b: Factor
    B: list[list[Factor]]
    alpha: float = 1.0
    beta: float = 2.0
    C: float | None = None
    derivative_mode: str = "analytic"
    fd_steps: tuple[float, float] | None = None
    domain: MacroGrid | None = None
    regime: str | None = None
    B_scalar: bool = False

    def __post_init__(self):
        if self.n not in (1, 2):
            raise CoefficientError("dimension must be 1 or 2")
        for role in ("a1", "a2", "b1", "b2", "b"):
            f = as_factor(getattr(self, role), role)
            setattr(self, role, f)
            if f.symbolic:
                extra = f.expr.free_symbols - ROLES[role]
                if extra:
                    raise CoefficientError(
                        f"{role} may not depend on {sorted(map(str, extra))}"
                    )
        B = self.B
        if isinstance(B, (Factor, str, int, float, sympy.Basic)) or callable(B):
            fac = as_factor(B, "B")
            zero = Factor(0, "B_offdiag")
            self.B = [[fac if i == j else zero for j in range(self.n)] for i in range(self.n)]
            self.B_scalar = True
        else:
            rows = [[as_factor(v, f"B{i + 1}{j + 1}") for j, v in enumerate(r)] for i, r in enumerate(B)]
            if len(rows) != self.n or any(len(r) != self.n for r in rows):
                raise CoefficientError(f"B must be {self.n}x{self.n}")
            for i in range(self.n):
                for j in range(i):
                    a, c = rows[i][j], rows[j][i]
                    if a.symbolic and c.symbolic and sympy.simplify(a.expr - c.expr) != 0:
                        raise CoefficientError("B must be symmetric")
            self.B = rows
        if self.derivative_mode not in ("analytic", "fd"):
            raise CoefficientError("derivative_mode must be 'analytic' or 'fd'")
        if self.alpha <= 0 or self.beta <= 0:
            raise CoefficientError("alpha and beta must be positive")

    # --- evaluation ---------------------------------------------------------

    def factors(self) -> dict[str, Factor]:
        return {"a1": self.a1, "a2": self.a2, "b1": self.b1, "b2": self.b2, "b": self.b}

    def B_matrix(self, x, t, y, tau) -> np.ndarray:
        """Array of shape ``(n, n, *broadcast)``."""
        rows = [[f(x, t, y, tau) for f in row] for row in self.B]
        shape = np.broadcast_shapes(*(v.shape for r in rows for v in r))
        return np.stack([np.stack([np.broadcast_to(v, shape) for v in r]) for r in rows])

    def all_factors(self) -> list[Factor]:
        return list(self.factors().values()) + [f for r in self.B for f in r]

    def macro_independent(self, which: str = "xt") -> bool:
        syms = []
        if "x" in which:
            syms += [X1, X2]
        if "t" in which:
            syms.append(T)
        return not any(f.depends_on(*syms) for f in self.all_factors())

    def B_depends_on_y(self) -> bool:
        return any(f.depends_on(Y1, Y2) for r in self.B for f in r)

    def with_b(self, b) -> CoefficientSet:
        return replace(self, b=as_factor(b, "b"), B=[[f for f in r] for r in self.B])

    @property
    def omega(self) -> int:
        return 1 if abs(self.alpha - 1.0) < 1e-12 else 0


@dataclass
class ProblemData:
    """Source ``f(x, t)`` and initial datum ``ubar(x)`` (zero on the boundary)."""

    coeffs: CoefficientSet
    f: Factor = field(default_factory=lambda: Factor(0, "f"))
    ubar: Factor = field(default_factory=lambda: Factor(0, "ubar"))

    def __post_init__(self):
        self.f = as_factor(self.f, "f")
        self.ubar = as_factor(self.ubar, "ubar")

    def source(self, x, t) -> np.ndarray:
        return self.f(x, t)

    def initial(self, grid: MacroGrid) -> np.ndarray:
        u0 = self.ubar(grid.mesh(), 0.0)
        bmax = np.max(np.abs(u0[grid.boundary_mask()]))
        if bmax > 1e-10:
            raise CoefficientError(f"initial datum must vanish on the boundary (max {bmax:.3g})")
        u0[grid.boundary_mask()] = 0.0
        if not np.all(np.isfinite(u0)):
            raise CoefficientError("initial datum is not finite")
        return u0


# --- validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    extremes: dict[str, tuple[float, float]]
    rayleigh: tuple[float, float]
    C: float
    C_declared: float | None
    violations: list[str]

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "C": self.C,
            "C_declared": self.C_declared,
            "extremes": {k: list(v) for k, v in self.extremes.items()},
            "B_rayleigh": list(self.rayleigh),
            "violations": self.violations,
        }


def _macro_probes(coeffs: CoefficientSet, probes) -> list[tuple[tuple[float, ...], float]]:
    if probes is not None:
        return [(tuple(np.atleast_1d(x).astype(float)), float(t)) for x, t in probes]
    if coeffs.domain is None:
        return [((0.5,) * coeffs.n, 0.0)]
    g = coeffs.domain
    pts = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = tuple(lo + frac * (hi - lo) for lo, hi in g.bounds)
        for tf in (0.0, 0.5, 1.0):
            pts.append((x, tf * g.T))
    return pts


def validate_bounds(coeffs: CoefficientSet, grid: CellGrid, probes=None) -> ValidationReport:
    """Sample every factor on ``grid`` at a few macro points and check the bounds.

    Scalar factors ``a1, a2, b1, b2`` must lie in ``[1/C, C]``; the
    perturbation ``b`` only needs ``|b| <= C``; the Rayleigh quotient of
    ``B`` must lie in ``[1/C, C]``.  When ``coeffs.C`` is None, ``C`` is the
    smallest value compatible with the samples.
    """
    ext: dict[str, list[float]] = {k: [np.inf, -np.inf] for k in ("a1", "a2", "b1", "b2", "b")}
    ray = [np.inf, -np.inf]
    asym = 0.0
    ys, tau = grid.q_mesh()
    for x, t in _macro_probes(coeffs, probes):
        xs = tuple(np.float64(v) for v in x)
        vals = {
            "a1": coeffs.a1(xs, t, grid.y_mesh()),
            "b1": coeffs.b1(xs, t, grid.y_mesh()),
            "a2": coeffs.a2(xs, t, None, grid.tau_nodes),
            "b2": coeffs.b2(xs, t, None, grid.tau_nodes),
            "b": coeffs.b(xs, t, ys, tau),
        }
        for k, v in vals.items():
            ext[k][0] = min(ext[k][0], float(v.min()))
            ext[k][1] = max(ext[k][1], float(v.max()))
        Bm = coeffs.B_matrix(xs, t, ys, tau)
        Bm = np.moveaxis(Bm.reshape(coeffs.n, coeffs.n, -1), -1, 0)
        asym = max(asym, float(np.max(np.abs(Bm - np.swapaxes(Bm, 1, 2)))))
        eig = np.linalg.eigvalsh(0.5 * (Bm + np.swapaxes(Bm, 1, 2)))
        ray[0] = min(ray[0], float(eig.min()))
        ray[1] = max(ray[1], float(eig.max()))
    candidates = [1.0]
    violations = []
    for k in ("a1", "a2", "b1", "b2"):
        lo, hi = ext[k]
        if lo <= 0:
            violations.append(f"{k} is not positive (min {lo:.6g})")
        else:
            candidates += [1.0 / lo, hi]
    candidates.append(max(abs(ext["b"][0]), abs(ext["b"][1])))
    if ray[0] <= 0:
        violations.append(f"B is not positive definite (min eigenvalue {ray[0]:.6g})")
    else:
        candidates += [1.0 / ray[0], ray[1]]
    if asym > 1e-12:
        violations.append(f"B is not symmetric (max asymmetry {asym:.3g})")
    C_sampled = max(candidates)
    C = coeffs.C if coeffs.C is not None else C_sampled
    tol = 1e-12 * C
    for k in ("a1", "a2", "b1", "b2"):
        lo, hi = ext[k]
        if lo > 0 and (lo < 1.0 / C - tol or hi > C + tol):
            violations.append(f"{k} range [{lo:.6g}, {hi:.6g}] violates C={C:.6g}")
    bmax = max(abs(ext["b"][0]), abs(ext["b"][1]))
    if bmax > C + tol:
        violations.append(f"|b| max {bmax:.6g} exceeds C={C:.6g}")
    if ray[0] > 0 and (ray[0] < 1.0 / C - tol or ray[1] > C + tol):
        violations.append(f"B Rayleigh range [{ray[0]:.6g}, {ray[1]:.6g}] violates C={C:.6g}")
    return ValidationReport(
        {k: (v[0], v[1]) for k, v in ext.items()}, (ray[0], ray[1]), C, coeffs.C, violations
    )


# --- sampling -----------------------------------------------------------------


class SampledCoefficients:
    """Tables of the factors at one macro point ``(x, t)`` on a cell grid.

    ``a1, b1`` live on Y, ``a2, b2`` on S, ``B`` on Q with two leading
    axes.  ``B_orient[s]`` is ``B`` evaluated at the centre of the grid cell
    spanned by orientation ``s`` from each node (``y + s h/2``); these are
    the values entering the flux-form operators.  The perturbation table
    ``b`` and the derivative tables are computed on first access so that
    paths which never need them never evaluate them.
    """

    def __init__(self, coeffs: CoefficientSet, x: Sequence[float], t: float, grid: CellGrid):
        self.coeffs = coeffs
        self.x = tuple(float(v) for v in x)
        self.t = float(t)
        self.grid = grid
        xs = tuple(np.float64(v) for v in self.x)
        ym = grid.y_mesh()
        self.a1 = coeffs.a1(xs, self.t, ym)
        self.b1 = coeffs.b1(xs, self.t, ym)
        self.a2 = coeffs.a2(xs, self.t, None, grid.tau_nodes)
        self.b2 = coeffs.b2(xs, self.t, None, grid.tau_nodes)
        ys, tau = grid.q_mesh()
        self.B = np.broadcast_to(
            coeffs.B_matrix(xs, self.t, ys, tau), (coeffs.n, coeffs.n) + grid.q_shape
        ).copy()

    @cached_property
    def B_orient(self) -> list[np.ndarray]:
        g = self.grid
        ys, tau = g.q_mesh()
        xs = tuple(np.float64(v) for v in self.x)
        shape = (self.coeffs.n, self.coeffs.n) + g.q_shape
        if not self.coeffs.B_depends_on_y():
            return [self.B] * 2**g.n
        out = []
        for signs in orientation_signs(g.n):
            yc = tuple(y + 0.5 * sg * g.hy for y, sg in zip(ys, signs))
            out.append(np.broadcast_to(self.coeffs.B_matrix(xs, self.t, yc, tau), shape).copy())
        return out

    @cached_property
    def b(self) -> np.ndarray:
        ys, tau = self.grid.q_mesh()
        xs = tuple(np.float64(v) for v in self.x)
        return np.broadcast_to(self.coeffs.b(xs, self.t, ys, tau), self.grid.q_shape).copy()

    @cached_property
    def derivatives(self) -> MacroDerivatives:
        return macro_derivatives(self.coeffs, self.x, self.t, self.grid)


def sample_on_cell(coeffs: CoefficientSet, x: Sequence[float], t: float, grid: CellGrid) -> SampledCoefficients:
    x = tuple(np.atleast_1d(np.asarray(x, dtype=float)))
    if len(x) != coeffs.n:
        raise CoefficientError(f"macro point has {len(x)} coordinates, expected {coeffs.n}")
    if coeffs.domain is not None and not coeffs.domain.contains(x, t):
        raise CoefficientError(f"macro point {(x, t)} lies outside the domain")
    return SampledCoefficients(coeffs, x, t, grid)


# --- macroscopic derivatives --------------------------------------------------


@dataclass
class MacroDerivatives:
    """Macroscopic derivatives at one point, tabulated on the cell grid.

    ``grad_b2`` and ``grad_inv_a2`` have shape ``(n, ntau)``; ``dt_inv_b1``
    has the Y shape.  ``one_sided`` lists quantities for which a centred
    difference would have left the domain.
    """

    grad_b2: np.ndarray
    grad_inv_a2: np.ndarray
    dt_inv_b1: np.ndarray
    mode: str
    one_sided: list[str] = field(default_factory=list)


def _fd_steps(coeffs: CoefficientSet) -> tuple[list[float], float]:
    if coeffs.fd_steps is not None:
        hx, ht = coeffs.fd_steps
        return [hx] * coeffs.n, ht
    if coeffs.domain is not None:
        return [1e-4 * (hi - lo) for lo, hi in coeffs.domain.bounds], 1e-4 * coeffs.domain.T
    return [1e-4] * coeffs.n, 1e-4


def _fd(func, x, t, axis, step, flags, label, domain):
    """Centred difference of ``func(x, t)`` in ``x[axis]`` (axis >= 0) or ``t`` (axis = -1)."""
    def shifted(d):
        if axis < 0:
            return func(x, t + d)
        xs = list(x)
        xs[axis] = xs[axis] + d
        return func(tuple(xs), t)

    if domain is not None:
        if axis < 0:
            lo, hi, v = 0.0, domain.T, t
        else:
            (lo, hi), v = domain.bounds[axis], x[axis]
        if v - step < lo:
            flags.append(label)
            return (-3 * shifted(0.0) + 4 * shifted(step) - shifted(2 * step)) / (2 * step)
        if v + step > hi:
            flags.append(label)
            return (3 * shifted(0.0) - 4 * shifted(-step) + shifted(-2 * step)) / (2 * step)
    return (shifted(step) - shifted(-step)) / (2 * step)


def macro_derivatives(coeffs: CoefficientSet, x: Sequence[float], t: float, grid: CellGrid) -> MacroDerivatives:
    """``grad_x b2``, ``grad_x (1/a2)`` on S-nodes and ``d/dt (1/b1)`` on Y-nodes.

    Analytic when every factor involved is symbolic and the mode is
    ``analytic``; centred differences otherwise (one-sided near the boundary,
    flagged in the result).
    """
    xs = tuple(np.float64(v) for v in x)
    tau = grid.tau_nodes
    ym = grid.y_mesh()
    xsyms = (X1, X2)[: coeffs.n]
    symbolic = coeffs.derivative_mode == "analytic" and all(
        f.symbolic for f in (coeffs.a2, coeffs.b2, coeffs.b1)
    )
    flags: list[str] = []
    if symbolic:
        gb2 = np.stack([coeffs.b2.diff(s)(xs, t, None, tau) for s in xsyms])
        inv_a2 = coeffs.a2.map(lambda e: 1 / e, "1/a2")
        ga2 = np.stack([inv_a2.diff(s)(xs, t, None, tau) for s in xsyms])
        inv_b1 = coeffs.b1.map(lambda e: 1 / e, "1/b1")
        dtb1 = inv_b1.diff(T)(xs, t, ym)
        mode = "analytic"
    else:
        hx, ht = _fd_steps(coeffs)
        dom = coeffs.domain
        b2f = lambda xx, tt: coeffs.b2(xx, tt, None, tau)  # noqa: E731
        ia2f = lambda xx, tt: 1.0 / coeffs.a2(xx, tt, None, tau)  # noqa: E731
        ib1f = lambda xx, tt: 1.0 / coeffs.b1(xx, tt, ym)  # noqa: E731
        gb2 = np.stack([_fd(b2f, xs, t, k, hx[k], flags, f"grad_b2[{k}]", dom) for k in range(coeffs.n)])
        ga2 = np.stack([_fd(ia2f, xs, t, k, hx[k], flags, f"grad_inv_a2[{k}]", dom) for k in range(coeffs.n)])
        dtb1 = _fd(ib1f, xs, t, -1, ht, flags, "dt_inv_b1", dom)
        mode = "fd"
        if flags:
            log.info("one-sided differences used for %s at x=%s t=%s", flags, x, t)
    return MacroDerivatives(
        np.broadcast_to(gb2, (coeffs.n, grid.ntau)).copy(),
        np.broadcast_to(ga2, (coeffs.n, grid.ntau)).copy(),
        np.broadcast_to(dtb1, grid.y_shape).copy(),
        mode,
        flags,
    )


# --- eps realisation / general form ------------------------------------------


@dataclass
class EpsilonRealization:
    """The oscillating coefficients ``a^eps, c^eps, B^eps`` for one ``eps``.

    Samplers take macroscopic coordinates ``(x, t)`` and evaluate the
    factors at ``(x, t, x/eps^alpha, t/eps^beta)``.
    """

    coeffs: CoefficientSet
    eps: float

    def __post_init__(self):
        if not 0 < self.eps <= 1:
            raise CoefficientError(f"eps must lie in (0, 1], got {self.eps}")

    def _micro(self, x, t):
        ex = self.eps ** self.coeffs.alpha
        et = self.eps ** self.coeffs.beta
        return tuple(xi / ex for xi in x), t / et

    def a1(self, x, t):
        y, _ = self._micro(x, t)
        return self.coeffs.a1(x, t, y)

    def b1(self, x, t):
        y, _ = self._micro(x, t)
        return self.coeffs.b1(x, t, y)

    def a2(self, x, t):
        _, tau = self._micro(x, t)
        return self.coeffs.a2(x, t, None, tau)

    def b2(self, x, t):
        _, tau = self._micro(x, t)
        return self.coeffs.b2(x, t, None, tau)

    def b(self, x, t):
        y, tau = self._micro(x, t)
        return self.coeffs.b(x, t, y, tau)

    def a(self, x, t):
        return self.a1(x, t) * self.a2(x, t)

    def c(self, x, t):
        out = self.b1(x, t) * self.b2(x, t)
        if not self.coeffs.b.is_zero():
            out = out + self.eps * self.b(x, t)
        return out

    def B(self, x, t):
        y, tau = self._micro(x, t)
        return self.coeffs.B_matrix(x, t, y, tau)


def positivity_margin(coeffs: CoefficientSet, eps: float, grid: CellGrid, probes=None) -> float:
    """``min(b1) min(b2) - eps sup|b|`` over the probes; positive means ``c^eps > 0``."""
    rep = validate_bounds(coeffs, grid, probes)
    m1, m2 = rep.extremes["b1"][0], rep.extremes["b2"][0]
    lo = m1 * m2 if m1 > 0 and m2 > 0 else min(m1, m2)
    bsup = max(abs(v) for v in rep.extremes["b"])
    return lo - eps * bsup


def to_general_form(coeffs: CoefficientSet, eps: float, grid: CellGrid | None = None, probes=None) -> EpsilonRealization:
    """Map the weakly non-product data to ``(a^eps, c^eps, B^eps)``.

    ``a = a1 a2`` and ``c = b1 b2 + eps b``.  Raises when ``eps`` is too large
    for ``c^eps`` to stay positive on the sampled range.
    """
    real = EpsilonRealization(coeffs, eps)
    margin = positivity_margin(coeffs, eps, grid or CellGrid(coeffs.n, 32, 32), probes)
    if margin <= 0:
        if coeffs.b.is_zero():
            raise CoefficientError(f"c^eps = b1 b2 is not positive (min {margin:.3g})")
        raise CoefficientError(f"eps={eps} too large: c^eps may vanish (margin {margin:.3g})")
    return real


# --- configuration --------------------------------------------------------------

_DEFAULT_VAR = {"a1": "y1", "b1": "y1", "a2": "tau", "b2": "tau", "b": "y1", "B": "y1"}


def factor_expr(spec: Any, role: str) -> sympy.Expr:
    """Build a symbolic factor from a configuration entry.

    Accepted forms: a number; an expression string; or a mapping with
    ``family`` in ``constant | sin | cos | piecewise | product | expression``
    and the keys ``offset``, ``amplitude``, ``frequency``, ``variable``,
    ``macro`` (a multiplicative macroscopic modulation), ``expr``,
    ``values`` (piecewise) and ``factors`` (product).
    """
    if isinstance(spec, (int, float)):
        return sympy.nsimplify(spec) if float(spec).is_integer() else sympy.Float(spec)
    if isinstance(spec, str):
        return parse_expr(spec)
    if not isinstance(spec, Mapping):
        raise CoefficientError(f"{role}: unsupported specification {spec!r}")
    known = {"family", "offset", "amplitude", "frequency", "variable", "macro", "expr", "values", "factors", "value"}
    unknown = set(spec) - known
    if unknown:
        raise CoefficientError(f"{role}: unknown key(s) {sorted(unknown)}")
    family = spec.get("family", "expression" if "expr" in spec else "constant")
    var = _NAMES.get(spec.get("variable", _DEFAULT_VAR[role]))
    if var is None:
        raise CoefficientError(f"{role}: unknown variable {spec.get('variable')!r}")
    off = parse_expr(spec.get("offset", 0))
    amp = parse_expr(spec.get("amplitude", 1))
    k = int(spec.get("frequency", 1))
    if family == "constant":
        core = parse_expr(spec.get("value", spec.get("offset", 1)))
    elif family in ("sin", "cos"):
        fn = sympy.sin if family == "sin" else sympy.cos
        core = off + amp * fn(2 * sympy.pi * k * var)
    elif family == "piecewise":
        vals = [parse_expr(v) for v in spec.get("values", [])]
        if len(vals) < 2:
            raise CoefficientError(f"{role}: piecewise needs at least two values")
        # continuous periodic piecewise-linear interpolation of the nodal values
        m = len(vals)
        s = sympy.Mod(var, 1) * m
        pieces = []
        for i in range(m):
            v0, v1 = vals[i], vals[(i + 1) % m]
            pieces.append((v0 + (v1 - v0) * (s - i), s < i + 1))
        core = sympy.Piecewise(*pieces, (vals[0], True))
    elif family == "product":
        core = sympy.Integer(1)
        for sub in spec.get("factors", []):
            core = core * factor_expr(sub, role)
    elif family == "expression":
        if "expr" not in spec:
            raise CoefficientError(f"{role}: expression family needs 'expr'")
        core = parse_expr(spec["expr"])
    else:
        raise CoefficientError(f"{role}: unknown family {family!r}")
    if "macro" in spec:
        core = parse_expr(spec["macro"]) * core
    return core


def coefficients_from_config(cfg: Mapping[str, Any], domain: MacroGrid | None = None) -> CoefficientSet:
    """Build a :class:`CoefficientSet` from the ``coefficients`` section plus exponents."""
    try:
        n = int(cfg.get("dimension", 1))
        c = cfg["coefficients"]
    except KeyError as exc:
        raise CoefficientError(f"missing configuration key {exc.args[0]!r}") from None
    parts = {}
    for role in ("a1", "a2", "b1", "b2", "b"):
        parts[role] = Factor(factor_expr(c.get(role, 0 if role == "b" else 1), role), role)
    Bspec = c.get("B", 1)
    if isinstance(Bspec, list):
        B = [[Factor(factor_expr(v, "B"), "B") for v in row] for row in Bspec]
    else:
        B = Factor(factor_expr(Bspec, "B"), "B")
    extra = set(c) - {"a1", "a2", "b1", "b2", "b", "B"}
    if extra:
        raise CoefficientError(f"coefficients: unknown key(s) {sorted(extra)}")
    deriv = cfg.get("derivatives", {}) or {}
    steps = deriv.get("steps")
    return CoefficientSet(
        n=n,
        B=B,
        alpha=float(sympy.Rational(str(cfg.get("alpha", 1)))),
        beta=float(sympy.Rational(str(cfg.get("beta", 2)))),
        C=cfg.get("C"),
        derivative_mode=deriv.get("mode", "analytic"),
        fd_steps=tuple(steps) if steps else None,
        domain=domain,
        regime=cfg.get("regime"),
        **parts,
    )
