"""Configuration-driven experiment driver.

A scenario file (YAML or JSON) holds::

    name: demo
    dimension: 1
    alpha: 1
    beta: 2
    regime: null            # optional override: FastEqual | FastStrict | Slow
    coefficients: {a1: 1, a2: 1, b1: "2 + sin(2*pi*y1)", b2: ..., b: 0, B: 1}
    domain: {bounds: [[0, 1]], T: 0.25}
    data: {f: 0, ubar: "sin(pi*x1)"}
    cell: {ny: 256, ntau: 32, tol: 1.0e-10}
    macro: {nx: 257, nt: 1024, theta: 0.5}
    micro: {eps: [0.25, 0.125, 0.0625], kx: 16, kt: 16, transformed: false}
    diagnostics: {...}
    stages: [validate, cell, effective, macro, micro, unfold, reports]

Every section except ``coefficients`` has defaults; unknown keys are
rejected with a :class:`ScenarioError` naming the key.  Runs are
sequential and seed-free, so identical configurations give identical CSV
output.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from scipy.interpolate import RegularGridInterpolator

from .cell_solver import classify_regime, solve_correctors
from .coefficients import (
    CoefficientError,
    CoefficientSet,
    Factor,
    coefficients_from_config,
    factor_expr,
    parse_expr,
    sample_on_cell,
    validate_bounds,
)
from .effective import (
    FORMAL_B_EQ_I,
    SPECIAL_CASES,
    EffectiveModel,
    closed_form_special,
    effective_model,
)
from .grid import CellGrid, MacroGrid, build_cell_grid, cellfield_to_csv
from .macro_solver import MacroSolution, constant_model, recover_u, solve_macro
from .micro_solver import (
    MIN_EPS_1D,
    MIN_EPS_2D,
    MicroSolution,
    b1_field,
    energy_functional,
    micro_grid,
    solve_micro,
    time_shift_modulus,
)
from .unfolding import oscillation, unfold

log = logging.getLogger(__name__)

STAGES = ("validate", "cell", "effective", "macro", "micro", "unfold", "reports")
FORMAL_LABEL = "formal (no rigorous theorem)"

_DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "dimension": 1,
    "alpha": 1,
    "beta": 2,
    "regime": None,
    "C": None,
    "derivatives": {"mode": "analytic", "steps": None},
    "domain": {"bounds": None, "T": 0.25},
    "data": {"f": 0, "ubar": 0},
    "cell": {"ny": 256, "ntau": 32, "tol": 1e-10},
    "macro": {"nx": 257, "nt": 1024, "theta": 0.5},
    "micro": {"eps": [0.25, 0.125, 0.0625], "kx": 16, "kt": 16, "transformed": False},
    "diagnostics": {
        "energy": True,
        "time_shift": {"delta": 0.1, "shifts": [2, 4, 8]},
        "unfold": {"eps": None},
        "special_case": None,
        "perturbation": None,
        "formal": None,
    },
    "stages": list(STAGES),
}
_SECTIONS = {k for k, v in _DEFAULTS.items() if isinstance(v, dict)}


class ScenarioError(ValueError):
    """Malformed scenario; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class StageError(RuntimeError):
    """A pipeline stage failed; ``bundle`` lists the files already written."""

    def __init__(self, stage: str, cause: BaseException, bundle: dict[str, str]):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.bundle = bundle


# --- scenarios ---------------------------------------------------------------------


def _merge(defaults: Mapping[str, Any], given: Mapping[str, Any], path: str) -> dict[str, Any]:
    out = copy.deepcopy(dict(defaults))
    for k, v in given.items():
        key = f"{path}.{k}" if path else k
        if k not in defaults:
            raise ScenarioError(key, "unknown key")
        if isinstance(defaults[k], dict) and k not in ("derivatives",) and isinstance(v, Mapping):
            out[k] = _merge(defaults[k], v, key)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    """A validated, fully resolved scenario."""

    config: dict[str, Any]
    coeffs: CoefficientSet
    domain: MacroGrid
    cell_grid: CellGrid

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def eps(self) -> list[float]:
        return [float(e) for e in self.config["micro"]["eps"]]

    @property
    def f(self):
        return self.config["data"]["f"]

    @property
    def ubar(self):
        return self.config["data"]["ubar"]

    @property
    def micro_opts(self) -> dict[str, Any]:
        m = self.config["micro"]
        return {"kx": int(m["kx"]), "kt": int(m["kt"]), "transformed": bool(m["transformed"])}

    def with_overrides(self, **sections) -> Scenario:
        """A new scenario with ``sections`` merged into the configuration."""
        cfg = copy.deepcopy(self.config)
        for k, v in sections.items():
            if isinstance(cfg.get(k), dict) and isinstance(v, Mapping):
                cfg[k].update(v)
            else:
                cfg[k] = v
        return load_scenario(cfg)


def _number(value, key: str) -> float:
    try:
        return float(parse_expr(value)) if isinstance(value, str) else float(value)
    except (TypeError, ValueError, CoefficientError):
        raise ScenarioError(key, f"expected a number, got {value!r}") from None


def load_scenario(source: str | Path | Mapping[str, Any]) -> Scenario:
    """Parse and validate a scenario from a YAML/JSON file or a mapping."""
    if isinstance(source, Mapping):
        raw = dict(source)
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError("<file>", f"cannot read {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ScenarioError("<file>", f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ScenarioError("<root>", "configuration must be a mapping")
    if "coefficients" not in raw:
        raise ScenarioError("coefficients", "missing required section")
    coeff_cfg = raw["coefficients"]
    if not isinstance(coeff_cfg, Mapping):
        raise ScenarioError("coefficients", "must be a mapping")
    cfg = _merge({**_DEFAULTS, "coefficients": {}}, {k: v for k, v in raw.items() if k != "coefficients"}, "")
    cfg["coefficients"] = copy.deepcopy(dict(coeff_cfg))
    for k in cfg["coefficients"]:
        if k not in ("a1", "a2", "b1", "b2", "b", "B"):
            raise ScenarioError(f"coefficients.{k}", "unknown key")
    for sec in _SECTIONS:
        if cfg[sec] is not None and not isinstance(cfg[sec], dict):
            raise ScenarioError(sec, "must be a mapping")

    n = cfg["dimension"]
    if n not in (1, 2):
        raise ScenarioError("dimension", f"must be 1 or 2, got {n!r}")
    for key in ("alpha", "beta"):
        if _number(cfg[key], key) <= 0:
            raise ScenarioError(key, "must be positive")
    dom = cfg["domain"]
    bounds = dom["bounds"] or [[0.0, 1.0]] * n
    if len(bounds) != n or any(len(b) != 2 or float(b[1]) <= float(b[0]) for b in bounds):
        raise ScenarioError("domain.bounds", f"need {n} increasing [lo, hi] pairs")
    dom["bounds"] = [[float(lo), float(hi)] for lo, hi in bounds]
    T = _number(dom["T"], "domain.T")
    if T <= 0:
        raise ScenarioError("domain.T", "must be positive")
    dom["T"] = T
    mac = cfg["macro"]
    nx = mac["nx"]
    try:
        macro = MacroGrid(tuple(map(tuple, dom["bounds"])), nx if np.isscalar(nx) else tuple(nx), int(mac["nt"]), T)
    except (TypeError, ValueError) as exc:
        raise ScenarioError("macro", str(exc)) from None
    if not 0.5 <= float(mac["theta"]) <= 1.0:
        raise ScenarioError("macro.theta", "must lie in [1/2, 1]")
    cell = cfg["cell"]
    try:
        cgrid = build_cell_grid(n, int(cell["ny"]), int(cell["ntau"]))
    except (TypeError, ValueError) as exc:
        raise ScenarioError("cell", str(exc)) from None
    eps = cfg["micro"]["eps"]
    eps = [eps] if np.isscalar(eps) else list(eps)
    try:
        eps = [_number(e, "micro.eps") for e in eps]
    except ScenarioError:
        raise
    if not eps or any(not 0 < e <= 1 for e in eps):
        raise ScenarioError("micro.eps", "values must lie in (0, 1]")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ScenarioError("micro.eps", "list must be strictly decreasing")
    floor = MIN_EPS_1D if n == 1 else MIN_EPS_2D
    if min(eps) < floor * (1 - 1e-12):
        raise ScenarioError("micro.eps", f"values below the supported floor {floor:.4g} for n={n}")
    cfg["micro"]["eps"] = eps
    stages = cfg["stages"]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ScenarioError("stages", f"unknown stage(s) {bad}; expected a subset of {list(STAGES)}")
    cfg["stages"] = [s for s in STAGES if s in stages]
    special = cfg["diagnostics"]["special_case"]
    if special is not None and special not in SPECIAL_CASES:
        raise ScenarioError("diagnostics.special_case", f"expected one of {list(SPECIAL_CASES)}")
    if cfg["regime"] is not None and cfg["regime"] not in ("FastEqual", "FastStrict", "Slow"):
        raise ScenarioError("regime", "expected FastEqual, FastStrict or Slow")
    try:
        coeffs = coefficients_from_config(cfg, domain=macro)
    except CoefficientError as exc:
        msg = str(exc)
        role = msg.replace(":", " ").split(" ", 1)[0]
        key = f"coefficients.{role}" if role in ("a1", "a2", "b1", "b2", "b", "B") else "coefficients"
        raise ScenarioError(key, msg) from None
    try:
        micro_grid(macro, min(eps), coeffs.alpha, coeffs.beta, int(cfg["micro"]["kx"]), int(cfg["micro"]["kt"]))
    except Exception as exc:
        raise ScenarioError("micro", f"resolution guard not satisfiable for eps={min(eps)}: {exc}") from None
    return Scenario(cfg, coeffs, macro, cgrid)


# --- homogenized target --------------------------------------------------------------


@dataclass
class Homogenized:
    model: EffectiveModel
    solution: MacroSolution
    seconds: float


def solve_homogenized(sc: Scenario) -> Homogenized:
    """Assemble the effective model and solve the macro problem (``u`` recovered)."""
    t0 = time.perf_counter()
    model = effective_model(sc.coeffs, sc.domain, sc.cell_grid, tol=float(sc.config["cell"]["tol"]))
    sol = solve_macro(model, sc.f, sc.ubar, theta=float(sc.config["macro"]["theta"]), coeffs=sc.coeffs)
    sol.u = recover_u(sol, model)
    return Homogenized(model, sol, time.perf_counter() - t0)


def _interpolator(grid: MacroGrid, values: np.ndarray) -> RegularGridInterpolator:
    return RegularGridInterpolator((grid.times,) + grid.axes, values)


def _points(grid: MacroGrid) -> np.ndarray:
    mesh = np.meshgrid(grid.times, *grid.axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def on_micro_grid(values: np.ndarray, coarse: MacroGrid, fine: MacroGrid) -> np.ndarray:
    """Multilinear interpolation of a ``(nt+1, *shape)`` field onto ``fine``."""
    return _interpolator(coarse, values)(_points(fine)).reshape((fine.nt + 1,) + fine.shape)


def l2_space_time(w: np.ndarray, grid: MacroGrid) -> float:
    """Discrete ``L2(Omega x (0, T))`` norm (node sums times cell volume and dt)."""
    return float(np.sqrt(np.sum(np.asarray(w) ** 2) * grid.cell_volume * grid.dt))


def interpolation_error(values: np.ndarray, coarse: MacroGrid, fine: MacroGrid) -> float:
    """Estimate of the interpolation error of ``values`` on ``fine``.

    Compares interpolation from ``coarse`` with interpolation from its
    every-other-node subgrid and applies the second-order Richardson factor.
    Returns nan when the coarse grid cannot be halved.
    """
    if coarse.nt % 2 or any((k - 1) % 2 for k in coarse.shape):
        return float("nan")
    half = MacroGrid(coarse.bounds, tuple((k - 1) // 2 + 1 for k in coarse.shape), coarse.nt // 2, coarse.T)
    sub = values[(slice(None, None, 2),) * (coarse.n + 1)]
    a = on_micro_grid(values, coarse, fine)
    b = on_micro_grid(sub, half, fine)
    return l2_space_time(a - b, fine) / 3.0


# --- convergence study -------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    """Per-eps errors against the homogenized solution on the micro grids.

    ``errors`` is ``||u_eps - u||``; ``v_errors`` is ``||v_eps - v||`` for
    the transformed unknown ``v = b1 u``, and ``two_scale_errors`` compares
    ``u_eps`` with ``u / (r b1^eps)``.  Ratios are consecutive quotients.
    """

    scenario: str
    eps: list[float]
    errors: list[float]
    v_errors: list[float]
    two_scale_errors: list[float]
    interpolation_errors: list[float]
    energy: list[tuple[float, float]]
    time_shift: list[dict[str, float]]
    wall_clock: list[float]
    homogenized_seconds: float
    label: str = "rigorous"
    config: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def _ratios(vals: Sequence[float]) -> list[float]:
        return [b / a if a > 0 else float("nan") for a, b in zip(vals, vals[1:])]

    @property
    def ratios(self) -> list[float]:
        return self._ratios(self.errors)

    @property
    def v_ratios(self) -> list[float]:
        return self._ratios(self.v_errors)

    @property
    def two_scale_ratios(self) -> list[float]:
        return self._ratios(self.two_scale_errors)

    def energy_ratio(self) -> tuple[float, float]:
        """max/min across eps of the two energy terms."""
        e = np.asarray(self.energy)
        return float(e[:, 0].max() / e[:, 0].min()), float(e[:, 1].max() / e[:, 1].min())

    def time_shift_ratios(self) -> list[float]:
        """Per eps, max/min over the shifts of ``modulus / sqrt(h)``."""
        out = []
        for ts in self.time_shift:
            vals = [m / math.sqrt(float(h)) for h, m in ts.items() if m > 0]
            out.append(max(vals) / min(vals) if vals else float("nan"))
        return out

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.update(ratios=self.ratios, v_ratios=self.v_ratios, two_scale_ratios=self.two_scale_ratios)
        return d

    def to_csv(self, path: str | Path) -> None:
        """Columns: eps, error_u, ratio_u, error_v, ratio_v, error_two_scale,
        interp_error, energy_sup, energy_grad.  Wall-clock times stay in the
        JSON report so that the CSV is reproducible bit for bit."""
        rat, vr = [""] + self.ratios, [""] + self.v_ratios
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["eps", "error_u", "ratio_u", "error_v", "ratio_v", "error_two_scale",
                         "interp_error", "energy_sup", "energy_grad"])
            for i, e in enumerate(self.eps):
                wr.writerow([repr(e), repr(self.errors[i]), _fmt(rat[i]), repr(self.v_errors[i]), _fmt(vr[i]),
                             repr(self.two_scale_errors[i]), repr(self.interpolation_errors[i]),
                             repr(self.energy[i][0]), repr(self.energy[i][1])])

    def time_shift_csv(self, path: str | Path) -> None:
        """Columns: eps, h, modulus, modulus_over_sqrt_h."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["eps", "h", "modulus", "modulus_over_sqrt_h"])
            for e, ts in zip(self.eps, self.time_shift):
                for h, m in ts.items():
                    wr.writerow([repr(e), repr(float(h)), repr(m), repr(m / math.sqrt(float(h)))])


def _fmt(v) -> str:
    return "" if v == "" else repr(float(v))


def _time_shifts(v: np.ndarray, grid: MacroGrid, diag: Mapping[str, Any]) -> dict[str, float]:
    spec = diag.get("time_shift")
    if not spec:
        return {}
    delta = float(spec.get("delta", 0.1))
    out = {}
    for k in spec.get("shifts", [2, 4, 8]):
        h = int(k) * grid.dt
        out[repr(h)] = time_shift_modulus(v, grid, h, delta)
    return out


def run_convergence_study(sc: Scenario, eps: Sequence[float] | None = None,
                          homogenized: Homogenized | None = None,
                          micro_out: dict[float, MicroSolution] | None = None) -> ConvergenceReport:
    """Micro solves over the eps list, compared with the homogenized ``u``.

    The homogenized solution is computed once and interpolated onto every
    micro grid.  Failures are re-raised naming eps.  Solutions are stored in
    ``micro_out`` when a dict is supplied.
    """
    eps = [float(e) for e in (eps if eps is not None else sc.eps)]
    hom = homogenized or solve_homogenized(sc)
    sol, model = hom.solution, hom.model
    diag = sc.config["diagnostics"]
    rep = ConvergenceReport(sc.name, eps, [], [], [], [], [], [], [], hom.seconds, config=sc.config)
    if sc.coeffs.alpha > 1:
        rep.label = FORMAL_LABEL
    for e in eps:
        t0 = time.perf_counter()
        try:
            mic = solve_micro(sc.coeffs, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
        except Exception as exc:
            raise type(exc)(f"eps={e}: {exc}") from exc
        g = mic.grid
        uh = on_micro_grid(sol.u, sol.grid, g)
        vh = on_micro_grid(sol.v, sol.grid, g)
        rh = on_micro_grid(model.r, sol.grid, g)
        v = mic.v
        rep.errors.append(l2_space_time(mic.u - uh, g))
        rep.v_errors.append(l2_space_time(v - vh, g))
        b1 = b1_field(sc.coeffs, e, g)
        rep.two_scale_errors.append(l2_space_time(mic.u - uh / (rh * b1), g))
        rep.interpolation_errors.append(interpolation_error(sol.u, sol.grid, g))
        rep.energy.append(energy_functional(v, g) if diag.get("energy", True) else (float("nan"),) * 2)
        rep.time_shift.append(_time_shifts(v, g, diag))
        rep.wall_clock.append(time.perf_counter() - t0)
        if micro_out is not None:
            micro_out[e] = mic
    return rep


# --- perturbation study ------------------------------------------------------------------


@dataclass
class PerturbationReport:
    """Effective-model and micro-level effect of the perturbation ``b``."""

    scenario: str
    b: str
    coefficient_diffs: dict[str, float]
    macro_diff: float
    eps: list[float]
    micro_diffs: list[float]
    slope: float
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def max_coefficient_diff(self) -> float:
        return max(self.coefficient_diffs.values())

    def as_dict(self) -> dict[str, Any]:
        return asdict(self) | {"max_coefficient_diff": self.max_coefficient_diff}

    def to_csv(self, path: str | Path) -> None:
        """Columns: quantity, eps, value (coefficient rows leave eps blank)."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["quantity", "eps", "value"])
            for k, v in self.coefficient_diffs.items():
                wr.writerow([f"max_abs_diff_{k}", "", repr(v)])
            wr.writerow(["max_abs_diff_macro_v", "", repr(self.macro_diff)])
            for e, d in zip(self.eps, self.micro_diffs):
                wr.writerow(["l2_diff_micro_u", repr(e), repr(d)])
            wr.writerow(["fitted_slope", "", repr(self.slope)])


def fitted_slope(eps: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(eps)``."""
    vals = np.asarray(values, dtype=float)
    if len(vals) < 2 or np.any(vals <= 0):
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(eps, dtype=float)), np.log(vals), 1)[0])


def run_perturbation_study(sc: Scenario, b=None, eps: Sequence[float] | None = None,
                           micro: bool = True) -> PerturbationReport:
    """Compare the problem with perturbation ``b`` against ``b = 0``.

    ``b`` defaults to ``diagnostics.perturbation.b`` and then to the
    scenario's own ``b``.  Requires ``B`` independent of ``y``.
    """
    pert = sc.config["diagnostics"].get("perturbation") or {}
    if b is None:
        b = pert.get("b", sc.config["coefficients"].get("b", 0))
    if eps is None:
        eps = pert.get("eps", [0.25, 0.125, 0.0625])
    if sc.coeffs.B_depends_on_y():
        raise CoefficientError("perturbation study requires B independent of y")
    with_b = sc.coeffs.with_b(Factor(factor_expr(b, "b"), "b"))
    without = sc.coeffs.with_b(0)
    tol = float(sc.config["cell"]["tol"])
    m1 = effective_model(with_b, sc.domain, sc.cell_grid, tol=tol)
    m0 = effective_model(without, sc.domain, sc.cell_grid, tol=tol)
    diffs = {
        name: float(np.max(np.abs(getattr(m1, attr) - getattr(m0, attr))))
        for name, attr in (("q_eff", "q_eff"), ("B_hom", "B_hom"), ("P_eff", "P_eff"), ("z_eff", "z_eff"))
    }
    theta = float(sc.config["macro"]["theta"])
    s1 = solve_macro(m1, sc.f, sc.ubar, theta=theta, coeffs=with_b)
    s0 = solve_macro(m0, sc.f, sc.ubar, theta=theta, coeffs=without)
    eps = [float(e) for e in eps] if micro else []
    md = []
    for e in eps:
        u1 = solve_micro(with_b, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
        u0 = solve_micro(without, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
        md.append(l2_space_time(u1.u - u0.u, u1.grid))
    return PerturbationReport(sc.name, str(b), diffs, float(np.max(np.abs(s1.v - s0.v))), eps, md,
                              fitted_slope(eps, md), sc.config)


# --- formal alpha = 2 experiments ------------------------------------------------------------


@dataclass
class FormalReport:
    """Micro runs at ``alpha = 2`` against the formal constant-diffusion target."""

    scenario: str
    betas: list[float]
    eps: list[float]
    diffusion: float
    errors: dict[str, list[float]]
    two_scale_errors: dict[str, list[float]]
    label: str = FORMAL_LABEL
    config: dict[str, Any] = field(default_factory=dict)

    def improves(self, beta: float, which: str = "errors") -> bool:
        """Whether the error at the last eps is below that at the first."""
        e = getattr(self, which)[repr(float(beta))]
        return e[-1] < e[0]

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_csv(self, path: str | Path) -> None:
        """Columns: beta, eps, error_u, error_two_scale, label."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["beta", "eps", "error_u", "error_two_scale", "label"])
            for beta in self.betas:
                k = repr(float(beta))
                for e, a, b in zip(self.eps, self.errors[k], self.two_scale_errors[k]):
                    wr.writerow([k, repr(e), repr(a), repr(b), self.label])


def run_formal_study(sc: Scenario, betas: Sequence[float] | None = None,
                     eps: Sequence[float] | None = None) -> FormalReport:
    """``alpha = 2`` micro runs for each ``beta`` compared with the target
    ``du/dt - D lap u = f``, ``D = (int b2)(int 1/b1)^-1``, ``u(0) = ubar``.

    Needs ``B = I``, ``a1 = a2 = 1`` and coefficients independent of (x, t).
    """
    formal = sc.config["diagnostics"].get("formal") or {}
    betas = [float(b) for b in (betas if betas is not None else formal.get("betas", [1, 2, 4]))]
    eps = [float(e) for e in (eps if eps is not None else formal.get("eps", [0.5, 0.25]))]
    if not sc.coeffs.macro_independent():
        raise CoefficientError("formal study needs coefficients independent of (x, t)")
    cf = closed_form_special(sc.coeffs, sc.cell_grid, FORMAL_B_EQ_I)
    D = float(cf["diffusion"][0, 0])
    r = float(np.mean(1.0 / sample_on_cell(sc.coeffs, (0.5,) * sc.coeffs.n, 0.0, sc.cell_grid).b1))
    target = solve_macro(constant_model(sc.domain, q=1.0, B=D), sc.f, sc.ubar,
                         theta=float(sc.config["macro"]["theta"]))
    errs: dict[str, list[float]] = {}
    two: dict[str, list[float]] = {}
    for beta in betas:
        cs = replace(sc.coeffs, alpha=2.0, beta=beta, regime=None, B=[list(r_) for r_ in sc.coeffs.B])
        k = repr(beta)
        errs[k], two[k] = [], []
        for e in eps:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # alpha > 1 is the point of this study
                mic = solve_micro(cs, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
            uh = on_micro_grid(target.v, target.grid, mic.grid)
            errs[k].append(l2_space_time(mic.u - uh, mic.grid))
            two[k].append(l2_space_time(mic.u - uh / (r * b1_field(cs, e, mic.grid)), mic.grid))
    return FormalReport(sc.name, betas, eps, D, errs, two, config=sc.config)


# --- full pipeline ---------------------------------------------------------------------------


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=1, default=_json_default, sort_keys=True))


def _eps_tag(e: float) -> str:
    return f"{e:.6g}".replace(".", "p")


def special_case_check(sc: Scenario, model: EffectiveModel) -> dict[str, Any]:
    """Closed-form special case against the assembled model (u-form coefficients)."""
    case = sc.config["diagnostics"]["special_case"]
    cf = closed_form_special(sc.coeffs, sc.cell_grid, case)
    uf = model.u_form()
    out = {"case": case, "closed_form_capacity": cf["capacity"], "closed_form_diffusion": cf["diffusion"]}
    if case != FORMAL_B_EQ_I:
        D = np.asarray(cf["diffusion"])
        out["model_diffusion"] = uf["diffusion"].reshape(-1, *D.shape)[0]
        out["model_capacity"] = float(uf["capacity"].ravel()[0])
        out["relative_diffusion_error"] = float(np.max(np.abs(uf["diffusion"] - D)) / np.max(np.abs(D)))
    return out


def run_scenario(sc: Scenario, out_dir: str | Path, stages: Sequence[str] | None = None) -> dict[str, Any]:
    """Run the requested stages in pipeline order and write the bundle to ``out_dir``.

    Returns a dict with the written files (``files``), per-stage summaries
    and timings.  A failing stage raises :class:`StageError` carrying the
    partial bundle.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wanted = list(stages) if stages is not None else sc.config["stages"]
    bad = [s for s in wanted if s not in STAGES]
    if bad:
        raise ScenarioError("stages", f"unknown stage(s) {bad}")
    order = [s for s in STAGES if s in wanted]
    files: dict[str, str] = {}
    bundle: dict[str, Any] = {"scenario": sc.name, "stages": order, "files": files, "summaries": {}, "timings": {}}
    state: dict[str, Any] = {}

    def put(name: str) -> Path:
        p = out / name
        files[name] = str(p)
        return p

    _write_json(put("resolved_config.json"), sc.config)
    for stage in order:
        t0 = time.perf_counter()
        try:
            summary = _STAGE_FNS[stage](sc, state, put)
        except Exception as exc:
            bundle["failed_stage"] = stage
            _write_json(put("bundle.json"), bundle)
            raise StageError(stage, exc, dict(files)) from exc
        bundle["summaries"][stage] = summary
        bundle["timings"][stage] = round(time.perf_counter() - t0, 3)
    _write_json(put("bundle.json"), bundle)
    return bundle


def _stage_validate(sc, state, put):
    rep = validate_bounds(sc.coeffs, sc.cell_grid)
    d = rep.as_dict() | {"config": sc.config}
    _write_json(put("validation.json"), d)
    if not rep.passed:
        raise CoefficientError("; ".join(rep.violations))
    return {"passed": True, "C": rep.C}


def _stage_cell(sc, state, put):
    regime = classify_regime(sc.coeffs.alpha, sc.coeffs.beta, override=sc.coeffs.regime)
    x = tuple(0.5 * (lo + hi) for lo, hi in sc.domain.bounds)
    sampled = sample_on_cell(sc.coeffs, x, 0.0, sc.cell_grid)
    corr = solve_correctors(sampled, regime, sc.cell_grid, float(sc.config["cell"]["tol"]))
    for fld in corr.fields():
        cellfield_to_csv(fld, put(f"cell_{fld.name}.csv"))
    summary = {"regime": regime.tag, "omega": regime.omega, "x": x, "t": 0.0,
               "residual": corr.residual, "mean_defect": corr.mean_defect, "config": sc.config}
    _write_json(put("cell_summary.json"), summary)
    return {k: v for k, v in summary.items() if k != "config"}


def _stage_effective(sc, state, put):
    model = effective_model(sc.coeffs, sc.domain, sc.cell_grid, tol=float(sc.config["cell"]["tol"]))
    state["model"] = model
    model.to_csv(put("effective.csv"))
    summary = model.summary()
    if sc.config["diagnostics"]["special_case"]:
        summary["special_case"] = special_case_check(sc, model)
    _write_json(put("effective_summary.json"), summary | {"config": sc.config})
    return summary


def _stage_macro(sc, state, put):
    t0 = time.perf_counter()
    model = state.get("model")
    if model is None:
        model = effective_model(sc.coeffs, sc.domain, sc.cell_grid, tol=float(sc.config["cell"]["tol"]))
        state["model"] = model
    sol = solve_macro(model, sc.f, sc.ubar, theta=float(sc.config["macro"]["theta"]), coeffs=sc.coeffs)
    sol.u = recover_u(sol, model)
    state["hom"] = Homogenized(model, sol, time.perf_counter() - t0)
    sol.to_csv(put("macro.csv"))
    return {"peclet": sol.peclet, "max_residual": sol.max_residual, "nt": sol.grid.nt, "nx": list(sol.grid.shape)}


def _stage_micro(sc, state, put):
    sols: dict[float, MicroSolution] = {}
    state["micro"] = sols
    hom = state.get("hom")
    if hom is None:
        for e in sc.eps:
            sols[e] = solve_micro(sc.coeffs, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
    else:
        rep = run_convergence_study(sc, homogenized=hom, micro_out=sols)
        state["convergence"] = rep
        rep.to_csv(put("convergence.csv"))
        rep.time_shift_csv(put("time_shift.csv"))
        _write_json(put("convergence.json"), rep.as_dict())
    for e, mic in sols.items():
        mic.to_csv(put(f"micro_eps_{_eps_tag(e)}.csv"))
        mic.write_energy_log(put(f"micro_eps_{_eps_tag(e)}_energy.json"))
    out = {"eps": sc.eps}
    if "convergence" in state:
        rep = state["convergence"]
        out |= {"errors": rep.errors, "ratios": rep.ratios, "v_errors": rep.v_errors, "v_ratios": rep.v_ratios}
    return out


def _stage_unfold(sc, state, put):
    e = sc.config["diagnostics"]["unfold"].get("eps") or max(sc.eps)
    e = float(e)
    mic = state.get("micro", {}).get(e)
    if mic is None:
        mic = solve_micro(sc.coeffs, e, sc.f, sc.ubar, sc.domain, **sc.micro_opts)
    v = mic.v
    U = unfold(v, mic.grid, e, sc.coeffs.alpha, sc.coeffs.beta, strict=False)
    Z = oscillation(v, mic.grid, e, sc.coeffs.alpha, sc.coeffs.beta, strict=False)
    U.to_csv(put(f"unfolded_v_eps_{_eps_tag(e)}.csv"))
    summary = {
        "eps": e, "exact": U.exact, "cells": [int(c.size) for c in U.cells], "slabs": int(U.slabs.size),
        "excluded_measure": U.excluded_measure, "unfolded_l2_squared": U.l2_squared(),
        "oscillation_mean_max_abs": float(np.max(np.abs(Z.q_mean()))),
    }
    _write_json(put("unfold_summary.json"), summary | {"config": sc.config})
    return summary


def _stage_reports(sc, state, put):
    diag = sc.config["diagnostics"]
    report: dict[str, Any] = {"scenario": sc.name, "config": sc.config}
    if "model" in state:
        report["effective"] = state["model"].summary()
    if "convergence" in state:
        report["convergence"] = state["convergence"].as_dict()
    if diag.get("perturbation"):
        pr = run_perturbation_study(sc)
        pr.to_csv(put("perturbation.csv"))
        report["perturbation"] = pr.as_dict()
    if diag.get("formal"):
        fr = run_formal_study(sc)
        fr.to_csv(put("formal.csv"))
        report["formal"] = fr.as_dict()
    _write_json(put("report.json"), report)
    return {k: True for k in report if k not in ("scenario", "config")}


_STAGE_FNS = {
    "validate": _stage_validate,
    "cell": _stage_cell,
    "effective": _stage_effective,
    "macro": _stage_macro,
    "micro": _stage_micro,
    "unfold": _stage_unfold,
    "reports": _stage_reports,
}
