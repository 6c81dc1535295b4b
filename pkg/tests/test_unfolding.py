import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homogfp.grid import CellField, CellGrid, MacroGrid
from homogfp.unfolding import (
    UnfoldingError,
    cell_average,
    micro_time_average,
    oscillation,
    unfold,
)

EPS, AL, BE = 0.25, 1, 2


def grid(eps=EPS, kx=16, kt=16, T=0.25, n=1, lo=0.0, hi=1.0):
    nx = round((hi - lo) / eps**AL * kx) + 1
    return MacroGrid(((lo, hi),) * n, nx, round(T / eps**BE * kt), T)


def field(g, fn):
    X = g.mesh()
    t = g.times.reshape((-1,) + (1,) * g.n)
    return np.broadcast_to(fn(t, *[x[None] for x in X]), (g.nt + 1,) + g.shape).astype(float)


def test_constant_field():
    g = grid()
    U = unfold(np.full((g.nt + 1,) + g.shape, 5.0), g, EPS, AL, BE)
    assert U.exact and np.all(U.values == 5.0)
    assert U.values.shape == (4, 4, 16, 16)
    M = cell_average(np.full((g.nt + 1,) + g.shape, 5.0), g, EPS, AL, BE)
    # left-closed cells: the right boundary node and the final time level lie outside every cell
    assert np.all(M[:-1, :-1] == 5.0) and np.all(M[-1] == 0) and np.all(M[:, -1] == 0)


def test_periodic_field_unfolds_to_profile():
    g = grid()
    w = field(g, lambda t, x: np.cos(2 * np.pi * x / EPS) + np.sin(2 * np.pi * t / EPS**BE))
    U = unfold(w, g, EPS, AL, BE)
    y = np.arange(16) / 16
    tau = np.arange(16) / 16
    prof = np.cos(2 * np.pi * y)[:, None] + np.sin(2 * np.pi * tau)[None, :]
    assert np.allclose(U.values, prof[None, None], atol=1e-12)


def test_multiplicativity():
    g = grid()
    rng = np.random.default_rng(0)
    w1, w2 = rng.normal(size=(2, g.nt + 1) + g.shape)
    assert np.array_equal(unfold(w1 * w2, g, EPS, AL, BE).values,
                          unfold(w1, g, EPS, AL, BE).values * unfold(w2, g, EPS, AL, BE).values)


def test_zero_mean_oscillation_averages_to_zero():
    g = grid()
    w = field(g, lambda t, x: np.sin(2 * np.pi * x / EPS))
    assert np.max(np.abs(cell_average(w, g, EPS, AL, BE))) < 1e-15


def test_average_identity_and_oscillation_mean():
    g = grid(n=2, T=0.0625)
    w = np.random.default_rng(1).normal(size=(g.nt + 1,) + g.shape)
    U = unfold(w, g, EPS, AL, BE)
    M = cell_average(w, g, EPS, AL, BE)
    assert np.array_equal(U.scatter(U.q_mean()), M)
    Z = oscillation(w, g, EPS, AL, BE)
    assert np.max(np.abs(Z.q_mean())) < 1e-14
    assert np.allclose(Z.values + (U.values - Z.values), U.values)


def test_constant_has_zero_oscillation():
    g = grid()
    Z = oscillation(np.full((g.nt + 1,) + g.shape, 2.0), g, EPS, AL, BE)
    assert not np.any(Z.values)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.sampled_from([1, 2, 3]))
def test_isometry_on_interior(seed, k):
    g = grid(kx=16 * k, kt=16)
    w = np.random.default_rng(seed).normal(size=(g.nt + 1,) + g.shape)
    U = unfold(w, g, EPS, AL, BE)
    inside = w[:-1, :-1]
    assert U.l2_squared() == pytest.approx(np.sum(inside**2) * g.cell_volume * g.dt, rel=1e-12)
    assert U.excluded_measure == pytest.approx(0.0, abs=1e-12)


def test_partial_cells_are_excluded():
    g = grid(lo=0.0, hi=1.125, T=0.25)
    U = unfold(np.ones((g.nt + 1,) + g.shape), g, EPS, AL, BE)
    assert len(U.cells[0]) == 4
    assert U.excluded_measure == pytest.approx(0.125 * 0.25)


def test_noncommensurate_strict_raises_and_nonstrict_flags():
    g = MacroGrid(((0, 1),), 65, 48, 0.25)  # 12 time nodes per slab: still commensurate
    assert unfold(np.zeros((49, 65)), g, EPS, AL, BE).exact
    g = MacroGrid(((0, 1),), 60, 64, 0.25)
    w = np.zeros((65, 60))
    with pytest.raises(UnfoldingError):
        unfold(w, g, EPS, AL, BE)
    U = unfold(w, g, EPS, AL, BE, strict=False)
    assert not U.exact


def test_field_shape_and_empty_lattice_errors():
    g = grid()
    with pytest.raises(UnfoldingError):
        unfold(np.zeros((3, 3)), g, EPS, AL, BE)
    g = MacroGrid(((0, 0.2),), 17, 16, 0.25)
    with pytest.raises(UnfoldingError):
        unfold(np.zeros((17, 17)), g, EPS, AL, BE, strict=False)


def test_strong_convergence_trend():
    phi = lambda t, x, y, tau: np.sin(np.pi * x) * (1 + 0.5 * np.cos(2 * np.pi * y)) * np.exp(-t) * (1 + 0.3 * np.sin(2 * np.pi * tau))  # noqa: E731
    errs = []
    for eps in (0.25, 0.125, 0.0625):
        g = grid(eps=eps, T=0.25)
        w = field(g, lambda t, x: phi(t, x, x / eps, t / eps**BE))
        U = unfold(w, g, eps, AL, BE)
        x0 = (U.cells[0] * eps)[:, None, None, None]
        t0 = (U.slabs * eps**BE)[None, :, None, None]
        y = (np.arange(16) / 16)[None, None, :, None]
        tau = (np.arange(16) / 16)[None, None, None, :]
        # limit evaluated at the cell origin: the difference is the macro variation across one cell
        errs.append(np.sqrt(U.with_values(U.values - phi(t0, x0, y, tau)).l2_squared()))
    assert errs[0] > errs[1] > errs[2]


def test_micro_time_average():
    cg = CellGrid(1, 8, 16)
    (y,), tau = cg.q_mesh()
    b2 = np.broadcast_to(1 + 0.5 * np.sin(2 * np.pi * tau), cg.q_shape)
    assert np.allclose(micro_time_average(b2, cg).values, 1.0, atol=1e-15)
    f = CellField(np.broadcast_to(np.cos(2 * np.pi * y), cg.q_shape).copy(), cg)
    assert np.allclose(micro_time_average(f).values, np.cos(2 * np.pi * cg.y_mesh()[0]))
    B = 2 + np.cos(2 * np.pi * y)
    sep = micro_time_average(b2 * B, cg).values
    assert np.allclose(sep, np.mean(b2, axis=-1) * np.mean(B, axis=-1), atol=1e-14)
    with pytest.raises(ValueError):
        micro_time_average(CellField(np.ones(cg.y_shape), cg, "Y"))
    with pytest.raises(ValueError):
        micro_time_average(b2)


def test_unfolded_csv(tmp_path):
    g = grid()
    U = unfold(np.ones((g.nt + 1,) + g.shape), g, EPS, AL, BE)
    U.to_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "xi1,slab,y1,tau,value" and len(lines) == 1 + U.values.size


def test_oscillation_of_demo_solution():
    from conftest import demo_coeffs
    from homogfp.micro_solver import solve_micro

    cs = demo_coeffs()
    dom = MacroGrid(((0, 1),), 9, 4, 0.0625)
    norms = []
    for eps in (0.25, 0.125, 0.0625):
        mic = solve_micro(cs, eps, ubar="sin(pi*x1)", domain=dom)
        v = mic.v
        Z = oscillation(v, mic.grid, eps, 1, 2)
        zn = np.sqrt(Z.l2_squared())
        vn = np.sqrt(unfold(v, mic.grid, eps, 1, 2).l2_squared())
        assert zn < vn
        norms.append(zn)
    assert norms[0] > norms[1] > norms[2]
