import numpy as np
import pytest

from conftest import DEMO_B1, demo_coeffs
from homogfp.coefficients import (
    X1,
    CoefficientError,
    CoefficientSet,
    Factor,
    ProblemData,
    coefficients_from_config,
    macro_derivatives,
    sample_on_cell,
    to_general_form,
    validate_bounds,
)
from homogfp.grid import MacroGrid, build_cell_grid

G = build_cell_grid(1, 64, 16)


def unit(**kw):
    base = dict(n=1, a1=1, a2=1, b1=1, b2=1, b=0, B=1)
    base.update(kw)
    return CoefficientSet(**base)


def test_validate_constant_set_passes():
    rep = validate_bounds(unit(C=2), G)
    assert rep.passed
    for k in ("a1", "a2", "b1", "b2"):
        assert rep.extremes[k] == (1.0, 1.0)
    assert rep.rayleigh == (1.0, 1.0)


def test_validate_flags_bound_violation():
    rep = validate_bounds(unit(b1=DEMO_B1, C=2), G)
    assert not rep.passed and any("b1" in v for v in rep.violations)


def test_validate_passes_with_wide_enough_bound():
    rep = validate_bounds(unit(b1=DEMO_B1, C=3), G)
    assert rep.passed
    assert rep.extremes["b1"] == pytest.approx((1.0, 3.0), abs=1e-12)


def test_validate_default_C_from_samples():
    rep = validate_bounds(unit(b1=DEMO_B1), G)
    assert rep.passed and rep.C == pytest.approx(3.0)


def test_validate_rejects_nonpositive_and_asymmetric():
    assert not validate_bounds(unit(a1="sin(2*pi*y1)"), G).passed
    cs = CoefficientSet(n=2, a1=1, a2=1, b1=1, b2=1, b=0,
                        B=[[1, lambda x, t, y, tau: 0.1 + 0 * y[0]], [0, 1]])
    rep = validate_bounds(cs, build_cell_grid(2, 8, 4))
    assert any("symmetric" in v for v in rep.violations)


def test_symbolic_B_must_be_symmetric():
    with pytest.raises(CoefficientError):
        CoefficientSet(n=2, a1=1, a2=1, b1=1, b2=1, b=0, B=[[1, "0.1"], ["0.2", 1]])


def test_role_variable_restrictions():
    with pytest.raises(CoefficientError):
        unit(a1="1 + 0.1*sin(2*pi*tau)")
    with pytest.raises(CoefficientError):
        unit(b2="2 + sin(2*pi*y1)")


def test_sample_product_set_gives_micro_profiles():
    s = sample_on_cell(demo_coeffs(), (0.3,), 0.1, G)
    assert np.allclose(s.b1, 2 + np.sin(2 * np.pi * G.y_nodes))
    assert np.allclose(s.b2, 1 + 0.5 * np.sin(2 * np.pi * G.tau_nodes))


def test_sample_macro_modulated_factor():
    cs = unit(a1="(1 + x1)*(2 + cos(2*pi*y1))")
    s = sample_on_cell(cs, (1.0,), 0.0, G)
    assert np.allclose(s.a1, 2 * (2 + np.cos(2 * np.pi * G.y_nodes)))


def test_sample_identity_B():
    g = build_cell_grid(2, 8, 4)
    cs = CoefficientSet(n=2, a1=1, a2=1, b1=1, b2=1, b=0, B=1)
    s = sample_on_cell(cs, (0.5, 0.5), 0.0, g)
    assert np.array_equal(s.B, np.broadcast_to(np.eye(2)[:, :, None, None, None], s.B.shape))


def test_sample_outside_domain():
    cs = unit(domain=MacroGrid(((0, 1),), 5, 4, 1.0))
    with pytest.raises(CoefficientError):
        sample_on_cell(cs, (1.5,), 0.0, G)


def test_macro_derivatives_x_independent_zero():
    d = macro_derivatives(demo_coeffs(), (0.4,), 0.2, G)
    assert np.all(d.grad_b2 == 0) and np.all(d.grad_inv_a2 == 0) and np.all(d.dt_inv_b1 == 0)


def test_macro_derivative_of_b2_analytic_and_fd():
    expr = "(1 + x1)*(1 + 0.5*sin(2*pi*tau))"
    exact = 1 + 0.5 * np.sin(2 * np.pi * G.tau_nodes)
    dom = MacroGrid(((0, 1),), 5, 4, 1.0)
    an = macro_derivatives(unit(b2=expr, domain=dom), (0.5,), 0.0, G)
    assert an.mode == "analytic" and np.allclose(an.grad_b2[0], exact, atol=1e-14)
    fd = macro_derivatives(unit(b2=expr, domain=dom, derivative_mode="fd"), (0.5,), 0.0, G)
    assert fd.mode == "fd" and np.max(np.abs(fd.grad_b2[0] - exact)) < 1e-8


def test_fd_derivative_one_sided_at_boundary_is_flagged():
    dom = MacroGrid(((0, 1),), 5, 4, 1.0)
    cs = unit(b2="(1 + x1**2)*(1 + 0.5*sin(2*pi*tau))", domain=dom, derivative_mode="fd")
    d = macro_derivatives(cs, (0.0,), 0.0, G)
    assert "grad_b2[0]" in d.one_sided
    assert np.max(np.abs(d.grad_b2[0])) < 1e-7  # d/dx (1 + x^2) = 0 at x = 0


def test_callable_factor_uses_fd():
    cs = unit(b2=lambda x, t, y, tau: (1 + x[0]) * (1 + 0 * np.asarray(tau)))
    d = macro_derivatives(cs, (0.5,), 0.0, G)
    assert d.mode == "fd" and np.allclose(d.grad_b2, 1.0, atol=1e-8)


def test_general_form_without_perturbation():
    cs = demo_coeffs()
    real = to_general_form(cs, 0.25)
    x, t = (np.linspace(0, 1, 9),), np.full(9, 0.3)
    assert np.array_equal(real.c(x, t), real.b1(x, t) * real.b2(x, t))
    assert np.all(real.a(x, t) == 1)


def test_general_form_constant_perturbation():
    real = to_general_form(unit(b=1), 0.1)
    assert np.allclose(real.c((np.linspace(0, 1, 5),), 0.0), 1.1)


def test_general_form_positivity_violation():
    with pytest.raises(CoefficientError):
        to_general_form(unit(b=2), 0.75)


def test_periodicity_of_samplers():
    cs = demo_coeffs(b="cos(2*pi*y1)*(1 + 0.5*cos(2*pi*tau))")
    y = np.linspace(0, 1, 11)
    tau = np.linspace(0, 1, 7)
    for f in (cs.b1, cs.b):
        assert np.allclose(f((0.2,), 0.0, (y + 1,), tau[:, None] + 1), f((0.2,), 0.0, (y,), tau[:, None]), atol=1e-12)


def test_factor_call_counter():
    f = Factor("1 + x1", "f")
    f((np.array([0.0]),), 0.0)
    f((np.array([1.0]),), 0.0)
    assert f.calls == 2


def test_problem_data_initial_must_vanish():
    g = MacroGrid(((0, 1),), 9, 4, 1.0)
    with pytest.raises(CoefficientError):
        ProblemData(unit(), ubar="1 + x1").initial(g)
    u0 = ProblemData(unit(), ubar="sin(pi*x1)").initial(g)
    assert u0[0] == 0 and u0[-1] == 0


def test_config_families():
    cfg = {
        "dimension": 1, "alpha": "1", "beta": "3/2",
        "coefficients": {
            "a1": {"family": "cos", "offset": 2, "amplitude": 1},
            "b1": {"family": "sin", "offset": 2, "amplitude": 1, "macro": "1 + x1"},
            "b2": {"family": "piecewise", "values": [1, 2], "variable": "tau"},
            "a2": {"family": "product", "factors": [{"family": "constant", "value": 2}, "1"]},
            "B": {"family": "expression", "expr": "2 + cos(2*pi*y1)"},
        },
    }
    cs = coefficients_from_config(cfg)
    assert cs.beta == 1.5 and cs.b1.depends_on(X1)
    s = sample_on_cell(cs, (1.0,), 0.0, build_cell_grid(1, 4, 4))
    assert np.allclose(s.b1, [4.0, 6.0, 4.0, 2.0])
    assert np.allclose(s.a2, 2.0) and np.allclose(s.b2, [1.0, 1.5, 2.0, 1.5])
    assert np.allclose(s.B[0, 0, :, 0], [3.0, 2.0, 1.0, 2.0])


@pytest.mark.parametrize("bad", [
    {"coefficients": {"a1": {"family": "nope"}}},
    {"coefficients": {"a1": {"family": "sin", "wobble": 1}}},
    {"coefficients": {"zz": 1}},
    {"coefficients": {"a1": "1 + q"}},
])
def test_config_errors(bad):
    with pytest.raises(CoefficientError):
        coefficients_from_config(bad)
