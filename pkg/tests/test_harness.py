import json
import math

import numpy as np
import pytest
import yaml

from conftest import DEMO_B1, DEMO_B2, SCENARIOS
from homogfp.harness import (
    FORMAL_LABEL,
    ScenarioError,
    StageError,
    fitted_slope,
    load_scenario,
    run_convergence_study,
    run_formal_study,
    run_perturbation_study,
    run_scenario,
    solve_homogenized,
)


def small(**over):
    cfg = {
        "name": "small",
        "coefficients": {"a1": 1, "a2": 1, "b1": DEMO_B1, "b2": DEMO_B2, "b": 0, "B": 1},
        "domain": {"bounds": [[0, 1]], "T": 0.0625},
        "data": {"ubar": "sin(pi*x1)"},
        "cell": {"ny": 64, "ntau": 16},
        "macro": {"nx": 65, "nt": 64},
        "micro": {"eps": [0.25, 0.125]},
        "diagnostics": {"time_shift": {"delta": 0.02, "shifts": [1, 2]}},
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    return cfg


@pytest.mark.parametrize("cfg,key", [
    ({"coefficients": {"a1": 1}, "bogus": 1}, "bogus"),
    ({"coefficients": {"a1": 1, "zz": 2}}, "coefficients.zz"),
    ({"coefficients": {"a1": 1}, "micro": {"epsilon": [0.5]}}, "micro.epsilon"),
    ({"coefficients": {"a1": 1}, "micro": {"eps": [0.25, 0.5]}}, "micro.eps"),
    ({"coefficients": {"a1": 1}, "micro": {"eps": [2.0]}}, "micro.eps"),
    ({"coefficients": {"a1": 1}, "domain": {"T": -1}}, "domain.T"),
    ({"coefficients": {"a1": 1}, "dimension": 3}, "dimension"),
    ({"coefficients": {"a1": 1}, "macro": {"theta": 0.2}}, "macro.theta"),
    ({"coefficients": {"a1": 1}, "stages": ["validate", "plot"]}, "stages"),
    ({"coefficients": {"a1": 1}, "regime": "Fast"}, "regime"),
    ({"coefficients": {"a1": 1}, "diagnostics": {"special_case": "foo"}}, "diagnostics.special_case"),
    ({"coefficients": {"a1": "1 + q"}}, "coefficients.a1"),
    ({"coefficients": {"a1": 1}, "micro": {"eps": [1 / 256]}}, "micro.eps"),
    ({"coefficients": {"a1": 1}, "micro": {"eps": [0.25], "kx": 8}}, "micro"),
    ({}, "coefficients"),
])
def test_malformed_config_names_key(cfg, key):
    with pytest.raises(ScenarioError) as info:
        load_scenario(cfg)
    assert info.value.key == key
    assert str(info.value).startswith(key)


def test_load_from_yaml_and_json(tmp_path):
    cfg = small()
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(cfg))
    (tmp_path / "s.json").write_text(json.dumps(cfg))
    a, b = load_scenario(tmp_path / "s.yaml"), load_scenario(tmp_path / "s.json")
    assert a.config == b.config and a.eps == [0.25, 0.125]
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [")
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "bad.yaml")


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    sc = load_scenario(path)
    assert sc.config["name"] == path.stem


def test_single_eps_report_has_no_ratios():
    sc = load_scenario(small(micro={"eps": [0.25]}))
    rep = run_convergence_study(sc)
    assert len(rep.errors) == 1 and rep.ratios == [] and rep.v_ratios == []


def test_constant_coefficient_scenario_errors_at_floor():
    sc = load_scenario(small(coefficients={"a1": 1, "a2": 1, "b1": 1, "b2": 1, "b": 0, "B": 1},
                             macro={"nx": 129, "nt": 256}))
    rep = run_convergence_study(sc)
    # no micro-structure: the error is the discretization floor, which shrinks with the eps-grid
    assert max(rep.errors) < 1e-3


def test_convergence_report_contents(tmp_path):
    sc = load_scenario(small())
    rep = run_convergence_study(sc)
    assert all(e >= 0 for e in rep.errors + rep.v_errors + rep.two_scale_errors)
    assert len(rep.time_shift[0]) == 2 and rep.label == "rigorous"
    rep.to_csv(tmp_path / "c.csv")
    rep.time_shift_csv(tmp_path / "t.csv")
    head = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert head == "eps,error_u,ratio_u,error_v,ratio_v,error_two_scale,interp_error,energy_sup,energy_grad"
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "eps,h,modulus,modulus_over_sqrt_h"
    assert rep.as_dict()["config"]["name"] == "small"


def test_homogenized_matches_closed_form_heat():
    sc = load_scenario(small(macro={"nx": 129, "nt": 256}))
    hom = solve_homogenized(sc)
    D = math.sqrt(3)
    exact = np.exp(-math.pi**2 * D * 0.0625) * np.sin(np.pi * hom.solution.grid.axes[0])
    assert np.max(np.abs(hom.solution.u[-1] - exact)) < 1e-3


def test_perturbation_zero_vs_zero_is_exact():
    sc = load_scenario(small())
    rep = run_perturbation_study(sc, b=0, eps=[0.25, 0.125])
    assert rep.max_coefficient_diff == 0.0 and rep.macro_diff == 0.0
    assert rep.micro_diffs == [0.0, 0.0]


def test_perturbation_requires_y_independent_B():
    from homogfp.coefficients import CoefficientError

    sc = load_scenario(small(coefficients={"a1": 1, "a2": 1, "b1": 1, "b2": 1, "b": 0, "B": "2 + cos(2*pi*y1)"}))
    with pytest.raises(CoefficientError):
        run_perturbation_study(sc, b="cos(2*pi*y1)")


def test_perturbation_effective_independence():
    sc = load_scenario(small())
    rep = run_perturbation_study(sc, b="cos(2*pi*y1)*(1 + 0.5*cos(2*pi*tau))", micro=False)
    assert rep.max_coefficient_diff <= 1e-8 and rep.macro_diff <= 1e-8
    assert rep.micro_diffs == [] and math.isnan(rep.slope)


def test_fitted_slope():
    eps = [0.25, 0.125, 0.0625]
    assert fitted_slope(eps, [3 * e for e in eps]) == pytest.approx(1.0)
    assert fitted_slope(eps, [e**2 for e in eps]) == pytest.approx(2.0)
    assert math.isnan(fitted_slope(eps, [1, 0, 1]))


def test_formal_study_is_labelled(tmp_path):
    sc = load_scenario(small(micro={"eps": [0.5]}, domain={"T": 0.05}))
    rep = run_formal_study(sc, betas=[1], eps=[0.5])
    assert rep.label == FORMAL_LABEL and rep.diffusion == pytest.approx(math.sqrt(3), rel=1e-4)
    rep.to_csv(tmp_path / "f.csv")
    assert FORMAL_LABEL in (tmp_path / "f.csv").read_text()


def test_formal_study_rejects_macro_dependence():
    from homogfp.coefficients import CoefficientError

    sc = load_scenario(small(coefficients={"a1": 1, "a2": 1, "b1": "1 + x1", "b2": 1, "b": 0, "B": 1}))
    with pytest.raises(CoefficientError):
        run_formal_study(sc, betas=[1], eps=[0.5])


def test_validate_only_bundle(tmp_path):
    sc = load_scenario(small(stages=["validate"]))
    bundle = run_scenario(sc, tmp_path)
    assert set(bundle["files"]) == {"resolved_config.json", "validation.json", "bundle.json"}
    assert json.loads((tmp_path / "validation.json").read_text())["config"]["name"] == "small"


def test_full_bundle_and_determinism(tmp_path):
    sc = load_scenario(small(diagnostics={"unfold": {"eps": 0.25}, "special_case": "pure-FP",
                                          "time_shift": {"delta": 0.02, "shifts": [1, 2]}}))
    b1 = run_scenario(sc, tmp_path / "a")
    run_scenario(sc, tmp_path / "b")
    names = set(b1["files"])
    for f in ("cell_chi1.csv", "effective.csv", "macro.csv", "convergence.csv", "time_shift.csv",
              "micro_eps_0p25.csv", "unfolded_v_eps_0p25.csv", "report.json"):
        assert f in names
    for f in names:
        if f.endswith(".csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    summary = json.loads((tmp_path / "a" / "effective_summary.json").read_text())
    assert summary["special_case"]["relative_diffusion_error"] < 1e-4
    for f in ("report.json", "effective_summary.json", "cell_summary.json", "unfold_summary.json"):
        assert "config" in json.loads((tmp_path / "a" / f).read_text())


def test_stage_failure_carries_partial_bundle(tmp_path):
    sc = load_scenario(small(coefficients={"a1": "-1", "a2": 1, "b1": 1, "b2": 1, "b": 0, "B": 1}))
    with pytest.raises(StageError) as info:
        run_scenario(sc, tmp_path)
    assert info.value.stage == "validate"
    assert "validation.json" in info.value.bundle
    assert json.loads((tmp_path / "bundle.json").read_text())["failed_stage"] == "validate"


def test_with_overrides_revalidates():
    sc = load_scenario(small())
    assert sc.with_overrides(micro={"eps": [0.25]}).eps == [0.25]
    with pytest.raises(ScenarioError):
        sc.with_overrides(micro={"eps": [0.25, 0.5]})
