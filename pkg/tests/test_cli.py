import subprocess
import sys

import pytest
import yaml

from homogfp.cli import main
from test_harness import small


@pytest.fixture
def cfg_file(tmp_path):
    def write(**over):
        p = tmp_path / "scenario.yaml"
        p.write_text(yaml.safe_dump(small(**over)))
        return p
    return write


@pytest.mark.parametrize("cmd,expect", [
    ("solve-cell", "cell_chi1.csv"),
    ("effective", "effective.csv"),
    ("solve-macro", "macro.csv"),
    ("solve-micro", "micro_eps_0p25.csv"),
    ("unfold", "unfolded_v_eps_0p25.csv"),
    ("converge", "convergence.csv"),
])
def test_pipeline_subcommands(cmd, expect, cfg_file, tmp_path):
    out = tmp_path / "out"
    assert main([cmd, "--config", str(cfg_file()), "--out", str(out)]) == 0
    assert (out / expect).exists() and (out / "resolved_config.json").exists()


def test_perturb_and_formal(cfg_file, tmp_path):
    p = cfg_file(domain={"T": 0.05})
    assert main(["perturb", "--config", str(p), "--out", str(tmp_path / "p"), "--eps", "0.25", "0.125"]) == 0
    assert (tmp_path / "p" / "perturbation.csv").exists()
    assert main(["formal", "--config", str(p), "--out", str(tmp_path / "f"), "--eps", "0.5"]) == 0
    assert (tmp_path / "f" / "formal.csv").exists()


def test_eps_override(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert main(["solve-micro", "--config", str(cfg_file()), "--out", str(out), "--eps", "0.125"]) == 0
    assert (out / "micro_eps_0p125.csv").exists() and not (out / "micro_eps_0p25.csv").exists()


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"coefficients": {"a1": 1, "bogus": 2}}))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "coefficients.bogus" in capsys.readouterr().err


def test_stage_failure_exit_code(cfg_file, tmp_path, capsys):
    p = cfg_file(coefficients={"a1": -1, "a2": 1, "b1": 1, "b2": 1, "b": 0, "B": 1})
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 10
    assert "validate" in capsys.readouterr().err


def test_console_entry_point(cfg_file, tmp_path):
    out = subprocess.run([sys.executable, "-m", "homogfp.cli", "effective", "--config", str(cfg_file()),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "effective: wrote" in out.stdout
