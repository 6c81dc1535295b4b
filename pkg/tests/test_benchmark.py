import sys

from conftest import ROOT


def test_benchmark_runs(capsys):
    sys.path.insert(0, str(ROOT / "benchmarks"))
    try:
        import bench_kernels
    finally:
        sys.path.pop(0)
    bench_kernels.main(["--repeat", "1"])
    out = capsys.readouterr().out
    assert "implicit_fp_march_1d" in out and "solve_micro" in out
