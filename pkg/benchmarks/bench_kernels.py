"""Compiled vs pure-Python kernels.

Times the three kernels of :mod:`homogfp.kernels` on both backends and a
full 1D micro solve with each backend (the latter in subprocesses, since
the backend is fixed at import).  Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from homogfp import _kernels_py

try:
    from homogfp import _kernels
except ImportError:  # extension not built
    _kernels = None

MICRO_SNIPPET = """
import time
from homogfp.coefficients import CoefficientSet
from homogfp.grid import MacroGrid
from homogfp.micro_solver import solve_micro
cs = CoefficientSet(n=1, a1=1, a2=1, b1="2 + sin(2*pi*y1)", b2="1 + 0.5*sin(2*pi*tau)", b=0, B=1)
dom = MacroGrid(((0, 1),), 9, 4, 0.25)
t0 = time.perf_counter()
solve_micro(cs, 0.0625, ubar="sin(pi*x1)", domain=dom)
print(time.perf_counter() - t0)
"""


def _march_args(nsteps: int, nx: int):
    rng = np.random.default_rng(0)
    a = 1 + rng.random((nsteps, nx))
    c = 1 + rng.random((nsteps, nx))
    bf = 1 + rng.random((nsteps, nx - 1))
    f = rng.normal(size=(nsteps, nx))
    u0 = np.zeros(nx)
    return a, c, bf, f, u0, 1e-4, 1.0 / (nx - 1)


def _tridiag_args(n: int):
    rng = np.random.default_rng(1)
    return rng.random(n), 3 + rng.random(n), rng.random(n), rng.normal(size=n)


def _best(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def micro_solve_seconds(pure_python: bool) -> float:
    env = dict(os.environ, HOMOGFP_PURE_PYTHON="1" if pure_python else "0")
    out = subprocess.run([sys.executable, "-c", MICRO_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    cases = [
        ("tridiag_solve n=4096", "tridiag_solve", _tridiag_args(4096)),
        ("cyclic_tridiag_solve n=4096", "cyclic_tridiag_solve", _tridiag_args(4096)),
        ("implicit_fp_march_1d 256x1025", "implicit_fp_march_1d", _march_args(256, 1025)),
    ]
    print(f"{'kernel':32s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speed-up':>9s}")
    for label, name, fargs in cases:
        tp = _best(getattr(_kernels_py, name), fargs, args.repeat) * 1e3
        if _kernels is None:
            print(f"{label:32s} {tp:12.3f} {'n/a':>12s} {'n/a':>9s}")
            continue
        tc = _best(getattr(_kernels, name), fargs, args.repeat) * 1e3
        print(f"{label:32s} {tp:12.3f} {tc:12.3f} {tp / tc:9.1f}")
    tp = micro_solve_seconds(True)
    tc = micro_solve_seconds(False)
    print(f"{'solve_micro eps=1/16 (1D)':32s} {tp * 1e3:12.1f} {tc * 1e3:12.1f} {tp / tc:9.1f}")


if __name__ == "__main__":
    main()
