from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from homogfp.coefficients import CoefficientSet  # noqa: E402
from homogfp.grid import MacroGrid  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

DEMO_B1 = "2 + sin(2*pi*y1)"
DEMO_B2 = "1 + 0.5*sin(2*pi*tau)"


def demo_coeffs(beta=2, alpha=1, b=0, B=1, **kw) -> CoefficientSet:
    """Pure Fokker-Planck demo family (a1 = a2 = 1, B = 1)."""
    return CoefficientSet(n=1, a1=kw.pop("a1", 1), a2=kw.pop("a2", 1), b1=kw.pop("b1", DEMO_B1),
                          b2=kw.pop("b2", DEMO_B2), b=b, B=B, alpha=alpha, beta=beta, **kw)


@pytest.fixture
def demo():
    return demo_coeffs()


@pytest.fixture
def unit_domain():
    return MacroGrid(((0.0, 1.0),), 129, 256, 0.25)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
