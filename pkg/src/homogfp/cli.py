"""Command-line entry point: ``homogfp <subcommand> --config FILE --out DIR``.

Exit codes: 0 on success, 2 for an invalid configuration, and
``10 + k`` when pipeline stage ``k`` fails (validate=10, cell=11,
effective=12, macro=13, micro=14, unfold=15, reports=16); a failing
perturbation or formal study exits with 16.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    STAGES,
    ScenarioError,
    StageError,
    load_scenario,
    run_formal_study,
    run_perturbation_study,
    run_scenario,
)

CONFIG_ERROR = 2
STAGE_BASE = 10

_PIPELINES = {
    "solve-cell": ["validate", "cell"],
    "effective": ["validate", "effective"],
    "solve-macro": ["validate", "effective", "macro"],
    "solve-micro": ["validate", "micro"],
    "unfold": ["validate", "unfold"],
    "converge": ["validate", "effective", "macro", "micro"],
    "run": None,
}
_HELP = {
    "solve-cell": "solve the cell problems at the domain centre",
    "effective": "assemble the effective model on the macro grid",
    "solve-macro": "solve the homogenized problem",
    "solve-micro": "solve the eps-problem for each eps",
    "unfold": "unfold the micro solution at one eps",
    "converge": "eps-convergence study against the homogenized solution",
    "perturb": "compare the problem with and without the perturbation b",
    "formal": "alpha = 2 runs against the formal constant-diffusion target",
    "run": "run the stages listed in the configuration",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homogfp", description="Homogenization experiments for mixed Fick/Fokker-Planck diffusion.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in _HELP.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, type=Path, help="scenario file (YAML or JSON)")
        s.add_argument("--out", required=True, type=Path, help="output directory")
        s.add_argument("--eps", type=float, nargs="+", help="override the eps list")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _write(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = load_scenario(args.config)
        if args.eps:
            eps = sorted(set(args.eps), reverse=True)
            sc = sc.with_overrides(micro={"eps": eps}, diagnostics={"unfold": {"eps": eps[0]}})
    except ScenarioError as exc:
        print(f"homogfp: invalid configuration: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    try:
        if cmd in _PIPELINES:
            bundle = run_scenario(sc, out, _PIPELINES[cmd])
            print(f"{cmd}: wrote {len(bundle['files'])} files to {out}")
            return 0
        run_scenario(sc, out, ["validate"])
        if cmd == "perturb":
            rep = run_perturbation_study(sc, eps=args.eps)
            rep.to_csv(out / "perturbation.csv")
            _write(out / "perturbation.json", rep.as_dict())
            print(f"perturb: max coefficient difference {rep.max_coefficient_diff:.3e}, micro slope {rep.slope:.3f}")
        else:
            rep = run_formal_study(sc, eps=args.eps)
            rep.to_csv(out / "formal.csv")
            _write(out / "formal.json", rep.as_dict())
            print(f"formal: wrote {out / 'formal.csv'} [{rep.label}]")
        return 0
    except StageError as exc:
        print(f"homogfp: {exc}", file=sys.stderr)
        return STAGE_BASE + STAGES.index(exc.stage)
    except ScenarioError as exc:
        print(f"homogfp: invalid configuration: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except Exception as exc:  # study failures after validation
        print(f"homogfp: {cmd} failed: {exc}", file=sys.stderr)
        return STAGE_BASE + STAGES.index("reports")


if __name__ == "__main__":
    sys.exit(main())
