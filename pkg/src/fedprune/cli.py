"""Command line entry point: ``fedprune run | sweep | verify``.

Exit codes: 0 success, 1 verification failure, 2 spec error, 3 numerical error.
Client and grid-cell parallelism follow the ``FEDPRUNE_THREADS`` env var.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import experiment
from .errors import InputDomainError, NumericalError
from .experiment import SpecError

EXIT_OK, EXIT_VERIFY, EXIT_SPEC, EXIT_NUMERICAL = 0, 1, 2, 3


def _int_list(values: list[str]) -> list[int]:
    out = []
    for v in values:
        out.extend(int(x) for x in v.split(",") if x.strip())
    return out


def _out_dir(args, spec) -> Path:
    out = args.out or spec.out
    if not out:
        raise SpecError("no output directory: pass --out or set `out` in the spec")
    path = Path(out)
    if not path.is_dir():
        raise SpecError(f"output directory {path} does not exist")
    return path


def cmd_run(args) -> int:
    spec = experiment.load_spec(args.spec)
    experiment.check_cells(spec)
    out = _out_dir(args, spec)
    t0 = time.perf_counter()
    env = experiment.build_environment(spec)
    reports = experiment.run_grid(spec, env)
    csv_path, json_path = experiment.write_outputs(
        reports, out, meta={"command": "run", "spec": str(args.spec), "seed": spec.seed,
                            "dense_perplexity": env.dense_perplexity})
    print(f"{len(reports)} rows -> {csv_path} ({time.perf_counter() - t0:.1f}s); archive {json_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.spec is None:
        # `--values 2 4 spec.toml`: the greedy list swallowed the positional
        if not args.values or args.values[-1].replace(",", "").isdigit():
            raise SpecError("sweep needs a spec file")
        args.spec = args.values.pop()
    spec = experiment.load_spec(args.spec)
    out = _out_dir(args, spec)
    values = _int_list(args.values)
    cells, skipped = experiment.sweep_cells(spec, args.axis, values)
    reports = []
    if cells:
        env = experiment.build_environment(spec)
        reports = experiment.run_cells(env, spec, cells)
    csv_path, _ = experiment.write_outputs(
        reports, out, stem=f"sweep_{args.axis}", extra_rows=skipped,
        meta={"command": "sweep", "axis": args.axis, "values": values, "seed": spec.seed})
    print(f"{len(reports)} rows, {len(skipped)} skipped -> {csv_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    t0 = time.perf_counter()
    results = run_checks(args.filter)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedprune", description="Federated mask-vote pruning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute every cell of a spec grid")
    run.add_argument("spec", help="TOML or JSON experiment spec")
    run.add_argument("--out", help="existing output directory (overrides spec.out)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="sensitivity sweep over clients or calibration samples")
    sweep.add_argument("--axis", choices=["clients", "samples"], required=True)
    sweep.add_argument("--values", nargs="*", default=[], help="integers, space or comma separated")
    sweep.add_argument("spec", nargs="?")
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the acceptance checks")
    verify.add_argument("--filter", help="only checks whose name contains this substring")
    verify.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, InputDomainError, ValueError) as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
