"""Command-line entry point: ``ctxfed run|validate|gen-data``."""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from ctxfed.data import SyntheticSpec, generate_synthetic, write_csv_dir
from ctxfed.errors import InvalidInputError, SpecError
from ctxfed.experiment import (
    OUTPUT_ENV,
    _SYNTHETIC_KEYS,
    _Reader,
    load_spec,
    run_experiment,
    validate_spec,
)


def _cmd_run(args) -> int:
    try:
        spec = load_spec(args.spec)
    except SpecError as exc:
        for problem in exc.problems:
            print(problem, file=sys.stderr)
        return 2
    try:
        return run_experiment(spec, args.out, args.seed)
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_validate(args) -> int:
    problems = validate_spec(args.spec)
    for problem in problems:
        print(problem, file=sys.stderr)
    if problems:
        return 1
    print("ok")
    return 0


def _cmd_gen_data(args) -> int:
    path = Path(args.spec)
    text = path.read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.read_string(text, source=str(path))
    section = "dataset" if cp.has_section("dataset") else None
    if section is None:
        print(f"{path}: missing [dataset] section", file=sys.stderr)
        return 1
    reader = _Reader(path, text)
    options = {}
    for key, raw in cp.items(section):
        if key == "kind":
            if raw.strip() != "synthetic":
                reader.error(section, key, "gen-data only handles synthetic datasets")
            continue
        if key not in _SYNTHETIC_KEYS:
            reader.error(section, key, "unknown key for synthetic dataset")
            continue
        value = reader.convert(section, key, raw, _SYNTHETIC_KEYS[key])
        if value is not None:
            options[key] = value
    if not reader.problems:
        reader.problems.extend(SyntheticSpec(**options).problems())
    if reader.problems:
        for problem in reader.problems:
            print(problem, file=sys.stderr)
        return 1
    write_csv_dir(generate_synthetic(SyntheticSpec(**options)), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute every run in an experiment spec")
    p.add_argument("spec")
    p.add_argument("--out", help=f"output directory (default: spec, ${OUTPUT_ENV}, ./results)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="check a spec without running it")
    p.add_argument("spec")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as device CSV files")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
