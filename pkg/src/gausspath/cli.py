"""Command line interface: ``gausspath {run,resume,report,validate-config}``.

Exit codes: 0 success, 1 missing artifacts or runtime failure, 2 config
error, 3 resume mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import yaml

from .geometry import ConfigurationError
from .runner import (PRESETS, ArtifactError, ResumeMismatch, apply_overrides, dump_config,
                     from_document, get_preset, report, resume_experiment, run_experiment,
                     to_document)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_RESUME = 0, 1, 2, 3


def _resolve(args):
    """(sim, plan, name) from --preset/--config plus --set and --seed."""
    if args.preset and args.config:
        raise ConfigurationError("give either --preset or --config, not both")
    if args.config:
        try:
            with open(args.config) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{args.config} is not valid YAML: {exc}") from exc
    elif args.preset:
        p = get_preset(args.preset)
        doc = to_document(p.simulation, p.plan, p.name)
    else:
        raise ConfigurationError("one of --preset or --config is required")
    doc = apply_overrides(doc, getattr(args, "set", None))
    sim, plan, name = from_document(doc)
    if getattr(args, "seed", None) is not None:
        sim = replace(sim, seed=int(args.seed))
    return sim, plan, name


def _cmd_run(args):
    sim, plan, name = _resolve(args)
    summary = run_experiment(sim, plan, args.out, workers=args.workers, name=name)
    print(report(args.out))
    return EXIT_OK if summary else EXIT_FAILURE


def _cmd_resume(args):
    expected = None
    if args.preset or args.config:
        sim, plan, _ = _resolve(args)
        expected = (sim, plan)
    resume_experiment(args.out, n_iteration=args.n_iteration, workers=args.workers,
                      expected=expected)
    print(report(args.out))
    return EXIT_OK


def _cmd_report(args):
    print(report(args.out))
    return EXIT_OK


def _cmd_validate(args):
    sim, plan, name = _resolve(args)
    if args.print:
        sys.stdout.write(dump_config(sim, plan, name))
    else:
        print(f"config {name!r} is valid ({sim.model.kind}, {sim.n_paths} paths, "
              f"{sim.n_iteration} updates)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gausspath",
                                     description="Gaussian-sum path integral Monte Carlo")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def source(p, seed=True):
        p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment")
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override sampling.seed")

    p = sub.add_parser("run", help="run an experiment")
    source(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("resume", help="continue a run from its checkpoints")
    source(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--n-iteration", type=int, help="new total number of updates per chain")
    p.set_defaults(func=_cmd_resume)

    p = sub.add_parser("report", help="summarise a finished run")
    p.add_argument("out", nargs="?", help="run directory")
    p.add_argument("--out", dest="out_flag", help="run directory")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("validate-config", help="check a preset or config file")
    source(p)
    p.add_argument("--print", action="store_true", help="print the resolved YAML")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        args.out = args.out or args.out_flag
        if not args.out:
            parser.error("report needs a run directory")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeMismatch as exc:
        print(f"resume refused: {exc}", file=sys.stderr)
        return EXIT_RESUME
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
