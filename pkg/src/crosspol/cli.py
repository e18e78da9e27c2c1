"""Command-line driver: ``crosspol <experiment> [--config FILE] [overrides]``.

Exit codes: 0 on success, 2 for configuration errors, 3 when a weight
collapse or propagation failure aborts the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import EXPERIMENTS, config_from_dict
from .errors import ConfigError, PropagationError, TotalWeightCollapse
from .experiments import run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crosspol", description="Particle data fusion experiments.")
    sub = p.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", type=Path, help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output CSV path (siblings get derived names)")
        s.add_argument("--particles", type=int, help="particles per ensemble")
        s.add_argument("--trials", type=int)
        s.add_argument("--scheme", action="append", choices=("apart", "together", "dm"),
                       help="fusion scheme; repeat to run several where supported")
        s.add_argument("--full-scale", action="store_true",
                       help="use full-size defaults (1000 trials, N up to 1e6, orbit N = 50000)")
        s.add_argument("--no-timing", action="store_true",
                       help="write wall_ms as 0 so repeated runs are byte-identical")
    return p


def _load(path: Path) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        data = _load(args.config) if args.config else {}
        if data.get("experiment", args.experiment) != args.experiment:
            raise ConfigError(
                f"config is for {data['experiment']!r} but subcommand is {args.experiment!r}"
            )
        data["experiment"] = args.experiment
        for flag, key in (("seed", "seed"), ("out", "output_path"), ("particles", "n_particles"), ("trials", "n_trials")):
            v = getattr(args, flag)
            if v is not None:
                data[key] = v
        if args.scheme:
            data["scheme"] = args.scheme[0] if len(args.scheme) == 1 else args.scheme
        if args.no_timing:
            data["record_timing"] = False
        data.setdefault("output_path", f"{args.experiment}.csv")
        cfg = config_from_dict(data, full_scale=args.full_scale)
        run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TotalWeightCollapse, PropagationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {cfg.output_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
