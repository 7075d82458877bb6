"""Command-line entry point.

    wqed --recipe g3map --config table_s1.cfg --out results/ \
         --set drive.n_mean=0.05 --workers 4

`--config` accepts a path or the stem of a shipped configuration file.
`--recipe validate` checks a config and prints the resolved values
without running anything.  The default worker count comes from the
WQED_WORKERS environment variable when set.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config
from .recipes import REGISTRY, ExperimentSpec, run


def validate_config(path: str, overrides=()) -> int:
    """Schema and sanity report for one config; 0 when valid, 2 otherwise."""
    try:
        loaded, errors, notes = config.inspect(path, overrides)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if loaded is None:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    for line in notes:
        print(line)
    system = loaded.system
    parts = [f"{system.n_emitters} emitters",
             f"{system.drive.shape} drive",
             f"grid [{system.grid.t_min}, {system.grid.t_max}] ns "
             f"at dt = {system.grid.dt} ns"]
    if loaded.diffusion is not None:
        parts.append(f"diffusion {loaded.diffusion.scheme}/"
                     f"{loaded.diffusion.mode}")
    print("ok: " + ", ".join(parts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wqed",
        description="Waveguide-QED correlation simulator")
    parser.add_argument("--config", required=True,
                        help="config path or shipped config name")
    parser.add_argument("--recipe", required=True,
                        choices=sorted(REGISTRY) + ["validate"])
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    parser.add_argument("--workers", type=int,
                        default=int(os.environ.get("WQED_WORKERS", "1")))
    parser.add_argument("--seed", type=int, default=None,
                        help="replaces the config seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.recipe == "validate":
        return validate_config(args.config, tuple(args.overrides))
    if not args.out:
        parser.error("--out is required for this recipe")
    spec = ExperimentSpec(recipe=args.recipe, config=args.config,
                          out_dir=args.out, overrides=tuple(args.overrides),
                          workers=args.workers, seed=args.seed)
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
