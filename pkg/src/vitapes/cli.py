"""``vitapes <mode> --config PATH [--seed N] [--out DIR] [--override key=value]...``

Exit codes: 0 ok, 1 a check failed, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, NumericError, VitapesError
from .harness import MODES, load_config, run_config

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="vitapes", description="Visuotactile transformer experiments.")
    p.add_argument("mode", choices=MODES + ("run",),
                   help="run mode; 'run' takes the mode from the config file")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config's list")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, dotted keys allowed (repeatable)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if args.mode != "run":
        overrides.insert(0, f"mode={args.mode!r}".replace("'", '"'))
    try:
        cfg = load_config(args.config, overrides, args.seed, args.out)
    except ConfigError as exc:
        field = f" [field: {exc.field}]" if getattr(exc, "field", None) else ""
        print(f"vitapes: config error{field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_config(cfg)
    except ConfigError as exc:
        field = f" [field: {exc.field}]" if getattr(exc, "field", None) else ""
        print(f"vitapes: config error{field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"vitapes: numeric abort: {exc} (checkpoint written to {cfg.out})", file=sys.stderr)
        return EXIT_NUMERIC
    except VitapesError as exc:
        print(f"vitapes: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    print(f"vitapes: {cfg.mode} finished with status {result.status}; artifacts in {cfg.out}")
    return result.status


if __name__ == "__main__":
    sys.exit(main())
