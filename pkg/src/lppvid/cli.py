"""Command-line entry point: ``lppvid <command> --config <path> --out <dir>``.

On failure a single JSON object ``{"error": <category>, "message": ...}`` is
written to stderr and the exit code identifies the category.
"""

import argparse
import json
import logging
import sys

from lppvid.config import load_config
from lppvid.errors import LppvError

EXIT_CODES = {
    "config": 2,
    "missing-artifact": 3,
    "not-a-limit-cycle": 4,
    "convergence": 5,
    "stiffness": 6,
    "no-closed-orbit": 7,
    "riccati-divergence": 8,
    "out-of-neighborhood": 9,
    "well-posedness": 9,
    "dataset-degenerate": 10,
    "numerical": 11,
    "oracle-unreliable": 12,
}
GENERIC_EXIT = 1


def _parser():
    p = argparse.ArgumentParser(prog="lppvid", description="Limit-cycle LPPV identification "
                                "experiments driven by JSON configs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and timings")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("limit-cycle", "compute limit cycles and surfaces"),
                            ("identify", "generate datasets and identify models"),
                            ("predict", "simulate the test trajectory with every model"),
                            ("compare-omega", "compare identified and analytic system matrices")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, help="artifact directory")
    return p


def _fail(category, message):
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES.get(category, GENERIC_EXIT)


def main(argv=None):
    from lppvid.experiments import COMMANDS

    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](cfg, args.out)
    except LppvError as exc:
        return _fail(exc.category, str(exc))
    except OSError as exc:
        return _fail("io", str(exc))
    if args.command == "predict":
        sys.stdout.write(result.to_text())
    else:
        sys.stdout.write(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
