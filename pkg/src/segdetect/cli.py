"""``segdetect`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numeric failure.
"""
import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, FormatError, NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser():
    parser = _Parser(prog="segdetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    helps = {
        "generate": "render the synthetic dataset and its split",
        "train": "train the segmentation network",
        "attack": "run the attack suite on the test split",
        "detect": "cross-validate every detector against every attack",
        "report": "merge results into grouped tables",
    }
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="experiment root directory")
        p.add_argument("--force", action="store_true", help="overwrite existing stage output")
        p.add_argument("--seed-override", type=_seed, default=None,
                       help="replace every seed of the config")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        result = pipeline.STAGES[args.verb](cfg, args.out, force=args.force)
    except ConfigError as exc:
        print(f"segdetect {args.verb}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"segdetect {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"segdetect {args.verb}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.verb == "report":
        sys.stdout.write(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
