"""Command line for the figure renderer: one subcommand per kind."""

import argparse
import sys
from pathlib import Path

from . import __version__
from .render import EXPECTED_INPUTS, KINDS, FigureSpec, SchemaError, render

EXIT_INPUT = 2

_HELP = {
    "eigdecay": "eigenvalue decay with trace-estimate errors",
    "taylor-errors": "per-sample relative Taylor errors, linear vs quadratic",
    "mse-table": "moment estimates and mean-squared errors as a table",
    "convergence": "cost and projected-gradient history per stage",
    "field": "heatmap of a sampled parameter field",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqctrl-figures",
        description="Render figures from uqctrl CSV outputs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        sub = commands.add_parser(kind, help=_HELP[kind])
        sub.add_argument(
            "--in",
            dest="inputs",
            nargs="+",
            required=True,
            metavar="CSV",
            help="input file(s), in order: " + ", ".join(EXPECTED_INPUTS[kind]),
        )
        sub.add_argument(
            "--out", required=True, metavar="PNG", help="output image path"
        )
        scale = sub.add_mutually_exclusive_group()
        scale.add_argument(
            "--log-y",
            dest="log_value_axis",
            action="store_true",
            default=None,
            help="force a log value axis",
        )
        scale.add_argument(
            "--linear-y",
            dest="log_value_axis",
            action="store_false",
            default=None,
            help="force a linear value axis",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(
        kind=args.kind,
        inputs=[Path(p) for p in args.inputs],
        out=Path(args.out),
        log_value_axis=args.log_value_axis,
    )
    try:
        render(spec)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
