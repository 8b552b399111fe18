"""Command line: f2csa-plot --kind K --in DIR --out FILE.png [--logy]."""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, PlotSpec, SchemaError, plot


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f2csa-plot", description=__doc__)
    p.add_argument("--kind", choices=list(KINDS), required=True)
    p.add_argument("--in", dest="input_dir", required=True,
                   help="experiment output directory (summary.json + CSVs)")
    p.add_argument("--out", dest="output", required=True, help="image path (.png)")
    p.add_argument("--logy", action="store_true", help="log-scale value axis")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        img, caption = plot(PlotSpec(input_dir=args.input_dir, kind=args.kind,
                                     output=args.output, logy=args.logy))
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    print(img)
    print(caption)
    return 0


if __name__ == "__main__":
    sys.exit(main())
