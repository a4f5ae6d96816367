"""Standalone renderer: ``plots <runs_dir> --out <dir>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import ReportSchemaError, render_all


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render boxplots and the solve-time table from report CSVs",
    )
    parser.add_argument("runs_dir", type=Path,
                        help="directory holding boxplot_data.csv and timing_table.csv")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (defaults to runs_dir)")
    args = parser.parse_args(argv)
    out = args.out if args.out is not None else args.runs_dir
    try:
        written = render_all(args.runs_dir, out)
    except (FileNotFoundError, ReportSchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
