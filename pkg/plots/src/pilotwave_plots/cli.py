"""Standalone plot renderer for pilotwave run directories.

Usage:
    pilotwave-plot RUN_DIR --kind trajectories -o fan.png
    pilotwave-plot RUN_DIR --kind equivariance --time 2.0 -o overlay.png
    pilotwave-plot RUN_DIR --kind branches -o weights.png
    pilotwave-plot RUN_DIR --kind field --field-file RUN_DIR/field_B_t0.csv -o bfield.png
"""

from __future__ import annotations

import argparse
import sys

from .io import SchemaError
from .render import PlotJob, plot


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="pilotwave-plot", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("run_dir", help="pilotwave run directory")
    p.add_argument("--kind", required=True,
                   choices=["trajectories", "equivariance", "branches", "field"])
    p.add_argument("--time", type=float, default=None,
                   help="checkpoint time selector (equivariance)")
    p.add_argument("--field-file", default=None, help="field snapshot CSV (field kind)")
    p.add_argument("-o", "--output", required=True, help="output image path")
    args = p.parse_args(argv)

    job = PlotJob(run_dir=args.run_dir, kind=args.kind, output=args.output,
                  time=args.time, field_file=args.field_file)
    try:
        path = plot(job)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
