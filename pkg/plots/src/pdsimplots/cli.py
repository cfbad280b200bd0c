"""Command-line front end: one normalized figure per invocation."""

import argparse
import sys

from pdsimplots.figures import DEFAULT_BASELINE, FigureSpec, PlotError, plot_metric


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdsim-plots",
        description="Render a normalized metric-vs-load figure from a sweep summary CSV.",
    )
    parser.add_argument("--summary", required=True, help="path to summary.csv")
    parser.add_argument(
        "--metric", required=True,
        help="summary column to plot (e.g. tokens_per_s, goodput, itl_goodput, "
        "ttft_p95_us, itl_p95_us)",
    )
    parser.add_argument("--out", required=True, help="output image path (e.g. fig.png)")
    parser.add_argument(
        "--baseline", default=DEFAULT_BASELINE,
        help="engine whose lowest-rate row anchors the normalization "
        f"(default {DEFAULT_BASELINE})",
    )
    parser.add_argument("--title", default=None, help="figure title override")
    args = parser.parse_args(argv)

    spec = FigureSpec(
        metric=args.metric, out_path=args.out, baseline=args.baseline, title=args.title
    )
    try:
        image, sidecar = plot_metric(args.summary, spec)
    except (PlotError, OSError) as exc:
        print(f"pdsim-plots: error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {image} and {sidecar}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
