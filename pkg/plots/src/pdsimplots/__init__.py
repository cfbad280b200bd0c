"""Figure generation for pdsim sweep summaries.

Consumes the ``summary.csv`` schema the simulator's sweep command emits and
renders one normalized line per engine against offered load, writing a
plain-text data sidecar next to every image so figures stay diffable.
"""

from pdsimplots.figures import FigureSpec, PlotError, normalize, plot_metric, read_summary

__all__ = ["FigureSpec", "PlotError", "normalize", "plot_metric", "read_summary"]
