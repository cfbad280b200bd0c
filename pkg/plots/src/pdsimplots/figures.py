"""Normalized per-engine series from sweep summary CSVs.

The input schema is the simulator's ``summary.csv``: one row per
(engine, offered rate) with numeric metric columns. Every figure divides its
metric by the value at a single anchor row — the baseline engine at the
lowest swept rate — so series from different hardware scales land on one
axis. The anchor row therefore always plots at exactly 1.0.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

DEFAULT_BASELINE = "hybrid-512"


class PlotError(ValueError):
    """Raised for malformed summaries, unknown columns, or a missing anchor."""


@dataclass(frozen=True)
class FigureSpec:
    metric: str
    out_path: str
    baseline: str = DEFAULT_BASELINE
    title: str | None = None


def read_summary(path: str) -> list[dict]:
    """Load a sweep summary CSV into rows of {engine: str, <column>: float}."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise PlotError(f"cannot read summary: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("engine", "qps"):
            if required not in header:
                raise PlotError(f"{path}: missing required column {required!r}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if None in raw or any(v is None for v in raw.values()):
                raise PlotError(f"{path}:{lineno}: ragged row")
            row: dict = {"engine": raw["engine"]}
            if not row["engine"]:
                raise PlotError(f"{path}:{lineno}: empty engine label")
            for key, value in raw.items():
                if key == "engine":
                    continue
                try:
                    row[key] = float(value)
                except ValueError:
                    raise PlotError(
                        f"{path}:{lineno}: column {key!r} is not numeric: {value!r}"
                    ) from None
            rows.append(row)
    if not rows:
        raise PlotError(f"{path}: summary has no data rows")
    return rows


def normalize(
    rows: list[dict], metric: str, baseline: str = DEFAULT_BASELINE
) -> tuple[float, dict[str, list[tuple[float, float]]]]:
    """Divide ``metric`` by its value at the anchor row.

    The anchor is ``baseline`` at the lowest rate present anywhere in the
    summary. Returns ``(anchor_qps, {engine: [(qps, ratio), ...]})`` with
    engines and rates sorted.
    """
    if metric == "engine" or metric not in rows[0]:
        known = ", ".join(k for k in rows[0] if k != "engine")
        raise PlotError(f"unknown metric column {metric!r} (have: {known})")
    anchor_qps = min(row["qps"] for row in rows)
    anchors = [row for row in rows if row["engine"] == baseline and row["qps"] == anchor_qps]
    if not anchors:
        raise PlotError(f"anchor row not found: {baseline} @ min QPS ({anchor_qps:g})")
    anchor = anchors[0][metric]
    if anchor == 0:
        raise PlotError(
            f"anchor {metric} is 0 for {baseline} @ qps={anchor_qps:g}; cannot normalize"
        )

    series: dict[str, list[tuple[float, float]]] = {}
    seen = set()
    for row in rows:
        key = (row["engine"], row["qps"])
        if key in seen:
            raise PlotError(f"duplicate summary row for {key[0]} @ qps={key[1]:g}")
        seen.add(key)
        series.setdefault(row["engine"], []).append((row["qps"], row[metric] / anchor))
    return anchor_qps, {
        engine: sorted(points) for engine, points in sorted(series.items())
    }


def write_sidecar(
    path: str,
    metric: str,
    baseline: str,
    anchor_qps: float,
    series: dict[str, list[tuple[float, float]]],
) -> None:
    lines = [
        f"# {metric} normalized to {baseline} @ qps={anchor_qps:g}",
        "engine,qps,ratio",
    ]
    for engine in sorted(series):
        for qps, ratio in series[engine]:
            lines.append(f"{engine},{qps:g},{ratio:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def plot_metric(summary_path: str, spec: FigureSpec) -> tuple[str, str]:
    """Render one normalized figure plus its data sidecar.

    Returns ``(image_path, sidecar_path)``. The sidecar lands next to the
    image with a ``.dat`` suffix and holds exactly the plotted points, so
    figure changes diff as text.
    """
    rows = read_summary(summary_path)
    anchor_qps, series = normalize(rows, spec.metric, spec.baseline)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for engine in sorted(series):
        points = series[engine]
        ax.plot([q for q, _ in points], [r for _, r in points], marker="o", label=engine)
    ax.axhline(1.0, color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("offered load (req/s)")
    ax.set_ylabel(f"{spec.metric} (normalized)")
    ax.set_title(spec.title or f"{spec.metric} vs offered load")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(spec.out_path, dpi=120)
    plt.close(fig)

    sidecar = os.path.splitext(spec.out_path)[0] + ".dat"
    write_sidecar(sidecar, spec.metric, spec.baseline, anchor_qps, series)
    return spec.out_path, sidecar
