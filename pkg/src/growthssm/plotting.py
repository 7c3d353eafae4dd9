"""Minimal SVG line charts: curve, pointwise band polygon, optional data points."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import Band  # noqa: E402

# fixed ids and no timestamp keep the SVG output byte-stable
plt.rcParams["svg.hashsalt"] = "growthssm"


def plot_band(band: Band, path, *, title: str = "", label: str = "estimate",
              points: Optional[Sequence] = None, extra: Sequence = (),
              xlabel: str = "time", ylabel: str = "value", zero_line: bool = False) -> Path:
    """Write an SVG with ``band`` as a shaded polygon under its estimate.

    ``points`` is an optional ``(times, values)`` pair drawn as markers;
    ``extra`` holds further ``(times, values, label)`` curves.
    """
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.fill_between(band.times, band.lower, band.upper, color="tab:blue", alpha=0.2, lw=0,
                    label=f"{round(100 * band.level, 3):g}% band")
    ax.plot(band.times, band.estimate, color="tab:blue", lw=1.6, label=label)
    for t, v, lab in extra:
        ax.plot(t, v, lw=0.8, alpha=0.7, label=lab)
    if points is not None:
        ax.plot(points[0], points[1], ".", color="0.3", ms=3, label="data")
    if zero_line:
        ax.axhline(0.0, color="0.5", lw=0.8, ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8, frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
