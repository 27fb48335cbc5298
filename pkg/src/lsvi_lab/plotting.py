"""Regret figures written next to the delimited report tables."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # keep PNG/SVG bytes stable across runs
    "svg.hashsalt": "lsvi-lab",
}


def new_figure(width=5.0, height=None):
    height = height or width * GOLDEN
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def regret_figure(curves: dict, loglog=False):
    """Cumulative regret against episode for each labelled curve."""
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        for label, y in curves.items():
            y = np.asarray(y, dtype=float)
            k = np.arange(1, len(y) + 1)
            if loglog:
                keep = y > 0
                ax.loglog(k[keep], y[keep], label=label, lw=1.2)
            else:
                ax.plot(k, y, label=label, lw=1.2)
        ax.set_xlabel("episode k")
        ax.set_ylabel("cumulative regret")
        if len(curves) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
    return fig


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path
