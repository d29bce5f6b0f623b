"""Report figures, always rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
}

MODE_COLORS = {"filtered": "#1f77b4", "unfiltered": "#d62728"}


def violation_trace(traces: dict, tau: float, path, title: str = "") -> Path:
    """Max constraint value over time, one line per mode.

    ``traces`` maps a mode name to ``(times, max_g)`` arrays.
    """
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        for mode, (t, g) in traces.items():
            ax.plot(t, g, label=mode, color=MODE_COLORS.get(mode))
        ax.axhline(tau, color="k", ls="--", lw=0.8, label=r"$\tau$")
        ax.axhline(0.0, color="0.5", lw=0.6)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(r"$\max_i\, g_i$")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.savefig(path)
        plt.close(fig)
    return path


def violation_histogram(per_mode: dict, tau: float, path, title: str = "") -> Path:
    """Histogram of per-episode maximum violation for each mode."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        finite = [np.asarray(v, float)[np.isfinite(v)] for v in per_mode.values()]
        allv = np.concatenate(finite) if finite else np.zeros(0)
        if allv.size:
            lo, hi = float(allv.min()), float(allv.max())
            if hi - lo < 1e-12:
                lo, hi = lo - 0.5, hi + 0.5
            bins = np.linspace(lo, hi, 31)
            for (mode, _), v in zip(per_mode.items(), finite):
                ax.hist(v, bins=bins, alpha=0.6, label=f"{mode} (n={v.size})",
                        color=MODE_COLORS.get(mode))
        ax.axvline(tau, color="k", ls="--", lw=0.8, label=r"$\tau$")
        ax.set_xlabel("episode max violation")
        ax.set_ylabel("episodes")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.savefig(path)
        plt.close(fig)
    return path
