"""Comparison figures: simulated effect intervals next to the pilot's yearly
difference-in-differences intervals."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .population import MEASURES  # noqa: E402

MEASURE_LABELS = {"HbA1c": "HbA1c", "LDL": "LDL", "EyeExam": "Eye exam",
                  "Nephropathy": "Nephropathy"}
SIM_COLOR = "#1f5fa8"
PILOT_COLOR = "#c0392b"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _pilot_intervals(rows, measure):
    seen = {}
    for r in rows:
        if r["measure"] == measure:
            seen[int(r["pilot_year"])] = (float(r["pilot_lo"]), float(r["pilot_hi"]))
    return [seen[y] for y in sorted(seen)]


def _errorbar(ax, x, lo, hi, color, label=None, marker="o"):
    mid = (lo + hi) / 2.0
    ax.errorbar([x], [mid], yerr=[[mid - lo], [hi - mid]], fmt=marker, color=color,
                capsize=3, ms=4, lw=1.2, label=label)


def plot_effects_overall(rows, path) -> Path:
    """One panel per measure: pooled simulated interval plus pilot years 1-3."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(MEASURES), figsize=(9.0, 2.8), sharey=True)
        for ax, measure in zip(axes, MEASURES):
            sim = [r for r in rows if r["measure"] == measure][0]
            _errorbar(ax, 0, float(sim["lo"]), float(sim["hi"]), SIM_COLOR, "simulated")
            for i, (lo, hi) in enumerate(_pilot_intervals(rows, measure), 1):
                _errorbar(ax, i, lo, hi, PILOT_COLOR, "pilot" if i == 1 else None, "s")
            ax.axhline(0.0, color="0.6", lw=0.6)
            ax.set_xticks(range(4), ["Sim", "Y1", "Y2", "Y3"])
            ax.set_title(MEASURE_LABELS[measure])
        axes[0].set_ylabel("effect (percentage points)")
        axes[0].legend(loc="upper left", frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_effects_by_training(rows, path) -> Path:
    """Measures in columns, training doses in rows."""
    path = Path(path)
    ks = sorted({int(r["k"]) for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(ks), len(MEASURES), figsize=(9.0, 1.7 * len(ks) + 0.6),
                                 sharey="col", squeeze=False)
        for i, k in enumerate(ks):
            for j, measure in enumerate(MEASURES):
                ax = axes[i][j]
                sim = [r for r in rows if r["measure"] == measure and int(r["k"]) == k][0]
                _errorbar(ax, 0, float(sim["lo"]), float(sim["hi"]), SIM_COLOR)
                for y, (lo, hi) in enumerate(_pilot_intervals(rows, measure), 1):
                    _errorbar(ax, y, lo, hi, PILOT_COLOR, marker="s")
                ax.axhline(0.0, color="0.6", lw=0.6)
                ax.set_xticks(range(4), ["Sim", "Y1", "Y2", "Y3"])
                if i == 0:
                    ax.set_title(MEASURE_LABELS[measure])
                if j == 0:
                    ax.set_ylabel(f"k={k}\npp")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
