"""Grouped-bar TPR disparity figures, written as byte-stable SVG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fairness import FAIR_HIGH, FAIR_LOW, FairnessReport  # noqa: E402

MODEL_COLORS = {"baseline": "#7f7f7f", "partial": "#1f77b4", "full": "#d62728"}

_RC = {
    "svg.hashsalt": "debiaslab",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def band_gid(level: float) -> str:
    return f"fair-band-{level:g}"


def disparity_figure(reports: Mapping[str, FairnessReport], group: int, title: str | None = None):
    """Per-class bars of TPR disparity for each model, with the fair band marked.

    Undefined cells get no bar and an "n/a" label at the baseline.
    """
    names = list(reports)
    n_classes = next(iter(reports.values())).n_classes
    x = np.arange(n_classes)
    width = 0.8 / len(names)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        top = FAIR_HIGH
        for k, name in enumerate(names):
            offset = (k - (len(names) - 1) / 2) * width
            for c in range(n_classes):
                d = reports[name].cell(c, group).disparity
                xpos = x[c] + offset
                if d is None:
                    ax.text(xpos, 0.02, "n/a", ha="center", va="bottom", fontsize=7, rotation=90)
                    continue
                ax.bar(xpos, d, width, color=MODEL_COLORS.get(name, f"C{k}"), label=name if c == 0 else None)
                top = max(top, d)
        for level in (FAIR_LOW, FAIR_HIGH):
            line = ax.axhline(level, color="black", linestyle="--", linewidth=0.8)
            line.set_gid(band_gid(level))
        ax.set_xticks(x, [f"class {c}" for c in range(n_classes)])
        ax.set_ylabel(f"TPR disparity (group {group} / ref)")
        ax.set_ylim(0, top * 1.15)
        ax.set_title(title or f"TPR disparity, group {group}")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False, fontsize=8, loc="upper left")
        fig.tight_layout()
    return fig


def save_svg(fig, path, description: str = "") -> None:
    """Save without a timestamp so identical figures give identical bytes."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with plt.rc_context(_RC):
        fig.savefig(tmp, format="svg", metadata={"Date": None, "Description": description or None})
    plt.close(fig)
    tmp.replace(path)


def write_disparity_plots(reports: Mapping[str, FairnessReport], out_dir, description: str = "") -> list[Path]:
    """One SVG per non-reference group; returns the written paths."""
    out_dir = Path(out_dir)
    first = next(iter(reports.values()))
    groups = sorted({c.group for c in first.cells})
    paths = []
    for g in groups:
        path = out_dir / f"disparity_group{g}.svg"
        save_svg(disparity_figure(reports, g), path, description)
        paths.append(path)
    return paths
