"""Figure rendering for CLI reports.

Figures are drawn from the delimited files the report commands emit (not
from in-memory state), so a PNG can always be regenerated from its sibling
TSV/CSV.  Everything renders through the Agg backend; no display needed.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class FigureError(Exception):
    pass


def _sibling_png(path: str) -> str:
    return os.path.splitext(path)[0] + ".png"


def metrics_png(tsv_path: str, png_path: str | None = None) -> str:
    """Grouped AUC/UAUC bars per slice from a metrics TSV; returns the PNG
    path."""
    rows = []
    with open(tsv_path, encoding="utf-8") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            rows.append(row)
    if not rows:
        raise FigureError(f"no metric rows in {tsv_path}")
    slices = [r["slice"] for r in rows]

    def col(name):
        return [float(r[name]) if r[name] else None for r in rows]

    png_path = png_path or _sibling_png(tsv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.38
    for k, (name, vals) in enumerate((("AUC", col("auc")),
                                      ("UAUC", col("uauc")))):
        xs = [j + (k - 0.5) * width for j, v in enumerate(vals)
              if v is not None]
        ys = [v for v in vals if v is not None]
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks(range(len(slices)))
    ax.set_xticklabels(slices)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score")
    ax.set_title(os.path.basename(os.path.splitext(tsv_path)[0]))
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def cosine_png(csv_path: str, png_path: str | None = None) -> str:
    """Histogram of the cosine-alignment bins from a cosine CSV; returns
    the PNG path."""
    los, his, counts = [], [], []
    with open(csv_path, encoding="utf-8") as f:
        for row in csv.DictReader(f):
            los.append(float(row["bin_lo"]))
            his.append(float(row["bin_hi"]))
            counts.append(int(row["count"]))
    if not counts:
        raise FigureError(f"no histogram rows in {csv_path}")
    centers = [(lo + hi) / 2 for lo, hi in zip(los, his)]
    widths = [hi - lo for lo, hi in zip(los, his)]
    total = sum(counts)
    mean = (sum(c * x for c, x in zip(counts, centers)) / total
            if total else 0.0)

    png_path = png_path or _sibling_png(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, counts, width=widths, align="center", edgecolor="none")
    if total:
        ax.axvline(mean, linestyle="--", linewidth=1.0, color="#444444",
                   label=f"mean ≈ {mean:.3f}")
        ax.legend(loc="upper left")
    ax.set_xlim(-1.0, 1.0)
    ax.set_xlabel("cos(proj(item), semantic)")
    ax.set_ylabel("items")
    ax.set_title(os.path.basename(os.path.splitext(csv_path)[0]))
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path
