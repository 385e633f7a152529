"""Report figures rendered from alignment CSV rows."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import pivot_rows  # noqa: E402

METHOD_LABELS = {"gradcam": "Grad-CAM", "threshold_gradcam": "Threshold-Grad-CAM"}

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "dclscam",
}


def _pairs(entries, method):
    by_name = {e["model"]: e for e in entries}
    out = []
    for name, e in by_name.items():
        if name.endswith("_dcls"):
            continue
        twin = by_name.get(name + "_dcls")
        if twin is not None and method in e and method in twin:
            out.append((name, float(e[method]), float(twin[method])))
    return out


def score_comparison(rows, path, method="threshold_gradcam"):
    """Scatter of each baseline's score against its ``_dcls`` twin."""
    pairs = _pairs(pivot_rows(rows), method)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        if pairs:
            xs = [p[1] for p in pairs]
            ys = [p[2] for p in pairs]
            lo = min(xs + ys) - 0.05
            hi = max(xs + ys) + 0.05
            ax.plot([lo, hi], [lo, hi], ls="--", color="0.5", lw=0.8)
            ax.scatter(xs, ys, s=18, color="C0", zorder=3)
            for name, x, y in pairs:
                ax.annotate(name, (x, y), xytext=(3, 3), textcoords="offset points", fontsize=7)
            ax.set_xlim(lo, hi)
            ax.set_ylim(lo, hi)
        ax.set_xlabel(f"{METHOD_LABELS[method]} score (baseline)")
        ax.set_ylabel(f"{METHOD_LABELS[method]} score (DCLS)")
        fig.tight_layout()
        fig.savefig(path, dpi=150, metadata={"Software": None})
        plt.close(fig)
    return path


def size_vs_score(rows, path, method="threshold_gradcam"):
    """Parameter count against alignment score, one point per model."""
    entries = [e for e in pivot_rows(rows) if method in e]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for i, e in enumerate(entries):
            marker = "s" if e["model"].endswith("_dcls") else "o"
            ax.scatter(int(e["params"]), float(e[method]), marker=marker, s=20, color=f"C{i % 10}",
                       label=e["model"])
        ax.set_xlabel("parameters")
        ax.set_ylabel(f"{METHOD_LABELS[method]} score")
        if entries:
            ax.legend(frameon=False, loc="best")
        fig.tight_layout()
        fig.savefig(path, dpi=150, metadata={"Software": None})
        plt.close(fig)
    return path


def render_all(rows, outdir):
    """Write the comparison and size figures for both methods; returns paths."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for method in METHOD_LABELS:
        paths.append(score_comparison(rows, outdir / f"comparison_{method}.png", method))
    paths.append(size_vs_score(rows, outdir / "size_vs_score.png"))
    return paths
