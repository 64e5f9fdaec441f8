"""Matplotlib renderings of report and trace tables.

Figures are written next to the CSVs they are drawn from; the CSVs remain the
primary output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

_METRIC_LABELS = {
    "accuracy": "Accuracy",
    "non_inversion_proportion": "Proportion of non-inversions",
    "top1": "Top-1 proportion",
    "top2": "Top-2 proportion",
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path)
    plt.close(fig)
    return path


def _legend(ax):
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)


def _curve(ax, rows, metric, population, label_prefix=""):
    for length in sorted({r["length"] for r in rows}):
        sel = [r for r in rows if r["length"] == length and r["metric"] == metric
               and r["population"] == population and r["n"] > 0]
        if not sel:
            continue
        dims = np.array([r["embed_dim"] for r in sel])
        means = np.array([r["mean"] for r in sel], dtype=float)
        half = np.array([np.nan if r["ci_half"] is None else r["ci_half"] for r in sel], dtype=float)
        line, = ax.plot(dims, means, marker="o", label=f"{label_prefix}length {length}")
        ok = ~np.isnan(half)
        if ok.any():
            ax.fill_between(dims[ok], (means - half)[ok], (means + half)[ok], alpha=0.2, color=line.get_color())


def plot_report(rep, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    with plt.rc_context(STYLE):
        for metric, population in (("accuracy", "all"), ("non_inversion_proportion", "high_accuracy")):
            fig, ax = plt.subplots()
            _curve(ax, rep.rows, metric, population)
            ax.set_xscale("log", base=2)
            ax.set_xlabel("Embedding dimension")
            ax.set_ylabel(_METRIC_LABELS[metric])
            if metric == "non_inversion_proportion":
                ax.axhline(0.5, color="grey", lw=0.8, ls="--")
            _legend(ax)
            paths[f"{metric}_vs_dim.png"] = _save(fig, out_dir / f"{metric}_vs_dim.png")

        fig, ax = plt.subplots()
        _curve(ax, rep.rows, "top1", "high_accuracy", "top-1, ")
        _curve(ax, rep.rows, "top2", "high_accuracy", "top-2, ")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("Embedding dimension")
        ax.set_ylabel("Proportion of moves")
        _legend(ax)
        paths["topk_vs_dim.png"] = _save(fig, out_dir / "topk_vs_dim.png")

        fig, ax = plt.subplots()
        x = np.array([a.value("non_inversion_proportion") for a in rep.agents])
        y = np.array([a.value("top1") for a in rep.agents])
        ax.scatter(x, y, s=12, c=[np.log2(a.embed_dim) for a in rep.agents], cmap="viridis")
        if np.isfinite(rep.fit.slope):
            xs = np.linspace(x.min(), x.max(), 50)
            ax.plot(xs, rep.fit.slope * xs + rep.fit.intercept, color="k", lw=1,
                    label=f"$r^2$ = {rep.fit.r2:.2f}")
            ax.legend(frameon=False)
        ax.set_xlabel("Proportion of non-inversions")
        ax.set_ylabel("Top-1 proportion")
        paths["scatter.png"] = _save(fig, out_dir / "scatter.png")

        fig, ax = plt.subplots()
        for a in rep.agents:
            if a.value_loss:
                steps, losses = zip(*a.value_loss)
                ax.plot(steps, losses, lw=0.7, alpha=0.6)
        ax.set_xlabel("Global step")
        ax.set_ylabel("Clipped value loss")
        paths["value_loss.png"] = _save(fig, out_dir / "value_loss.png")
    return paths


def plot_trace_data(data, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    n = data.length
    grid = np.zeros((n, n))
    for r, c, w in data.heatmap:
        grid[r, c] = w
    paths = {}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.8, 3.4))
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(n), [str(t) for t in range(1, n + 1)])
        ax.set_yticks(range(n), [str(t) for t in range(1, n + 1)])
        ax.set_xlabel("Key token")
        ax.set_ylabel("Query token")
        fig.colorbar(im, ax=ax)
        paths["heatmap.png"] = _save(fig, out_dir / "heatmap.png")

        fig, ax = plt.subplots()
        groups = [[w for t, w in data.violin if t == token] for token in range(1, n + 1)]
        ax.violinplot(groups, positions=range(1, n + 1), showmeans=True)
        ax.set_xlabel("Token")
        ax.set_ylabel("Last-row attention weight")
        paths["violin.png"] = _save(fig, out_dir / "violin.png")
    return paths
