"""Figure rendering for reports: ERF heatmaps, training curves, result bars."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
HEATMAP_CMAP = "Blues"


def figsize(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def color_density(values, vmax=None):
    """Map |values| onto [0, 1]; all-zero input maps to 0 everywhere."""
    mags = np.abs(np.asarray(values, dtype=np.float64))
    vmax = float(mags.max(initial=0.0)) if vmax is None else float(vmax)
    if vmax <= 0:
        return np.zeros_like(mags)
    return np.clip(mags / vmax, 0.0, 1.0)


def heatmap_rgba(grads, vmax=None, cmap=HEATMAP_CMAP):
    return plt.get_cmap(cmap)(color_density(grads, vmax))


def erf_heatmap(grads, magnitude, path, title=None, window=None, vmax=None):
    """Features x time heatmap of |gradient| with the per-step magnitude below.

    ``vmax`` fixes the color scale (for shared scales across panels).
    """
    grads = np.asarray(grads)
    L, m = grads.shape
    with plt.rc_context(STYLE):
        rows = 3 if window is not None else 2
        ratios = [1, 2, 1] if window is not None else [2, 1]
        fig, axes = plt.subplots(rows, 1, figsize=figsize(1.0, 0.6 if rows == 2 else 0.8),
                                 sharex=True, gridspec_kw={"height_ratios": ratios})
        ax_iter = iter(axes)
        if window is not None:
            ax = next(ax_iter)
            ax.plot(np.arange(L), np.asarray(window), lw=0.8)
            ax.set_ylabel("input")
        ax = next(ax_iter)
        ax.imshow(heatmap_rgba(grads.T, vmax), aspect="auto", interpolation="nearest",
                  extent=(-0.5, L - 0.5, m - 0.5, -0.5))
        ax.set_ylabel("feature")
        ax = next(ax_iter)
        ax.imshow(heatmap_rgba(np.asarray(magnitude)[None, :]), aspect="auto",
                  interpolation="nearest", extent=(-0.5, L - 0.5, 0.5, -0.5))
        ax.set_yticks([])
        ax.set_ylabel("norm")
        ax.set_xlabel("input timestamp")
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def training_curves(epochs, path, title=None):
    """Train/validation MSE per epoch from a TrainReport's epoch rows."""
    ep = [r["epoch"] for r in epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ax.plot(ep, [r["train_mse"] for r in epochs], marker="o", ms=3, label="train MSE")
        ax.plot(ep, [r["val_mse"] for r in epochs], marker="o", ms=3, label="val MSE")
        if any(r.get("train_sscl", 0) for r in epochs):
            ax.plot(ep, [r["train_sscl"] for r in epochs], ls="--", label="train SSCL")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.legend()
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def results_bars(table, path, metric="mse"):
    """Average metric per method as a bar chart."""
    methods = list(table.methods)
    values = [table.average(m)[metric] for m in methods]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ax.bar(np.arange(len(methods)), values, color="0.4")
        ax.set_xticks(np.arange(len(methods)))
        ax.set_xticklabels(methods, rotation=30, ha="right")
        ax.set_ylabel(f"average {metric.upper()}")
        fig.savefig(path)
        plt.close(fig)
    return path
