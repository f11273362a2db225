"""Report figures rendered to files next to the delimited output.

Three figure families: per-component effect curves with pointwise 95%
bands, hyperparameter posterior summaries, and cross-validation score
profiles across folds.  All rendering uses the Agg backend and strips
timestamps from the PNG metadata so reruns are byte-identical.
"""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path: str):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_effect(name: str, labels, mean, lo, hi, out_dir: str) -> str:
    """One structured-block effect curve with a 95% interval band."""
    n = len(mean)
    x = np.arange(n)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.fill_between(x, lo, hi, alpha=0.25, color="tab:blue", linewidth=0)
    ax.plot(x, mean, color="tab:blue", lw=1.5)
    ax.axhline(0.0, color="0.5", lw=0.8, ls=":")
    ax.set_ylabel("posterior effect")
    ax.set_title(name)
    if labels and n <= 40:
        ax.set_xticks(x)
        ax.set_xticklabels([str(l) for l in labels], rotation=90, fontsize=6)
    else:
        ax.set_xlabel("coordinate")
    fig.tight_layout()
    path = os.path.join(out_dir, f"effects_{name}.png")
    _save(fig, path)
    return path


def plot_theta(names, means, sds, q025, q975, out_dir: str) -> str:
    """Interval plot of the hyperparameter posterior (original scale)."""
    k = len(names)
    y = np.arange(k)[::-1]
    fig, ax = plt.subplots(figsize=(6.0, 1.2 + 0.6 * k))
    ax.errorbar(means, y, xerr=[np.asarray(means) - np.asarray(q025),
                                np.asarray(q975) - np.asarray(means)],
                fmt="o", color="tab:red", ecolor="0.4", capsize=3)
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.set_xlabel("posterior mean and 95% interval")
    ax.set_title("hyperparameters")
    fig.tight_layout()
    path = os.path.join(out_dir, "theta_posterior.png")
    _save(fig, path)
    return path


def plot_cv_scores(fold_rows, out_dir: str) -> str:
    """Per-fold score profiles, one panel per metric."""
    metrics = ("auc_grid", "auc_su", "rsa_grid", "rsa_su",
               "rss_grid", "rss_su", "crps_grid", "crps_su")
    folds = [r["fold"] for r in fold_rows]
    fig, axes = plt.subplots(2, 4, figsize=(11.0, 5.0), sharex=True)
    for ax, m in zip(axes.ravel(), metrics):
        vals = [r[m] for r in fold_rows]
        ax.plot(folds, vals, "o-", ms=3, lw=1.0, color="tab:green")
        ax.set_title(m, fontsize=9)
        ax.tick_params(labelsize=7)
    for ax in axes[1]:
        ax.set_xlabel("fold", fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "cv_scores.png")
    _save(fig, path)
    return path
