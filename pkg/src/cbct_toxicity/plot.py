import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from cbct_toxicity.common import CLINICAL_BRANCH, Columns  # noqa: E402
from cbct_toxicity.evalx.metrics import EvolutionTable  # noqa: E402


def get_bar_colors(combinations):
    """Grey for the clinical-only baseline, teal for image-based combinations"""
    colors = []
    for combination in combinations:
        if combination == CLINICAL_BRANCH:
            colors.append("#d9d9d9")
        else:
            colors.append("#4fb3a9")
    return colors


def plot_ablation(aggregate_df: pd.DataFrame, title: str = "Branch ablation"):
    fig, ax = plt.subplots(figsize=(10, 6))
    colors = get_bar_colors(aggregate_df[Columns.COMBINATION])

    bars = ax.bar(
        aggregate_df[Columns.COMBINATION],
        aggregate_df[Columns.BACC_MEAN] * 100,
        yerr=aggregate_df[Columns.BACC_STD] * 100,
        color=colors,
        alpha=0.8,
        edgecolor="black",
        linewidth=0.5,
        capsize=4,
    )

    ax.set_title(title, fontsize=14, fontweight="bold", pad=20)
    ax.set_xlabel(Columns.COMBINATION, fontsize=12)
    ax.set_ylabel("balanced accuracy (%)", fontsize=12)

    for bar in bars:
        height = bar.get_height()
        ax.text(
            bar.get_x() + bar.get_width() / 2.0,
            height + 1,
            f"{height:.1f}%",
            ha="center",
            va="bottom",
            fontsize=10,
        )

    plt.xticks(rotation=45, ha="right")
    ax.axhline(50, color="grey", linestyle=":", linewidth=1)
    ax.grid(axis="y", alpha=0.3, linestyle="--")
    ax.set_axisbelow(True)
    ax.set_ylim(0, 105)

    plt.tight_layout()
    return fig


def plot_evolution(table: EvolutionTable, title: str = "Risk evolution"):
    fig, ax = plt.subplots(figsize=(10, 6))
    fractions = np.asarray(table.fractions, dtype=float)
    means = np.asarray(table.bacc_mean) * 100
    stds = np.asarray(table.bacc_std) * 100

    ax.errorbar(
        fractions, means, yerr=stds, fmt="o", color="#4fb3a9", ecolor="black", capsize=4
    )
    if np.isfinite(table.slope):
        xs = fractions[fractions > 0]
        ax.plot(
            xs,
            (table.slope * xs + table.intercept) * 100,
            color="#e07a5f",
            linestyle="--",
            label=f"linear fit, r² = {table.r2:.3f}",
        )
        ax.legend(loc="lower right")

    ax.set_title(f"{title} ({table.target})", fontsize=14, fontweight="bold", pad=20)
    ax.set_xlabel(Columns.FRACTION, fontsize=12)
    ax.set_ylabel("balanced accuracy (%)", fontsize=12)
    ax.set_xticks(fractions)
    ax.grid(alpha=0.3, linestyle="--")
    ax.set_axisbelow(True)

    # Keep chance level in view
    y_min = min(45.0, float(np.min(means - stds)) - 5)
    y_max = max(55.0, float(np.max(means + stds)) + 5)
    ax.set_ylim(max(0.0, y_min), min(105.0, y_max))

    plt.tight_layout()
    return fig


def save_figure(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)
