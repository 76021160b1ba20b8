"""Report figures: policy-comparison curves rendered to PNG files.

Uses the Agg backend so runs never need a display.  PNG metadata is
pinned so rerendering identical data yields identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

# fixed metadata keeps rerendered files byte-identical
_PNG_METADATA = {"Software": "epialloc"}
_DPI = 120


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def total_series_figure(path, t, series: dict, ylabel: str):
    """One curve per policy label: population-wide totals over time."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for label in sorted(series):
        ax.plot(t, series[label], label=label, linewidth=1.6)
    ax.set_xlabel("day")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    return _save(fig, path)


def per_pop_figure(path, t, per_pop: dict, pop_names, ylabel: str):
    """One panel per subpopulation; ``per_pop[label]`` is (K, T)."""
    k = len(pop_names)
    fig, axes = plt.subplots(
        1, k, figsize=(3.6 * k, 3.4), sharex=True, squeeze=False
    )
    for j, name in enumerate(pop_names):
        ax = axes[0, j]
        for label in sorted(per_pop):
            ax.plot(t, per_pop[label][j], label=label, linewidth=1.4)
        ax.set_title(name)
        ax.set_xlabel("day")
        ax.grid(alpha=0.25)
        if j == 0:
            ax.set_ylabel(ylabel)
            ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
