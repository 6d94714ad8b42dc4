"""Figures written next to CLI reports."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)
    return path


def plot_success_by_category(per_category: Mapping[str, tuple[int, int]], path: str | Path) -> Path:
    """Bar chart of success rate (percent) per category; values are (passed, total)."""
    names = list(per_category)
    rates = [100 * p / t if t else 0.0 for p, t in per_category.values()]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(names, rates, color="#4c72b0")
    for bar, (p, t) in zip(bars, per_category.values()):
        ax.annotate(f"{p}/{t}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 112)
    ax.set_ylabel("success rate (%)")
    ax.set_title("Success rate by category")
    return _save(fig, Path(path))


def plot_category_histogram(counts: Mapping[str, Mapping[str, int]], path: str | Path) -> Path:
    """Grouped bars: one group per category, one bar per corpus."""
    corpora = list(counts)
    cats = sorted({c for v in counts.values() for c in v})
    width = 0.8 / max(len(corpora), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for i, name in enumerate(corpora):
        xs = [j + i * width for j in range(len(cats))]
        ax.bar(xs, [counts[name].get(c, 0) for c in cats], width, label=name)
    ax.set_xticks([j + width * (len(corpora) - 1) / 2 for j in range(len(cats))], cats)
    ax.set_ylabel("tasks")
    ax.legend(fontsize=8)
    ax.set_title("Tasks per category")
    return _save(fig, Path(path))


def plot_length_histogram(lengths: Mapping[str, Sequence[int]], path: str | Path, bins: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for name, values in lengths.items():
        ax.hist(values, bins=bins, alpha=0.6, label=name)
    ax.set_xlabel("whitespace tokens")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.set_title("Length distribution")
    return _save(fig, Path(path))


def plot_diversity_vs_success(names: Sequence[str], diversity: Sequence[float], success: Sequence[float],
                              r: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter(diversity, success, color="#dd8452")
    for n, x, y in zip(names, diversity, success):
        ax.annotate(n, (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("3-gram diversity ratio")
    ax.set_ylabel("success rate")
    ax.set_title(f"Diversity vs success (r = {r:.2f})")
    return _save(fig, Path(path))


def plot_tries(tries: Sequence[int], path: str | Path) -> Path:
    """Histogram of tries charged per instance during collection."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    top = max(tries, default=1)
    ax.hist(tries, bins=range(0, top + 2), align="left", rwidth=0.8, color="#55a868")
    ax.set_xlabel("tries per instance")
    ax.set_ylabel("instances")
    ax.set_title("Collection effort")
    return _save(fig, Path(path))
