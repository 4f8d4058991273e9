"""Report figures, written next to the JSON/CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path)
    plt.close(fig)
    return path


def variant_metrics(report, path: Path) -> Path:
    """Per-seed metrics per variant, with the median marked."""
    variants = list(report.summary)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for i, v in enumerate(variants):
            vals = report.metrics(v)
            jitter = np.linspace(-0.12, 0.12, len(vals)) if len(vals) > 1 else [0.0]
            ax.plot(i + np.asarray(jitter), vals, "o", color=colors[i % len(colors)], alpha=0.7)
            ax.hlines(np.median(vals), i - 0.25, i + 0.25, color="k")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=30, ha="right")
        ax.set_ylabel(report.metric_name + (" (higher is better)" if report.higher_is_better else " (lower is better)"))
        return _save(fig, path)


def variant_sve(report, path: Path) -> Path:
    variants = list(report.summary)
    means = [report.summary[v]["sve_mean"] for v in variants]
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.bar(range(len(variants)), means, color=[colors[i % len(colors)] for i in range(len(variants))])
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=30, ha="right")
        ax.set_ylabel("SVE of test representations (nats)")
        return _save(fig, path)


def sve_vs_metric(report, path: Path) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for i, v in enumerate(report.summary):
            rows = [r for r in report.rows if r["variant"] == v]
            ax.plot([r["sve"] for r in rows], [r["metric"] for r in rows], "o", label=v,
                    color=colors[i % len(colors)])
        ax.set_xlabel("SVE (nats)")
        ax.set_ylabel(report.metric_name)
        ax.legend()
        return _save(fig, path)


def render_report(report, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "fig_metrics": variant_metrics(report, directory / "metrics.png"),
        "fig_sve": variant_sve(report, directory / "sve.png"),
        "fig_sve_vs_metric": sve_vs_metric(report, directory / "sve_vs_metric.png"),
    }


def noise_study(rows: list[dict], path: str | Path, metric_name: str = "metric") -> Path:
    ratios = sorted(set(r["ratio"] for r in rows))
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for ratio in ratios:
            vals = [r["metric"] for r in rows if r["ratio"] == ratio]
            ax.plot([ratio] * len(vals), vals, ".", color=colors[0], alpha=0.4)
        ax.plot(ratios, [np.median([r["metric"] for r in rows if r["ratio"] == q]) for q in ratios],
                "-o", color=colors[1], label="median")
        ax.set_xlabel("feature noise ratio")
        ax.set_ylabel(metric_name)
        ax.legend()
        return _save(fig, Path(path))
