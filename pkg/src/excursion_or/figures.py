"""Study-report figures rendered next to the metrics table.

Uses the object-oriented matplotlib API with the Agg canvas directly, so no
global pyplot state is touched and the written PNG bytes depend only on the
metric values (replication output stays byte-reproducible).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .results import Z_CRIT

_COLORS = ("#3465a4", "#cc0000", "#4e9a06", "#75507b", "#c17d11", "#555753")


def render_study_figures(rows, out_dir) -> list[Path]:
    """One three-panel figure (bias, MSE, coverage) per scenario in ``rows``.

    ``rows`` is any iterable of metric rows (one per estimator and
    coefficient).  Returns the written paths, sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_scenario: dict[str, list] = {}
    for row in rows:
        by_scenario.setdefault(row.scenario, []).append(row)

    written: list[Path] = []
    for scenario in sorted(by_scenario):
        group = by_scenario[scenario]
        labels = [f"{r.estimator}\n{r.coefficient}" for r in group]
        xs = np.arange(len(group))
        colors = [_COLORS[i % len(_COLORS)] for i in range(len(group))]

        fig = Figure(figsize=(3.2 * 3, 3.4), dpi=110)
        axes = fig.subplots(1, 3)

        ax = axes[0]
        bias = [r.bias for r in group]
        err = [Z_CRIT * r.bias_mc_se for r in group]
        ax.bar(xs, bias, yerr=err, color=colors, capsize=3)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_title("bias")

        ax = axes[1]
        ax.bar(xs, [r.mse for r in group], color=colors)
        ax.set_title("MSE")

        ax = axes[2]
        cov = [r.coverage for r in group]
        cov_err = [Z_CRIT * r.coverage_mc_se for r in group]
        ax.bar(xs, cov, yerr=cov_err, color=colors, capsize=3)
        ax.axhline(0.95, color="black", linewidth=0.8, linestyle="--")
        ax.set_ylim(0.0, 1.05)
        ax.set_title("95% coverage")

        for ax in axes:
            ax.set_xticks(xs)
            ax.set_xticklabels(labels, fontsize=7)
            ax.tick_params(labelsize=8)
        impl = group[0].implementation
        fig.suptitle(f"{scenario} (implementation {impl}, n={group[0].n})", fontsize=10)
        fig.tight_layout(rect=(0, 0, 1, 0.94))

        path = out / f"study_{scenario.replace('/', '_')}_{impl}.png"
        FigureCanvasAgg(fig).print_png(str(path))
        written.append(path)
    return sorted(written)
