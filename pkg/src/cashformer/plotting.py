"""Report figures rendered to files (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import REPORT_SCALE, ExperimentResult  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_experiment_errors(results: list[ExperimentResult], path) -> Path:
    """Grouped bars of median error (x 10^3) with MAD whiskers."""
    experiments = list(dict.fromkeys(r.experiment for r in results))
    models = list(dict.fromkeys(r.model for r in results))
    cell = {(r.model, r.experiment): r for r in results if r.records}
    width = 0.8 / max(len(models), 1)
    x = np.arange(len(experiments))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(experiments), 2.8))
        for i, m in enumerate(models):
            stats = [cell[(m, e)].summary() if (m, e) in cell else (np.nan, np.nan) for e in experiments]
            med, mad = np.array(stats).T
            ax.bar(x + (i - (len(models) - 1) / 2) * width, med, width, yerr=mad, capsize=2, label=m)
        ax.set_xticks(x, experiments)
        ax.set_ylabel(r"median MAE $\times 10^3$")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_vertex_error(vertices: np.ndarray, field: np.ndarray, path, title: str = "") -> Path:
    """Template vertices coloured by mean absolute error, two orthogonal views."""
    v = np.asarray(vertices)
    f = np.asarray(field) * REPORT_SCALE
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.8))
        for ax, (i, j) in zip(axes, ((0, 1), (0, 2))):
            sc = ax.scatter(v[:, i], v[:, j], c=f, s=8, cmap="viridis")
            ax.set_aspect("equal")
            ax.set_xlabel("xyz"[i])
            ax.set_ylabel("xyz"[j])
        fig.colorbar(sc, ax=axes, label=r"MAE $\times 10^3$")
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_classification(scores: dict[str, list[float]], path) -> Path:
    """Box plot of balanced accuracy per arm over seeds."""
    arms = list(scores)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.4 + 0.9 * len(arms), 2.8))
        ax.boxplot([scores[a] for a in arms])
        ax.set_xticks(np.arange(1, len(arms) + 1), arms)
        ax.set_ylabel("balanced accuracy")
        ax.set_ylim(0.0, 1.05)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_all(out_dir, results: list[ExperimentResult], classification=None, template=None) -> dict[str, Path]:
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if any(r.records for r in results):
        written["fig_errors"] = plot_experiment_errors(results, fig_dir / "experiment_errors.png")
    if template is not None:
        for r in results:
            if r.vertex_error is not None:
                key = f"fig_vertex_{r.experiment}_{r.model}"
                written[key] = plot_vertex_error(template, r.vertex_error, fig_dir / f"{key[4:]}.png",
                                                 f"{r.experiment} / {r.model}")
    if classification is not None:
        written["fig_classification"] = plot_classification(classification.scores,
                                                            fig_dir / "classification.png")
    return written
