"""Figures for the report commands. Rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .scheduler import Cluster, SchedulerConfig  # noqa: E402

_STYLE = {"figure.figsize": (5.0, 4.0), "figure.dpi": 120, "axes.grid": True,
          "grid.alpha": 0.3, "font.size": 9, "savefig.bbox": "tight"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_plane(before: Cluster, after: Cluster, config: SchedulerConfig, path) -> Path:
    """Nodes on the logical/physical usage plane, before and after scheduling."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0), sharex=True, sharey=True)
        for ax, cluster, title in ((axes[0], before, "before"), (axes[1], after, "after")):
            xs = [n.logical_frac for n in cluster.nodes]
            ys = [n.physical_frac for n in cluster.nodes]
            ax.scatter(xs, ys, s=10, alpha=0.8)
            lcap = cluster.nodes[0].logical_capacity
            pcap = cluster.nodes[0].physical_capacity
            top = max(xs + [0.01]) * 1.1
            for c, style in ((config.c_l, "--"), (config.c_h, ":")):
                # physical fraction = logical fraction * lcap / (c * pcap)
                ax.plot([0, top], [0, top * lcap / (c * pcap)], style, color="gray",
                        label=f"ratio {c:g}")
            ax.axvline(config.block_threshold, color="red", lw=0.8)
            ax.axhline(config.block_threshold, color="red", lw=0.8)
            ax.set_title(title)
            ax.set_xlabel("logical usage")
        axes[0].set_ylabel("physical usage")
        axes[0].legend(loc="upper left")
        return _save(fig, Path(path))


def plot_in_range(series, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot([r.step for r in series], [r.in_range for r in series], marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel("fraction of nodes in range")
        ax.set_ylim(0, 1.05)
        return _save(fig, Path(path))


def plot_corpus(reports, path) -> Path:
    """Compression ratio per pipeline at each accounting layer."""
    layers = ("software", "aligned", "dual")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        width = 0.8 / len(layers)
        names = [r.pipeline.value for r in reports]
        for i, layer in enumerate(layers):
            xs = [j + i * width for j in range(len(reports))]
            ax.bar(xs, [r.ratio(layer) for r in reports], width, label=layer)
        ax.axhline(reports[0].ratio("device"), color="black", lw=0.8, ls="--", label="device only")
        ax.set_xticks([j + width for j in range(len(reports))], names)
        ax.set_ylabel("compression ratio")
        ax.legend()
        return _save(fig, Path(path))
