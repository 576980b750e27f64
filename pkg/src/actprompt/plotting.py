"""Figure rendering for the report paths (files only, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def attention_grid(maps: dict[str, np.ndarray], selected: dict[str, list[int]], path, title=""):
    """Heatmap per (stream, layer); ``maps[stream]`` is ``[N_L, g, g]``.

    All panels share one colour scale so equal values get equal shades.
    """
    streams = list(maps)
    n_layers = max(m.shape[0] for m in maps.values())
    vmax = max(float(m.max()) for m in maps.values()) or 1.0
    fig, axes = plt.subplots(len(streams), n_layers, figsize=(2.2 * n_layers, 2.3 * len(streams)),
                             squeeze=False)
    for r, stream in enumerate(streams):
        for l in range(n_layers):
            ax = axes[r][l]
            ax.set_xticks([])
            ax.set_yticks([])
            if l >= maps[stream].shape[0]:
                ax.axis("off")
                continue
            grid = maps[stream][l]
            im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=vmax)
            g = grid.shape[1]
            y, x = divmod(selected[stream][l], g)
            ax.scatter([x], [y], marker="x", c="red", s=60)
            ax.set_title(f"{stream} layer {l + 1}", fontsize=8)
    fig.colorbar(im, ax=axes, shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def loss_curve(history: list[dict], path, keys=("l_total", "l_ce", "l_tri", "l_con")):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = np.arange(len(history))
    for k in keys:
        ax.plot(steps, [h[k] for h in history], label=k, marker=".")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def metric_bars(metrics: dict[str, float], path, title=""):
    names = [k for k in metrics if k != "excluded"]
    fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(names)), 3.0))
    ax.bar(names, [metrics[k] for k in names], color="tab:blue")
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.tick_params(axis="x", labelsize=7, rotation=30)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path
