"""Matplotlib figure rendering for the report path.

Figures land next to the delimited output as PNG.  The Agg backend is forced
so rendering works headless, and savefig metadata is pinned so repeated runs
of the same experiment produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": "mpopf"})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def affinity_heatmap(a: np.ndarray, bus_ids, path) -> Path:
    """Bus-affinity matrix on a log color scale (zero diagonal masked)."""
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    masked = np.ma.masked_where(a <= 0, a)
    im = ax.imshow(masked, cmap="viridis",
                   norm=matplotlib.colors.LogNorm() if masked.count() else None)
    ticks = range(len(bus_ids))
    ax.set_xticks(ticks, [str(b) for b in bus_ids], fontsize=7)
    ax.set_yticks(ticks, [str(b) for b in bus_ids], fontsize=7)
    ax.set_xlabel("bus")
    ax.set_ylabel("bus")
    ax.set_title("bus affinity")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def per_step_series(series_by_label: dict[str, list[float]], ylabel: str,
                    path, title: str = "") -> Path:
    """Per-MPC-step lines (convergence time or iterations) per method."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label in sorted(series_by_label):
        vals = series_by_label[label]
        ax.plot(range(len(vals)), vals, marker=".", lw=1.0, ms=4, label=label)
    ax.set_xlabel("time step")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def iterations_bars(rows, path) -> Path:
    """Grouped average-iteration bars per horizon and method/partition
    (the comparison-table figure)."""
    labels = sorted({f"{r[1]}/{r[2]}" if r[2] else str(r[1]) for r in rows})
    horizons = sorted({int(r[0]) for r in rows})
    width = 0.8 / max(1, len(labels))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for j, lab in enumerate(labels):
        vals = []
        for N in horizons:
            match = [r for r in rows
                     if int(r[0]) == N
                     and (f"{r[1]}/{r[2]}" if r[2] else str(r[1])) == lab]
            vals.append(match[0][5] if match else np.nan)
        pos = np.arange(len(horizons)) + j * width
        ax.bar(pos, vals, width=width, label=lab)
    ax.set_xticks(np.arange(len(horizons)) + 0.4 - width / 2,
                  [f"N={N}" for N in horizons])
    ax.set_ylabel("average iterations")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def storage_levels(e_by_label: dict[str, np.ndarray], path) -> Path:
    """Applied storage energy trajectory per horizon (the storage figure)."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label in sorted(e_by_label):
        e = np.asarray(e_by_label[label])
        ax.plot(range(len(e)), e, marker=".", lw=1.0, ms=4, label=label)
    ax.set_xlabel("time step")
    ax.set_ylabel("storage energy (p.u. interval)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
