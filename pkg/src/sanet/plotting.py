"""Matplotlib figures written next to the CSV outputs of ``report`` and ``map``."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

# no timestamps or version strings, so reruns give identical files
_PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_comparison(path, reports: Sequence[tuple[str, MetricsReport]], attribute: str) -> None:
    """Grouped bars of Z0/Z1 MPE per run, with overall MAE on a second axis."""
    labels = [name for name, _ in reports]
    z0 = [rep.get(f"group:{attribute}:Z0", "mpe") for _, rep in reports]
    z1 = [rep.get(f"group:{attribute}:Z1", "mpe") for _, rep in reports]
    mae = [rep.mae for _, rep in reports]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels) + 2), 3.5))
    ax.bar(x - 0.2, z0, width=0.4, label="Z0 (disadvantaged)", color="#c0504d")
    ax.bar(x + 0.2, z1, width=0.4, label="Z1 (privileged)", color="#4f81bd")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(f"MPE by {attribute} group")
    twin = ax.twinx()
    twin.plot(x, mae, "ko-", label="MAE")
    twin.set_ylabel("MAE (trips)")
    handles = ax.get_legend_handles_labels()[0] + twin.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], fontsize=8, loc="best")
    fig.tight_layout()
    _save(fig, path)


def plot_mpe_map(path, field: np.ndarray, title: str = "") -> None:
    """Diverging heatmap of the per-cell MPE; undefined cells are left blank."""
    field = np.asarray(field, dtype=np.float64)
    finite = field[np.isfinite(field)]
    bound = float(np.abs(finite).max()) if finite.size else 1.0
    bound = bound or 1.0
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    image = ax.imshow(np.ma.masked_invalid(field), cmap="RdBu_r", vmin=-bound, vmax=bound,
                      interpolation="nearest")
    fig.colorbar(image, ax=ax, label="MPE")
    ax.set_xlabel("col")
    ax.set_ylabel("row")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
