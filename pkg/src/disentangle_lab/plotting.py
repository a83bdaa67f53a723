"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import GDVReport  # noqa: E402

STYLE = {
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # reproducible PNG bytes
    "svg.hashsalt": "disentangle-lab",
}

COLORS = {"baseline": "#4c72b0", "usd": "#dd8452", "nusd": "#55a868"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_gdv(reports: Sequence[GDVReport], path) -> Path:
    """Speaker and condition separability per layer, one line per model."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.0), sharex=True)
        for rep in reports:
            x = np.arange(len(rep.entries))
            label = rep.model_tag or "model"
            color = COLORS.get(rep.model_tag)
            axes[0].plot(x, [e.speaker_gdv for e in rep.entries], "o-", label=label, color=color)
            axes[1].plot(x, [e.mdd_gdv for e in rep.entries], "o-", label=label, color=color)
        layers = reports[0].layers if reports else []
        for ax, title in zip(axes, ("speaker separability", "condition separability")):
            ax.set_title(title)
            ax.set_xticks(np.arange(len(layers)))
            ax.set_xticklabels(layers, rotation=40, ha="right")
            ax.set_ylabel("GDV (sign-flipped)")
        axes[1].legend()
        return _save(fig, path)


def plot_beta_sweep(rows: Sequence[Mapping], path) -> Path:
    """Macro F1 (and probe accuracy when present) against beta on a log axis."""
    betas = np.array([r["beta"] for r in rows], dtype=float)
    order = np.argsort(betas)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(betas[order], np.array([r["f1_avg"] for r in rows])[order], "o-", color=COLORS["nusd"], label="F1-AVG")
        probe = [r.get("probe_accuracy") for r in rows]
        if all(p is not None for p in probe):
            ax.plot(betas[order], np.array(probe, dtype=float)[order], "s--", color="0.4", label="probe accuracy")
        ax.axvline(1.0, color="0.7", linewidth=0.6)
        ax.set_xscale("log")
        ax.set_xlabel(r"$\beta = \lambda_1 / \lambda_2$")
        ax.set_ylabel("score")
        ax.set_ylim(0, 1.05)
        ax.legend()
        return _save(fig, path)


def plot_training_log(records: Sequence[Mapping], path) -> Path:
    """Per-member loss curves from the JSON-lines training log."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        members = sorted({r["member"] for r in records})
        for m in members:
            rs = [r for r in records if r["member"] == m]
            ep = [r["epoch"] for r in rs]
            axes[0].plot(ep, [r["l_mdd"] for r in rs], label=f"member {m}")
            axes[1].plot(ep, [r["l_spk"] for r in rs])
        axes[0].set_ylabel(r"$L_{MDD}$")
        axes[1].set_ylabel(r"$L_{SPK}$")
        for ax in axes:
            ax.set_xlabel("epoch")
        axes[0].legend()
        return _save(fig, path)
