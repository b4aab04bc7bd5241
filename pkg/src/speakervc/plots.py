"""SVG figures: DET curve with the EER point, and per-stage training loss curves.

Output is byte-stable across runs: the SVG id salt is fixed and no creation
date is written.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import compute_eer, det_points  # noqa: E402

_RC = {"svg.hashsalt": "speakervc", "svg.fonttype": "path"}
_META = {"Date": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_det(scores, labels, path, title: str = "DET") -> float:
    """Write a DET curve (FRR against FAR, in percent); returns the EER."""
    points = det_points(scores, labels)
    eer, _ = compute_eer(scores, labels)
    far = np.array([p[1] for p in points]) * 100
    frr = np.array([p[2] for p in points]) * 100
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(far, frr, lw=1.5, label="DET")
        ax.plot([0, 100], [0, 100], ls=":", c="grey", lw=0.8)
        ax.plot([eer * 100], [eer * 100], "o", c="C3", label=f"EER {100 * eer:.2f} %")
        ax.set_xlabel("false accept rate (%)")
        ax.set_ylabel("false reject rate (%)")
        ax.set_xlim(0, 100)
        ax.set_ylim(0, 100)
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)
    return eer


def plot_losses(history: dict, path, title: str = "training loss") -> None:
    """``history`` maps a curve label to a list of per-epoch losses."""
    if not history:
        raise ValueError("no loss history to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, values in history.items():
            ax.plot(np.arange(1, len(values) + 1), values, marker=".", label=str(label))
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
