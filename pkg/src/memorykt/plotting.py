"""Report figures written next to the CSV/JSON artifacts."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.grid": True,
    "grid.linewidth": 0.3,
    "grid.alpha": 0.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# PNG metadata without a software/version stamp keeps files byte-stable
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def training_curves(report, path) -> None:
    epochs = [row["epoch"] for row in report.epochs]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("loss", "pred", "recon", "kl"):
            ax1.plot(epochs, [row[key] for row in report.epochs], label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("training loss")
        ax1.set_yscale("log")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [row["valid_auc"] for row in report.epochs], label="AUC")
        ax2.plot(epochs, [row["valid_acc"] for row in report.epochs], label="ACC")
        ax2.axvline(report.best_epoch, color="0.5", lw=0.8, ls="--")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation")
        ax2.legend(frameon=False)
        _save(fig, path)


def forget_histogram(scores, population, path) -> None:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.hist(scores, bins=30, color="#0072B2", alpha=0.8)
        for q in np.quantile(population, np.linspace(0.1, 0.9, 9)):
            ax.axvline(q, color="0.4", lw=0.5, ls=":")
        ax.set_xlabel("final forgetting score")
        ax.set_ylabel("students")
        _save(fig, path)


def case_study_scatter(study, path) -> None:
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        panels = ((study.forget_score, "forgetting score", study.r_quality_forget),
                  (study.accuracy_rate, "correct rate", study.r_quality_accuracy))
        n = len(study.student_ids)
        for ax, (y, label, r) in zip(axes, panels):
            ax.scatter(study.recon_quality, y, s=10, color="#D55E00", alpha=0.7)
            ax.set_xlabel("reconstruction quality (normalized)")
            ax.set_ylabel(label)
            ax.set_title(f"N={n}, r={r:.3f}")
        _save(fig, path)
