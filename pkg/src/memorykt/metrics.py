"""AUC, accuracy, Pearson correlation and the reconstruction case study."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def _records(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores, over pooled predictions."""
    s, y = _records(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of predictions with ``(score >= threshold) == label``."""
    s, y = _records(scores, labels)
    if s.size == 0:
        raise ValueError("accuracy of an empty record set")
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_r needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_r undefined for zero variance")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CaseStudy:
    student_ids: list
    recon_error: np.ndarray
    recon_quality: np.ndarray  # min-max of negated error: 1 = best reconstruction
    forget_score: np.ndarray
    accuracy_rate: np.ndarray
    r_quality_forget: float
    r_quality_accuracy: float
    r_forget_accuracy: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["student_id", "recon_quality", "forget_score", "accuracy_rate"])
            for row in zip(self.student_ids, self.recon_quality, self.forget_score,
                           self.accuracy_rate):
                w.writerow([row[0], *(f"{v:.10g}" for v in row[1:])])

    def correlations(self) -> dict:
        return {"r_quality_forget": self.r_quality_forget,
                "r_quality_accuracy": self.r_quality_accuracy,
                "r_forget_accuracy": self.r_forget_accuracy,
                "n_students": len(self.student_ids)}


def _safe_r(x, y) -> float:
    try:
        return pearson_r(x, y)
    except ValueError:
        return float("nan")


def reconstruction_errors(store, cfg, batch) -> np.ndarray:
    """Per-window-row sum and count of squared reconstruction error, shape [B, 2]."""
    from .model import forward_window

    out = forward_window(store, cfg, batch, mode="eval")
    err = np.stack([np.sum((s.x_hat.value - s.target.value) ** 2, axis=1) for s in out.steps],
                   axis=1)
    mask = batch.mask.astype(np.float64)
    return np.stack([(err * mask).sum(axis=1), mask.sum(axis=1)], axis=1)


def case_study(store, cfg, dataset, forgetting, n_students: int = 100, seed: int = 0,
               window: int = 50) -> CaseStudy:
    """Per sampled student: reconstruction quality, final forgetting score, correct rate."""
    from .data import window_sequences

    if n_students < 2:
        raise ValueError("case study needs at least 2 students")
    if n_students > len(dataset):
        raise ValueError(f"asked for {n_students} students, dataset has {len(dataset)}")
    if not cfg.use_vae:
        raise ValueError("case study needs the reconstruction branch")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(dataset), size=n_students, replace=False))
    sample = dataset.subset(picked)
    batch = window_sequences(sample, window, forgetting)
    per_row = reconstruction_errors(store, cfg, batch)
    sums = np.zeros(n_students)
    counts = np.zeros(n_students)
    np.add.at(sums, batch.student, per_row[:, 0])
    np.add.at(counts, batch.student, per_row[:, 1])
    err = sums / counts
    span = err.max() - err.min()
    quality = (err.max() - err) / span if span > 0 else np.ones_like(err)
    scores = np.array([forgetting.final_score(s) for s in sample.sequences])
    acc = np.array([s.corrects.mean() for s in sample.sequences])
    return CaseStudy(sample.student_ids, err, quality, scores, acc,
                     _safe_r(quality, scores), _safe_r(quality, acc), _safe_r(scores, acc))
