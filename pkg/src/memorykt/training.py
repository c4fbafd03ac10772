"""Objective, optimizer and the early-stopped training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamStore, Tape, Tensor
from .data import Dataset, SequenceBatch, window_sequences
from .forgetting import Forgetting
from .metrics import accuracy, auc
from .model import ModelConfig, WindowOutput, forward_window, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_rec: float = 0.5
    lambda_kld: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    dropout: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    window: int = 50
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_kld < 0:
            raise ValueError("loss weights must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _sum(terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_recon(x_hat_seq: list, x_seq: list, mask) -> Tensor:
    """Squared L2 distance summed over dims, averaged over unmasked steps."""
    mask = np.asarray(mask)
    count = mask.sum()
    if count == 0:
        raise ValueError("reconstruction loss over an all-padding batch")
    terms = [ad.masked_sq_error(_as_tensor(xh), _as_tensor(x), mask[:, t])
             for t, (xh, x) in enumerate(zip(x_hat_seq, x_seq))]
    return ad.scale(_sum(terms), 1.0 / count)


def loss_kl(mu_e_seq: list, sig_e_seq: list, mu_p_seq: list, sig_p_seq: list, mask) -> Tensor:
    """Closed-form Gaussian KL summed over latent dims, averaged over unmasked steps."""
    mask = np.asarray(mask)
    count = mask.sum()
    if count == 0:
        raise ValueError("KL loss over an all-padding batch")
    terms = []
    for t, parts in enumerate(zip(mu_e_seq, sig_e_seq, mu_p_seq, sig_p_seq)):
        mu_e, sig_e, mu_p, sig_p = (_as_tensor(x) for x in parts)
        if np.any(sig_e.value <= 0) or np.any(sig_p.value <= 0):
            raise ValueError("standard deviations must be positive")
        terms.append(ad.gaussian_kl(mu_e, sig_e, mu_p, sig_p, mask[:, t]))
    return ad.scale(_sum(terms), 1.0 / count)


def loss_pred(p_seq: list, concepts, corrects, mask) -> Tensor:
    """BCE of p_t[c_{t+1}] against r_{t+1}, averaged over valid (t, t+1) pairs."""
    concepts, corrects, mask = (np.asarray(a) for a in (concepts, corrects, mask))
    T = concepts.shape[1]
    if T < 2:
        raise ValueError("prediction loss needs at least two timesteps")
    pair_mask = mask[:, 1:] * mask[:, :-1]
    count = pair_mask.sum()
    if count == 0:
        raise ValueError("no valid (t, t+1) prediction pairs")
    terms = [ad.masked_bce(ad.select(_as_tensor(p_seq[t]), concepts[:, t + 1]),
                           corrects[:, t + 1], pair_mask[:, t])
             for t in range(T - 1)]
    return ad.scale(_sum(terms), 1.0 / count)


def total_loss(recon, kl, pred, cfg: TrainConfig) -> Tensor:
    out = _as_tensor(pred)
    if recon is not None and cfg.lambda_rec:
        out = ad.add(out, ad.scale(_as_tensor(recon), cfg.lambda_rec))
    if kl is not None and cfg.lambda_kld:
        out = ad.add(out, ad.scale(_as_tensor(kl), cfg.lambda_kld))
    return out


def window_losses(out: WindowOutput, model_cfg: ModelConfig) -> tuple:
    """(recon, kl, pred) for a forward pass; the first two are None without the VAE."""
    b = out.batch
    steps = out.steps
    pred = loss_pred([s.p for s in steps], b.concept, b.correct, b.mask)
    if not model_cfg.use_vae:
        return None, None, pred
    recon = loss_recon([s.x_hat for s in steps], [s.target for s in steps], b.mask)
    kl = loss_kl([s.mu_enc for s in steps], [s.sigma_enc for s in steps],
                 [s.mu_prior for s in steps], [s.sigma_prior for s in steps], b.mask)
    return recon, kl, pred


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(store: ParamStore, max_norm: float) -> float:
    norm = global_norm(store.grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for g in store.grads.values():
            g *= factor
    return norm


def adam_step(store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Adam with bias correction and decoupled weight decay, using ``store.grads``.

    Raises NonFiniteError (leaving the store untouched) on non-finite gradients.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    scores: np.ndarray
    labels: np.ndarray
    rows: np.ndarray  # window row of each prediction


def predictions(store: ParamStore, cfg: ModelConfig, batch: SequenceBatch,
                chunk: int = 256) -> Predictions:
    """Eval-mode p_t[c_{t+1}] at every valid (t, t+1) pair, pooled."""
    scores, labels, rows = [], [], []
    for lo in range(0, len(batch), chunk):
        idx = np.arange(lo, min(lo + chunk, len(batch)))
        sub = batch.rows(idx)
        probs = forward_window(store, cfg, sub, mode="eval").probabilities()
        pair = (sub.mask[:, 1:] * sub.mask[:, :-1]) > 0
        b, t = np.nonzero(pair)
        scores.append(probs[b, t, sub.concept[b, t + 1]])
        labels.append(sub.correct[b, t + 1])
        rows.append(idx[b])
    return Predictions(np.concatenate(scores), np.concatenate(labels), np.concatenate(rows))


def evaluate_batch(store: ParamStore, cfg: ModelConfig, batch: SequenceBatch) -> dict:
    pr = predictions(store, cfg, batch)
    return {"auc": auc(pr.scores, pr.labels), "acc": accuracy(pr.scores, pr.labels),
            "n_predictions": int(pr.scores.size)}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float = float("nan")
    stop_reason: str = ""
    skipped_steps: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2) + "\n")
        if csv_path is not None and self.epochs:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.epochs[0]))
                w.writeheader()
                w.writerows(self.epochs)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def build_windows(d: Dataset, window: int, forgetting: Forgetting | None) -> SequenceBatch:
    return window_sequences(d, window, forgetting)


def train_step(store: ParamStore, model_cfg: ModelConfig, cfg: TrainConfig,
               batch: SequenceBatch, noise_seed: int) -> tuple:
    tape = Tape()
    out = forward_window(store, model_cfg, batch, mode="train", noise_seed=noise_seed,
                         dropout=cfg.dropout, tape=tape)
    recon, kl, pred = window_losses(out, model_cfg)
    loss = total_loss(recon, kl, pred, cfg)
    values = (float(loss.value),
              float(recon.value) if recon is not None else 0.0,
              float(kl.value) if kl is not None else 0.0,
              float(pred.value))
    if not math.isfinite(values[0]):
        return values, False
    store.zero_grad()
    tape.backward(loss)
    clip_grads(store, cfg.clip_norm)
    try:
        adam_step(store, cfg.learning_rate, weight_decay=cfg.weight_decay)
    except NonFiniteError as err:
        log.warning("skipping optimizer step: %s", err)
        return values, False
    return values, True


def train(train_data: Dataset, valid_data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          forgetting: Forgetting | None = None) -> tuple[ParamStore, TrainReport]:
    """Fit on ``train_data`` and keep the parameters with the best validation AUC.

    Forgetting levels come from ``forgetting`` (fitted on ``train_data`` when
    omitted).
    """
    if len(train_data) == 0 or len(valid_data) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if forgetting is None:
        forgetting = Forgetting.fit(train_data)
    train_windows = build_windows(train_data, cfg.window, forgetting)
    valid_windows = build_windows(valid_data, cfg.window, forgetting)
    rng = np.random.default_rng(cfg.seed)
    store = init_params(model_cfg, seed=cfg.seed)
    best = store.copy()
    report = TrainReport()
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        sums = np.zeros(4)
        n = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = train_windows.rows(order[lo:lo + cfg.batch_size])
            if (batch.mask[:, 1:] * batch.mask[:, :-1]).sum() == 0:
                continue
            values, ok = train_step(store, model_cfg, cfg, batch, int(rng.integers(2**31)))
            if not math.isfinite(values[0]):
                report.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", report)
            if not ok:
                report.skipped_steps += 1
            sums += values
            n += 1
        metrics = evaluate_batch(store, model_cfg, valid_windows)
        loss, recon, kl, pred = sums / max(n, 1)
        report.epochs.append({"epoch": epoch, "loss": loss, "recon": recon, "kl": kl,
                              "pred": pred, "valid_auc": metrics["auc"],
                              "valid_acc": metrics["acc"]})
        log.info("epoch %d loss=%.4f recon=%.4f kl=%.4f pred=%.4f valid_auc=%.4f",
                 epoch, loss, recon, kl, pred, metrics["auc"])
        if not report.best_epoch or metrics["auc"] > report.best_auc:
            report.best_epoch, report.best_auc = epoch, metrics["auc"]
            best = store.copy()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                report.stop_reason = "patience"
                break
    else:
        report.stop_reason = "max_epochs"
    return best, report


# ---------------------------------------------------------------------------
# gradient check of the full model
# ---------------------------------------------------------------------------

TINY = dict(num_concepts=5, embed_dim=4, hidden_dim=6, latent_dim=3, forget_embed_dim=3,
            feature_dim=5, enc_dim=5, prior_dim=5, dec_dim=5, pred_dim=5)


def tiny_batch(cfg: ModelConfig, batch: int = 2, window: int = 4, seed: int = 0) -> SequenceBatch:
    """Random window batch; the last step of the second row is padding."""
    rng = np.random.default_rng(seed)
    shape = (batch, window)
    mask = np.ones(shape, dtype=np.int64)
    if batch > 1:
        mask[1, -1] = 0
    concept = rng.integers(cfg.num_concepts, size=shape) * mask
    correct = rng.integers(2, size=shape) * mask
    delta = rng.exponential(10.0, size=shape) * mask
    delta[:, 0] = 0.0
    level = np.where(mask > 0, rng.integers(1, 11, size=shape), 0)
    return SequenceBatch(concept, correct, delta, level, mask, np.arange(batch))


def check_model_gradients(model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                          batch: SequenceBatch | None = None, seed: int = 0, eps: float = 1e-5,
                          tol: float = 1e-4, loss: str = "total") -> ad.GradCheckReport:
    """Finite-difference check of d(loss)/d(every parameter) in float64.

    Biases are drawn at random (not zero) so no ReLU sits exactly on its
    kink; noise and dropout masks are frozen by ``seed``.
    """
    model_cfg = model_cfg or ModelConfig(**TINY)
    train_cfg = train_cfg or TrainConfig()
    batch = batch if batch is not None else tiny_batch(model_cfg, seed=seed)
    store = init_params(model_cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name in store.names():
        store.params[name] += rng.normal(0.0, 0.1, store[name].shape)

    base = forward_window(store, model_cfg, batch, mode="train", noise_seed=seed,
                          dropout=train_cfg.dropout)
    targets = [s.target.value.copy() for s in base.steps]

    def f(tape, params):
        out = forward_window(params, model_cfg, batch, mode="train", noise_seed=seed,
                             dropout=train_cfg.dropout, tape=tape, recon_targets=targets)
        recon, kl, pred = window_losses(out, model_cfg)
        parts = {"recon": recon, "kl": kl, "pred": pred}
        if loss == "total":
            return total_loss(recon, kl, pred, train_cfg)
        return parts[loss]

    return ad.grad_check(f, store, eps=eps, tol=tol)
