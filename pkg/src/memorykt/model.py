"""The memoryKT network built on :mod:`memorykt.autodiff`.

Weights are stored input-major (``[in, out]``) so a layer is ``x @ W + b``
on a batch of row vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .data import SequenceBatch
from .forgetting import NUM_LEVELS

NO_FORGET_LEVEL = 5


@dataclass
class ModelConfig:
    num_concepts: int
    embed_dim: int = 64
    hidden_dim: int = 128
    latent_dim: int = 32
    forget_embed_dim: int = 16
    feature_dim: int = 64  # width of phi_x and phi_z
    enc_dim: int = 64
    prior_dim: int = 64
    dec_dim: int = 64
    pred_dim: int = 64
    use_vae: bool = True
    use_forget: bool = True
    recon_target: str = "embedding"  # or "onehot"

    def __post_init__(self):
        dims = {k: v for k, v in asdict(self).items() if k.endswith("_dim") or k == "num_concepts"}
        bad = [k for k, v in dims.items() if int(v) < 1]
        if bad:
            raise ValueError(f"dimensions must be >= 1: {bad}")
        if self.recon_target not in ("embedding", "onehot"):
            raise ValueError(f"unknown recon_target {self.recon_target!r}")

    @property
    def recon_dim(self) -> int:
        return self.embed_dim if self.recon_target == "embedding" else 2 * self.num_concepts

    def to_json(self) -> dict:
        return asdict(self)


def _shapes(cfg: ModelConfig) -> dict:
    K, E, H, L = cfg.num_concepts, cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim
    F, M = cfg.feature_dim, cfg.forget_embed_dim
    shapes = {
        "emb": (2 * K, E),
        "W1": (E, F), "b1": (F,), "W2": (F, F), "b2": (F,),
    }
    if cfg.use_vae:
        shapes.update({
            "We": (F + H, cfg.enc_dim), "be": (cfg.enc_dim,),
            "Wmu": (cfg.enc_dim, L), "Wsig": (cfg.enc_dim, L),
            "Wp": (H, cfg.prior_dim), "bp": (cfg.prior_dim,),
            "Wmup": (cfg.prior_dim, L), "Wsigp": (cfg.prior_dim, L),
            "Wz": (L, F), "bz": (F,),
            "Wd": (F + H, cfg.dec_dim), "bd": (cfg.dec_dim,),
            "Wout": (cfg.dec_dim, cfg.recon_dim),
        })
    shapes.update({
        "lstm_Wx": (2 * F, 4 * H), "lstm_Wh": (H, 4 * H), "lstm_b": (4 * H,),
        "Wf1": (H + M + 1, cfg.pred_dim), "bf1": (cfg.pred_dim,),
        "Wf2": (cfg.pred_dim, cfg.pred_dim), "bf2": (cfg.pred_dim,),
        "Wf3": (cfg.pred_dim, K), "bf3": (K,),
        "forget_emb": (NUM_LEVELS, M),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, N(0, 0.1^2) embeddings."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in _shapes(cfg).items():
        if name in ("emb", "forget_emb"):
            value = rng.normal(0.0, 0.1, shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, shape)
        store.add(name, value)
    return store


def bind(store: ParamStore, tape: Tape | None) -> dict:
    if tape is None:
        return {name: Tensor(store[name]) for name in store}
    return {name: tape.param(store, name) for name in store}


@dataclass
class HiddenState:
    h: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_dim: int) -> HiddenState:
        return cls(Tensor(np.zeros((batch, hidden_dim))), Tensor(np.zeros((batch, hidden_dim))))


@dataclass
class StepOutput:
    x: Tensor  # interaction embedding
    target: Tensor  # reconstruction target (no gradient)
    mu_enc: Tensor | None
    sigma_enc: Tensor | None
    mu_prior: Tensor | None
    sigma_prior: Tensor | None
    z: Tensor | None
    x_hat: Tensor | None
    p: Tensor  # [B, K] next-step probabilities per concept
    h: Tensor


@dataclass
class WindowOutput:
    steps: list
    batch: SequenceBatch = field(repr=False)

    def probabilities(self) -> np.ndarray:
        """[B, T, K] array of prediction probabilities."""
        return np.stack([s.p.value for s in self.steps], axis=1)


class _Dropout:
    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate <= 0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return ad.mul(x, Tensor(keep))


def interaction_rows(c, r, num_concepts: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= num_concepts):
        raise IndexError(f"concept id outside [0, {num_concepts})")
    return c + num_concepts * np.asarray(r, dtype=np.int64)


def embed_interaction(c, r, table: Tensor, num_concepts: int) -> Tensor:
    return ad.embedding(table, interaction_rows(c, r, num_concepts))


def input_features(x: Tensor, P: dict, drop=None) -> Tensor:
    drop = drop or (lambda t: t)
    hidden = drop(ad.relu(ad.linear(x, P["W1"], P["b1"])))
    return ad.relu(ad.linear(hidden, P["W2"], P["b2"]))


def encode(phi_x: Tensor, h_prev: Tensor, P: dict, drop=None) -> tuple[Tensor, Tensor]:
    drop = drop or (lambda t: t)
    enc = drop(ad.relu(ad.linear(ad.concat([phi_x, h_prev]), P["We"], P["be"])))
    return ad.linear(enc, P["Wmu"]), ad.softplus(ad.linear(enc, P["Wsig"]))


def prior(h_prev: Tensor, P: dict) -> tuple[Tensor, Tensor]:
    pri = ad.relu(ad.linear(h_prev, P["Wp"], P["bp"]))
    return ad.linear(pri, P["Wmup"]), ad.softplus(ad.linear(pri, P["Wsigp"]))


def reparameterize(mu: Tensor, sigma: Tensor, epsilon) -> Tensor:
    return ad.add(mu, ad.mul(sigma, Tensor(epsilon)))


def latent_features(z: Tensor, P: dict) -> Tensor:
    return ad.relu(ad.linear(z, P["Wz"], P["bz"]))


def decode(phi_z: Tensor, h_prev: Tensor, P: dict, drop=None) -> Tensor:
    drop = drop or (lambda t: t)
    dec = drop(ad.relu(ad.linear(ad.concat([phi_z, h_prev]), P["Wd"], P["bd"])))
    return ad.sigmoid(ad.linear(dec, P["Wout"]))


def lstm_step(phi_x: Tensor, phi_z: Tensor, state: HiddenState, P: dict) -> HiddenState:
    gates = ad.add(ad.linear(ad.concat([phi_x, phi_z]), P["lstm_Wx"], P["lstm_b"]),
                   ad.linear(state.h, P["lstm_Wh"]))
    i, f, o, g = ad.split(gates, 4)
    i, f, o, g = ad.sigmoid(i), ad.sigmoid(f), ad.sigmoid(o), ad.tanh(g)
    cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
    return HiddenState(ad.mul(o, ad.tanh(cell)), cell)


def time_feature(delta_t_hours) -> np.ndarray:
    return np.log1p(np.asarray(delta_t_hours, dtype=np.float64))


def predict(h: Tensor, m: Tensor, dt_feature, P: dict, drop=None) -> Tensor:
    drop = drop or (lambda t: t)
    dt = Tensor(np.asarray(dt_feature, dtype=np.float64).reshape(-1, 1))
    f = drop(ad.relu(ad.linear(ad.concat([h, m, dt]), P["Wf1"], P["bf1"])))
    f = drop(ad.relu(ad.linear(f, P["Wf2"], P["bf2"])))
    return ad.sigmoid(ad.linear(f, P["Wf3"], P["bf3"]))


def forget_embedding(levels, P: dict) -> Tensor:
    levels = np.asarray(levels, dtype=np.int64)
    if np.any(levels < 1) or np.any(levels > NUM_LEVELS):
        raise ValueError(f"forget level outside [1, {NUM_LEVELS}]")
    return ad.embedding(P["forget_emb"], levels - 1)


def _onehot(rows: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((rows.size, width))
    out[np.arange(rows.size), rows] = 1.0
    return out


def forward_window(store: ParamStore, cfg: ModelConfig, batch: SequenceBatch, *,
                   mode: str = "eval", noise_seed: int = 0, dropout: float = 0.0,
                   tape: Tape | None = None, recon_targets: list | None = None) -> WindowOutput:
    """Run the network over every timestep of ``batch`` from the zero state.

    Train mode samples the reparameterization noise and dropout masks from
    ``noise_seed``; eval mode uses the posterior mean and no dropout.
    ``recon_targets`` pins the per-step reconstruction targets, which carry
    no gradient anyway; gradient checks need them fixed under perturbation.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    P = bind(store, tape)
    B, T = batch.concept.shape
    K = cfg.num_concepts
    train = mode == "train"
    rng = np.random.default_rng(noise_seed) if train else None
    drop = _Dropout(dropout, rng)
    state = HiddenState.zeros(B, cfg.hidden_dim)
    zero_z = Tensor(np.zeros((B, cfg.feature_dim)))
    steps = []
    for t in range(T):
        valid = batch.mask[:, t] > 0
        c = np.where(valid, batch.concept[:, t], 0)
        r = np.where(valid, batch.correct[:, t], 0)
        rows = interaction_rows(c, r, K)
        x = ad.embedding(P["emb"], rows)
        if recon_targets is not None:
            target = Tensor(recon_targets[t])
        elif cfg.recon_target == "embedding":
            target = ad.detach(x)
        else:
            target = Tensor(_onehot(rows, 2 * K))
        phi_x = input_features(x, P, drop)
        h_prev = state.h
        mu_e = sig_e = mu_p = sig_p = z = x_hat = None
        if cfg.use_vae:
            mu_e, sig_e = encode(phi_x, h_prev, P, drop)
            mu_p, sig_p = prior(h_prev, P)
            eps = rng.standard_normal((B, cfg.latent_dim)) if train else np.zeros((B, cfg.latent_dim))
            z = reparameterize(mu_e, sig_e, eps)
            phi_z = latent_features(z, P)
            x_hat = decode(phi_z, h_prev, P, drop)
        else:
            phi_z = zero_z
        state = lstm_step(phi_x, phi_z, state, P)
        levels = batch.forget_level[:, t] if cfg.use_forget else np.full(B, NO_FORGET_LEVEL)
        levels = np.where(valid, levels, NO_FORGET_LEVEL)
        m = forget_embedding(levels, P)
        p = predict(state.h, m, time_feature(np.where(valid, batch.delta_t[:, t], 0.0)), P, drop)
        steps.append(StepOutput(x, target, mu_e, sig_e, mu_p, sig_p, z, x_hat, p, state.h))
    return WindowOutput(steps, batch)
