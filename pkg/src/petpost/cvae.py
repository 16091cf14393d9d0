"""Conditional VAEs for amortized posterior sampling of SRTM parameters.

Three variants share an encoder ``phi`` ([x, y] -> latent Gaussian) and a
decoder ``theta`` ([y, z] -> x):

* ``vanilla``       KL(q(z|x,y) || N(0, I))
* ``dual-encoder``  KL(q(z|x,y) || q'(z|y)), with a second encoder ``phi_prime``
* ``dual-decoder``  KL(q(z|x,y) || N(0, I)) + lambda * 1/2 |y - theta'(z)|^2

Networks see standardized inputs.  Kinetic parameters are log-transformed
before standardization by default, which keeps every decoded draw positive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .kinetics import Measurement
from .mcmc import PosteriorSamples
from .neural import (
    Gradients,
    NetworkParams,
    NetworkSpec,
    backward,
    forward,
    init_params,
    sgd_step,
    split_heads,
)

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "dual-encoder", "dual-decoder")
LOG_VAR_FLOOR = -20.0


class CvaeError(RuntimeError):
    pass


class TrainingDiverged(CvaeError):
    pass


@dataclass
class GaussianLatentParams:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


def reparameterize(latent: GaussianLatentParams, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    if eps is None:
        eps = rng.standard_normal(np.shape(latent.mu))
    return latent.mu + np.exp(0.5 * latent.log_var) * eps


def kl_two_gaussians(p: GaussianLatentParams, q: GaussianLatentParams) -> np.ndarray:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    if np.shape(p.mu) != np.shape(q.mu):
        raise CvaeError("latent dimensions differ")
    ratio = np.exp(p.log_var - q.log_var)
    term = 1.0 + (p.log_var - q.log_var) - ratio - (p.mu - q.mu) ** 2 * np.exp(-q.log_var)
    return -0.5 * np.sum(term, axis=-1)


def kl_standard_normal(p: GaussianLatentParams) -> np.ndarray:
    """KL(p || N(0, I)), summed over the last axis."""
    return -0.5 * np.sum(1.0 + p.log_var - np.exp(p.log_var) - p.mu**2, axis=-1)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 100
    beta: float = 1.0
    lam: float = 1.0
    seed: int = 0
    # rescale a network's gradient when its global L2 norm exceeds this; None disables
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise CvaeError("beta and lambda must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise CvaeError("clip_norm must be positive or None")
        if self.epochs < 1 or self.batch_size < 1:
            raise CvaeError("epochs and batch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Architecture:
    n_params: int = 3
    n_frames: int = 54
    latent_dim: int = 10
    hidden: tuple[int, ...] = (128, 100, 50)
    prime_decoder_hidden: tuple[int, ...] = (16, 16, 32)

    def encoder(self) -> NetworkSpec:
        return NetworkSpec((self.n_params + self.n_frames, *self.hidden, 2 * self.latent_dim), dual_head=True)

    def prime_encoder(self) -> NetworkSpec:
        return NetworkSpec((self.n_frames, *self.hidden, 2 * self.latent_dim), dual_head=True)

    def decoder(self) -> NetworkSpec:
        return NetworkSpec((self.n_frames + self.latent_dim, *self.hidden, self.n_params))

    def prime_decoder(self) -> NetworkSpec:
        return NetworkSpec((self.latent_dim, *self.prime_decoder_hidden, self.n_frames))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["prime_decoder_hidden"] = tuple(d["prime_decoder_hidden"])
        return cls(**d)


@dataclass
class Normalizer:
    """Per-dimension standardization, optionally after a log transform."""

    mean: np.ndarray
    std: np.ndarray
    log: bool = False

    @classmethod
    def fit(cls, data: np.ndarray, log: bool = False) -> "Normalizer":
        data = np.asarray(data, dtype=float)
        if log:
            if np.any(data <= 0):
                raise CvaeError("log normalization needs positive data")
            data = np.log(data)
        std = data.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(data.mean(axis=0), std, log)

    def normalize(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return ((np.log(v) if self.log else v) - self.mean) / self.std

    def denormalize(self, v) -> np.ndarray:
        out = np.asarray(v, dtype=float) * self.std + self.mean
        return np.exp(out) if self.log else out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "log": self.log}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float), bool(d["log"]))


@dataclass
class CvaeModel:
    variant: str
    arch: Architecture
    encoder_phi: NetworkParams
    decoder_theta: NetworkParams
    encoder_phi_prime: NetworkParams | None = None
    decoder_theta_prime: NetworkParams | None = None
    x_norm: Normalizer | None = None
    y_norm: Normalizer | None = None
    train_config: TrainConfig | None = None
    loss_history: list[float] = field(default_factory=list)
    clamp_events: int = 0
    clip_events: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise CvaeError(f"unknown variant {self.variant!r}")
        if self.variant == "dual-encoder" and self.encoder_phi_prime is None:
            raise CvaeError("dual-encoder needs phi_prime")
        if self.variant == "dual-decoder" and self.decoder_theta_prime is None:
            raise CvaeError("dual-decoder needs theta_prime")

    @property
    def trained(self) -> bool:
        return self.x_norm is not None and self.y_norm is not None and bool(self.loss_history)

    def networks(self) -> dict[str, NetworkParams]:
        nets = {"encoder_phi": self.encoder_phi, "decoder_theta": self.decoder_theta}
        if self.encoder_phi_prime is not None:
            nets["encoder_phi_prime"] = self.encoder_phi_prime
        if self.decoder_theta_prime is not None:
            nets["decoder_theta_prime"] = self.decoder_theta_prime
        return nets

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "architecture": self.arch.to_dict(),
            "networks": {k: v.to_dict() for k, v in self.networks().items()},
            "x_norm": self.x_norm.to_dict() if self.x_norm else None,
            "y_norm": self.y_norm.to_dict() if self.y_norm else None,
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "loss_history": list(self.loss_history),
            "clamp_events": self.clamp_events,
            "clip_events": self.clip_events,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeModel":
        nets = {k: NetworkParams.from_dict(v) for k, v in d["networks"].items()}
        return cls(
            variant=d["variant"],
            arch=Architecture.from_dict(d["architecture"]),
            encoder_phi=nets["encoder_phi"],
            decoder_theta=nets["decoder_theta"],
            encoder_phi_prime=nets.get("encoder_phi_prime"),
            decoder_theta_prime=nets.get("decoder_theta_prime"),
            x_norm=Normalizer.from_dict(d["x_norm"]) if d.get("x_norm") else None,
            y_norm=Normalizer.from_dict(d["y_norm"]) if d.get("y_norm") else None,
            train_config=TrainConfig.from_dict(d["train_config"]) if d.get("train_config") else None,
            loss_history=list(d.get("loss_history", [])),
            clamp_events=int(d.get("clamp_events", 0)),
            clip_events=int(d.get("clip_events", 0)),
        )

    def save(self, path, extra: dict | None = None) -> None:
        payload = {"format": "petpost-cvae-checkpoint", "version": 1, **self.to_dict(), "metadata": extra or {}}
        # repr-exact floats: json round-trips float64 bit for bit
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CvaeModel":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "petpost-cvae-checkpoint":
            raise CvaeError(f"{path}: not a CVAE checkpoint")
        return cls.from_dict(d)


def build_model(variant: str, rng: np.random.Generator, arch: Architecture | None = None) -> CvaeModel:
    arch = arch or Architecture()
    if variant not in VARIANTS:
        raise CvaeError(f"unknown variant {variant!r}")
    phi = init_params(arch.encoder(), rng)
    theta = init_params(arch.decoder(), rng)
    phi_p = init_params(arch.prime_encoder(), rng) if variant == "dual-encoder" else None
    theta_p = init_params(arch.prime_decoder(), rng) if variant == "dual-decoder" else None
    return CvaeModel(variant, arch, phi, theta, phi_p, theta_p)


@dataclass
class LossTerms:
    total: float
    reconstruction: float
    kl: float
    y_reconstruction: float
    clamped: int


def loss_and_gradients(model: CvaeModel, xn: np.ndarray, yn: np.ndarray, eps: np.ndarray,
                       beta: float = 1.0, lam: float = 1.0, variant: str | None = None):
    """Batch-mean loss and exact gradients for normalized (x, y) and a fixed eps.

    Returns (LossTerms, {network name: Gradients}).
    """
    variant = variant or model.variant
    b = len(xn)
    k = model.arch.latent_dim
    enc_out, enc_cache = forward(model.encoder_phi, np.hstack([xn, yn]))
    mu, raw_lv = split_heads(enc_out)
    lv = np.maximum(raw_lv, LOG_VAR_FLOOR)
    clamped = int(np.sum(raw_lv < LOG_VAR_FLOOR))
    sd = np.exp(0.5 * lv)
    z = mu + sd * eps

    dec_out, dec_cache = forward(model.decoder_theta, np.hstack([yn, z]))
    diff_x = dec_out - xn
    rec = 0.5 * np.sum(diff_x**2) / b
    grads = {}
    g_dec, g_dec_in = backward(model.decoder_theta, dec_cache, diff_x / b)
    grads["decoder_theta"] = g_dec
    dz = g_dec_in[:, -k:]

    y_rec = 0.0
    if variant == "dual-decoder":
        y_out, y_cache = forward(model.decoder_theta_prime, z)
        diff_y = y_out - yn
        y_rec = 0.5 * np.sum(diff_y**2) / b
        g_yd, g_yd_in = backward(model.decoder_theta_prime, y_cache, lam * diff_y / b)
        grads["decoder_theta_prime"] = g_yd
        dz = dz + g_yd_in

    dmu = dz.copy()
    dlv = dz * eps * sd * 0.5

    if variant == "dual-encoder":
        pe_out, pe_cache = forward(model.encoder_phi_prime, yn)
        mu_p, raw_lv_p = split_heads(pe_out)
        lv_p = np.maximum(raw_lv_p, LOG_VAR_FLOOR)
        clamped += int(np.sum(raw_lv_p < LOG_VAR_FLOOR))
        kl = float(np.sum(kl_two_gaussians(GaussianLatentParams(mu, lv), GaussianLatentParams(mu_p, lv_p)))) / b
        inv_vp = np.exp(-lv_p)
        ratio = np.exp(lv - lv_p)
        dm = mu - mu_p
        dmu += beta / b * dm * inv_vp
        dlv += beta / b * 0.5 * (ratio - 1.0)
        dmu_p = -beta / b * dm * inv_vp
        dlv_p = beta / b * 0.5 * (1.0 - ratio - dm**2 * inv_vp)
        dlv_p = dlv_p * (raw_lv_p > LOG_VAR_FLOOR)
        g_pe, _ = backward(model.encoder_phi_prime, pe_cache, np.hstack([dmu_p, dlv_p]))
        grads["encoder_phi_prime"] = g_pe
    else:
        kl = float(np.sum(kl_standard_normal(GaussianLatentParams(mu, lv)))) / b
        dmu += beta / b * mu
        dlv += beta / b * 0.5 * (np.exp(lv) - 1.0)

    dlv = dlv * (raw_lv > LOG_VAR_FLOOR)
    g_enc, _ = backward(model.encoder_phi, enc_cache, np.hstack([dmu, dlv]))
    grads["encoder_phi"] = g_enc

    total = rec + beta * kl + (lam * y_rec if variant == "dual-decoder" else 0.0)
    return LossTerms(total, rec, kl, y_rec, clamped), grads


def loss(variant: str, model: CvaeModel, xn: np.ndarray, yn: np.ndarray, rng: np.random.Generator,
         beta: float = 1.0, lam: float = 1.0):
    """Draw the reparameterization noise and evaluate :func:`loss_and_gradients`."""
    eps = rng.standard_normal((len(xn), model.arch.latent_dim))
    return loss_and_gradients(model, xn, yn, eps, beta, lam, variant)


def clip_gradients(grads: Gradients, max_norm: float) -> bool:
    """Scale grads in place so their joint L2 norm is at most max_norm; report whether it bound."""
    norm = np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays()))
    if not np.isfinite(norm) or norm <= max_norm:
        return False
    scale = max_norm / norm
    for a in grads.arrays():
        a *= scale
    return True


def train(variant: str, params: np.ndarray, y: np.ndarray, config: TrainConfig,
          arch: Architecture | None = None, log_params: bool = True,
          progress: bool = False) -> CvaeModel:
    """Fit one CVAE variant on (params, y) pairs; deterministic given config.seed."""
    params = np.asarray(params, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(params) == 0 or len(params) != len(y):
        raise CvaeError("need a non-empty dataset with matching x and y")
    arch = arch or Architecture(n_params=params.shape[1], n_frames=y.shape[1])
    rng = np.random.default_rng(config.seed)
    model = build_model(variant, rng, arch)
    model.x_norm = Normalizer.fit(params, log=log_params)
    model.y_norm = Normalizer.fit(y)
    model.train_config = config
    xn = model.x_norm.normalize(params)
    yn = model.y_norm.normalize(y)
    n = len(xn)
    nets = model.networks()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            terms, grads = loss(variant, model, xn[idx], yn[idx], rng, config.beta, config.lam)
            if not np.isfinite(terms.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {start}: "
                    f"rec={terms.reconstruction} kl={terms.kl} y_rec={terms.y_reconstruction}")
            model.clamp_events += terms.clamped
            for name, g in grads.items():
                if config.clip_norm is not None and clip_gradients(g, config.clip_norm):
                    model.clip_events += 1
                sgd_step(nets[name], g, config.learning_rate, config.momentum)
            total += terms.total * len(idx)
        model.loss_history.append(total / n)
        if progress:
            log.info("%s epoch %d/%d loss %.5f", variant, epoch + 1, config.epochs, total / n)
    return model


def sample_posterior(model: CvaeModel, y_star: Measurement | np.ndarray, n_samples: int, seed=0,
                     measurement_id: str = "", chunk: int = 5000) -> PosteriorSamples:
    """Decode n_samples draws of x given y_star.

    Latents come from phi'(y*) for the dual encoder and from N(0, I)
    otherwise.  The log-variance floor guards the loss only and is not
    applied here.  ``seed`` is an int or a sequence of ints; chunk c draws its
    noise from a generator seeded (*seed, c), so the result does not depend
    on how chunks are scheduled.
    """
    if not model.trained:
        raise CvaeError("model is not trained")
    if n_samples < 1:
        raise CvaeError("need at least one sample")
    yv = y_star.y if isinstance(y_star, Measurement) else np.asarray(y_star, dtype=float)
    yn = model.y_norm.normalize(yv)
    k = model.arch.latent_dim
    if model.variant == "dual-encoder":
        out, _ = forward(model.encoder_phi_prime, yn)
        mu_p, lv_p = split_heads(out)
        latent = GaussianLatentParams(mu_p, lv_p)
    else:
        latent = GaussianLatentParams(np.zeros(k), np.zeros(k))
    key = [int(v) for v in np.atleast_1d(seed)]
    draws = []
    for c, start in enumerate(range(0, n_samples, chunk)):
        m = min(chunk, n_samples - start)
        eps = np.random.default_rng([*key, c]).standard_normal((m, k))
        z = reparameterize(latent, eps=eps)
        xn, _ = forward(model.decoder_theta, np.hstack([np.broadcast_to(yn, (m, yn.size)), z]))
        draws.append(model.x_norm.denormalize(xn))
    return PosteriorSamples(np.vstack(draws), f"cvae-{model.variant}", measurement_id)


def with_latent_sd(model: CvaeModel, log_var: float) -> CvaeModel:
    """Copy of a dual-encoder model whose phi' variance head is pinned to log_var."""
    if model.encoder_phi_prime is None:
        raise CvaeError("model has no phi_prime")
    phi_p = model.encoder_phi_prime.copy()
    k = model.arch.latent_dim
    phi_p.weights[-1][:, k:] = 0.0
    phi_p.biases[-1][k:] = log_var
    return replace(model, encoder_phi_prime=phi_p)
