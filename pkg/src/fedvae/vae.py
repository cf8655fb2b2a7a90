"""Label-conditional beta-VAE built from :mod:`fedvae.nn` layers.

Conditioning: the one-hot label is appended as constant image channels to the
encoder input and concatenated to the latent code before the decoder. The
prior is the label-independent standard normal. The minimised objective is

    total = recon + beta * kl

with ``recon`` the negative log-likelihood of the image (summed over pixels)
and ``kl`` the closed-form KL of the diagonal posterior to N(0, I); both are
averaged over the batch. This is the negative beta-weighted ELBO.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (BatchNorm, Conv2D, ConvTranspose2D, Dense, Flatten, LeakyReLU, ParameterSet,
                 ReLU, Reshape, Sequential, bernoulli_nll, gaussian_nll, sigmoid)

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
DEFAULT_CHANNELS = {"small": (16, 32), "large": (16, 32, 64)}


@dataclass(frozen=True)
class VaeConfig:
    image_shape: tuple[int, int] = (8, 8)
    num_classes: int = 10
    latent_dim: int = 8
    beta: float = 0.01
    architecture: str = "small"
    likelihood: str = "bernoulli"
    channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.architecture not in DEFAULT_CHANNELS:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        h, w = self.image_shape
        if h % 4 or w % 4:
            raise ValueError("image sides must be divisible by 4 (two stride-2 stages)")
        if self.channels is None:
            object.__setattr__(self, "channels", DEFAULT_CHANNELS[self.architecture])
        expected = len(DEFAULT_CHANNELS[self.architecture])
        if len(self.channels) != expected:
            raise ValueError(f"{self.architecture} architecture takes {expected} channel widths")


@dataclass
class PosteriorParams:
    mean: np.ndarray
    logvar: np.ndarray
    raw_logvar: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError("posterior mean and log-variance shapes differ")


@dataclass
class LossTerms:
    total: float
    recon: float
    kl: float


def _small(cfg: VaeConfig):
    h, w = cfg.image_shape
    c1, c2 = cfg.channels
    k, L = cfg.num_classes, cfg.latent_dim
    enc = [Conv2D(c1, 3, 2), ReLU(), Conv2D(c2, 3, 2), ReLU(), Flatten(), Dense(2 * L)]
    dec = [Dense(c2 * (h // 4) * (w // 4)), ReLU(), Reshape((c2, h // 4, w // 4)),
           ConvTranspose2D(c1, 3, 2), ReLU(), ConvTranspose2D(1, 3, 2)]
    return enc, dec


def _large(cfg: VaeConfig):
    h, w = cfg.image_shape
    c1, c2, c3 = cfg.channels
    L = cfg.latent_dim
    enc = [Conv2D(c1, 3, 1), BatchNorm(), LeakyReLU(),
           Conv2D(c2, 3, 2), BatchNorm(), LeakyReLU(),
           Conv2D(c3, 3, 2), BatchNorm(), LeakyReLU(),
           Flatten(), Dense(2 * L)]
    dec = [Dense(c3 * (h // 4) * (w // 4)), Reshape((c3, h // 4, w // 4)), BatchNorm(), LeakyReLU(),
           ConvTranspose2D(c2, 3, 2), BatchNorm(), LeakyReLU(),
           ConvTranspose2D(c1, 3, 2), BatchNorm(), LeakyReLU(),
           Conv2D(1, 3, 1)]
    return enc, dec


class ConditionalVAE:
    """Encoder/decoder pair; parameters are held by the caller."""

    def __init__(self, config: VaeConfig):
        self.config = config
        enc, dec = (_small if config.architecture == "small" else _large)(config)
        h, w = config.image_shape
        k = config.num_classes
        self.encoder = Sequential(enc, (1 + k, h, w), "enc", "encoder")
        self.decoder = Sequential(dec, (config.latent_dim + k,), "dec", "decoder")

    def init(self, rng: np.random.Generator) -> tuple[ParameterSet, ParameterSet]:
        return self.encoder.init(rng), self.decoder.init(rng)

    def init_encoder(self, rng: np.random.Generator) -> ParameterSet:
        return self.encoder.init(rng)

    def init_decoder(self, rng: np.random.Generator) -> ParameterSet:
        return self.decoder.init(rng)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_one_hot(y: np.ndarray, num_classes: int) -> None:
    if y.ndim != 2 or y.shape[1] != num_classes:
        raise ValueError(f"labels must be one-hot with {num_classes} columns")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("label rows are not one-hot")


def _encoder_input(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n, h, w = x.shape
    label_planes = np.broadcast_to(y[:, :, None, None], (n, y.shape[1], h, w))
    return np.concatenate([x[:, None], label_planes], axis=1)


def _posterior(raw: np.ndarray, latent_dim: int) -> PosteriorParams:
    mean, raw_lv = raw[:, :latent_dim], raw[:, latent_dim:]
    return PosteriorParams(mean, np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX), raw_lv)


def encode(vae: ConditionalVAE, enc_params: ParameterSet, x: np.ndarray, y: np.ndarray,
           training: bool = False) -> PosteriorParams:
    """Approximate posterior q(z | x, y) for images ``x`` (N, H, W) and one-hot ``y``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("image and label batch sizes differ")
    _check_one_hot(y, vae.config.num_classes)
    raw, _ = vae.encoder.forward(enc_params, _encoder_input(x, y), training=training)
    return _posterior(raw, vae.config.latent_dim)


def reparameterize(post: PosteriorParams, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(post.mean.shape)
    return post.mean + np.exp(0.5 * post.logvar) * noise


def kl_divergence(post: PosteriorParams) -> np.ndarray:
    """KL(N(mean, exp(logvar)) || N(0, I)) for each row."""
    mu, lv = post.mean, post.logvar
    return 0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0, axis=1)


def _nll(cfg: VaeConfig, logits: np.ndarray, x: np.ndarray):
    if cfg.likelihood == "bernoulli":
        return bernoulli_nll(logits, x)
    return gaussian_nll(logits, x)


def _check_pixels(cfg: VaeConfig, x: np.ndarray) -> None:
    if cfg.likelihood == "bernoulli" and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("bernoulli likelihood needs pixel values in [0, 1]")


@dataclass
class VaeGradients:
    terms: LossTerms
    encoder: ParameterSet
    decoder: ParameterSet
    decoder_per_example: ParameterSet | None
    encoder_tape: object
    decoder_tape: object


def loss_and_grads(vae: ConditionalVAE, enc_params: ParameterSet, dec_params: ParameterSet,
                   x: np.ndarray, labels: np.ndarray, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None, per_example_decoder: bool = False,
                   training: bool = True) -> VaeGradients:
    """Batch-mean beta-VAE loss with gradients for both components.

    ``noise`` fixes the reparameterisation draw (used by gradient checks);
    otherwise it is taken from ``rng``. With ``per_example_decoder`` the
    decoder gradients are also returned per example, each one the gradient
    of that example's own (unaveraged) loss.
    """
    cfg = vae.config
    x = np.asarray(x, dtype=np.float64)
    _check_pixels(cfg, x)
    n, L = x.shape[0], cfg.latent_dim
    y = one_hot(labels, cfg.num_classes)

    raw, enc_tape = vae.encoder.forward(enc_params, _encoder_input(x, y), training, rng)
    post = _posterior(raw, L)
    if noise is None:
        noise = rng.standard_normal(post.mean.shape)
    std = np.exp(0.5 * post.logvar)
    z = post.mean + std * noise

    logits, dec_tape = vae.decoder.forward(dec_params, np.concatenate([z, y], axis=1), training, rng)
    recon, dlogits = _nll(cfg, logits[:, 0], x)
    kl = kl_divergence(post)
    recon_mean, kl_mean = float(recon.mean()), float(kl.mean())
    terms = LossTerms(recon_mean + cfg.beta * kl_mean, recon_mean, kl_mean)

    gy = dlogits[:, None]
    if per_example_decoder:
        g_in, per = vae.decoder.backward(dec_params, dec_tape, gy, per_example=True)
        g_in = g_in / n
        dec_grads = per.map(lambda v: v.sum(axis=0) / n)
    else:
        per = None
        g_in, dec_grads = vae.decoder.backward(dec_params, dec_tape, gy / n)

    gz = g_in[:, :L]
    d_mean = gz + cfg.beta * post.mean / n
    d_lv = (gz * noise * 0.5 * std) + cfg.beta * 0.5 * (np.exp(post.logvar) - 1.0) / n
    d_lv = d_lv * ((post.raw_logvar > LOGVAR_MIN) & (post.raw_logvar < LOGVAR_MAX))
    _, enc_grads = vae.encoder.backward(enc_params, enc_tape, np.concatenate([d_mean, d_lv], axis=1))
    return VaeGradients(terms, enc_grads, dec_grads, per, enc_tape, dec_tape)


def beta_loss(vae: ConditionalVAE, enc_params: ParameterSet, dec_params: ParameterSet,
              x: np.ndarray, labels: np.ndarray, beta: float | None = None,
              rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
              training: bool = False) -> LossTerms:
    """Evaluate ``recon + beta * kl`` on a batch without computing gradients."""
    cfg = vae.config
    beta = cfg.beta if beta is None else beta
    if beta < 0:
        raise ValueError("beta must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    _check_pixels(cfg, x)
    y = one_hot(labels, cfg.num_classes)
    raw, _ = vae.encoder.forward(enc_params, _encoder_input(x, y), training, rng)
    post = _posterior(raw, cfg.latent_dim)
    if noise is None:
        noise = rng.standard_normal(post.mean.shape)
    z = post.mean + np.exp(0.5 * post.logvar) * noise
    logits, _ = vae.decoder.forward(dec_params, np.concatenate([z, y], axis=1), training, rng)
    recon = float(_nll(cfg, logits[:, 0], x)[0].mean())
    kl = float(kl_divergence(post).mean())
    return LossTerms(recon + beta * kl, recon, kl)


def decode(vae: ConditionalVAE, dec_params: ParameterSet, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    y = one_hot(labels, vae.config.num_classes)
    logits, _ = vae.decoder.forward(dec_params, np.concatenate([z, y], axis=1), training=False)
    return sigmoid(logits[:, 0])


def sample_synthetic(vae: ConditionalVAE, dec_params: ParameterSet, label: int, n: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` images of class ``label`` by decoding z ~ N(0, I)."""
    if not 0 <= label < vae.config.num_classes:
        raise ValueError(f"label {label} outside [0, {vae.config.num_classes})")
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = np.full(n, label, dtype=np.int64)
    z = rng.standard_normal((n, vae.config.latent_dim))
    return decode(vae, dec_params, z, labels), labels


def balanced_counts(n: int, num_classes: int) -> list[int]:
    """Split ``n`` as evenly as possible; earlier classes take the remainder."""
    base, extra = divmod(n, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def sample_balanced(vae: ConditionalVAE, dec_params: ParameterSet, n: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for label, count in enumerate(balanced_counts(n, vae.config.num_classes)):
        if count:
            x, y = sample_synthetic(vae, dec_params, label, count, rng)
            images.append(x)
            labels.append(y)
    return np.concatenate(images), np.concatenate(labels)
