"""Conditional VAE that turns one context key into N_k diverse query keys.

Encoder keys live in (-1, 1) while the decoder ends in a sigmoid, so keys
are mapped through k' = (k + 1) / 2 on the way in and back out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm

HIDDEN = 128


@dataclass
class KeyGenConfig:
    n_keys: int = 20
    eta: float = 1.0
    lam: float = 0.1
    div_eps: float = 1e-8
    latent_dim: int = 32
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_keys < 1:
            raise ValueError("n_keys must be >= 1")
        if self.eta < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")
        if self.div_eps <= 0:
            raise ValueError("div_eps must be positive")


def to_unit(k):
    return (np.asarray(k) + 1.0) / 2.0


def from_unit(k):
    return 2.0 * np.asarray(k) - 1.0


def _mlp(ps: dm.ParameterSet, prefix: str, x: dm.Tensor) -> dm.Tensor:
    h = dm.relu(dm.linear(x, ps[f"{prefix}.W1"], ps[f"{prefix}.b1"]))
    return dm.linear(h, ps[f"{prefix}.W2"], ps[f"{prefix}.b2"])


class KeyGenerator:
    def __init__(self, d_k: int, config: KeyGenConfig | None = None):
        self.d_k = d_k
        self.config = cfg = config or KeyGenConfig()
        ps = dm.ParameterSet(cfg.seed)
        for prefix, d_in, d_out in (("mu", d_k, cfg.latent_dim),
                                    ("logvar", d_k, cfg.latent_dim),
                                    ("dec", cfg.latent_dim + d_k, d_k)):
            ps.matrix(f"{prefix}.W1", HIDDEN, d_in)
            ps.bias(f"{prefix}.b1", HIDDEN)
            ps.matrix(f"{prefix}.W2", d_out, HIDDEN)
            ps.bias(f"{prefix}.b2", d_out)
        self.params = ps
        self.adam = dm.AdamState(lr=cfg.lr)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    # -- pieces ----------------------------------------------------------

    def encode_posterior(self, k_unit) -> tuple[dm.Tensor, dm.Tensor]:
        """(mu, logvar) for unit-interval keys; accepts (d_k,) or (B, d_k)."""
        k_unit = dm.as_tensor(k_unit)
        if not np.all(np.isfinite(k_unit.value)):
            raise ValueError("non-finite key passed to the posterior encoder")
        return _mlp(self.params, "mu", k_unit), _mlp(self.params, "logvar", k_unit)

    def decode(self, z: dm.Tensor, k_unit) -> dm.Tensor:
        """sigmoid(P(z ∥ k)); z is (..., N, d_z) and k broadcasts over the N axis."""
        z = dm.as_tensor(z)
        kv = np.asarray(dm.as_tensor(k_unit).value)
        cond = np.broadcast_to(kv[..., None, :], z.shape[:-1] + (self.d_k,)) if z.value.ndim > kv.ndim \
            else kv
        x = dm.concat([z, dm.Tensor(np.ascontiguousarray(cond))], axis=-1)
        return dm.sigmoid(_mlp(self.params, "dec", x))

    def forward(self, k_unit: np.ndarray, noise: np.ndarray):
        """k_unit (B, d_k), noise (B, N, d_z) -> (generated (B, N, d_k), mu, logvar)."""
        mu, logvar = self.encode_posterior(k_unit)
        z = sample_latent(mu, logvar, noise)
        return self.decode(z, k_unit), mu, logvar

    def batch_loss(self, k_unit: np.ndarray, noise: np.ndarray) -> tuple[dm.Tensor, dict[str, float]]:
        gen, mu, logvar = self.forward(k_unit, noise)
        return loss_total(k_unit, gen, mu, logvar, self.config)

    # -- training and generation ----------------------------------------

    def fit(self, keys: Sequence[np.ndarray] | np.ndarray, epochs: int | None = None,
            seed: int | None = None) -> list[float]:
        """Adam on the full objective; returns mean loss per epoch."""
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        data = to_unit(np.asarray(keys, dtype=float).reshape(-1, self.d_k))
        if len(data) == 0:
            raise ValueError("cannot train the key generator on an empty key set")
        history = []
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for lo in range(0, len(data), cfg.batch_size):
                batch = data[order[lo:lo + cfg.batch_size]]
                noise = rng.standard_normal((len(batch), cfg.n_keys, cfg.latent_dim))
                self.params.zero_grad()
                loss, _ = self.batch_loss(batch, noise)
                if not np.isfinite(loss.value):
                    raise FloatingPointError(f"key generator loss is not finite at step {step}")
                loss.backward()
                dm.adam_step(self.params, dm.collect_grads(self.params), self.adam)
                total += float(loss.value) * len(batch)
                step += 1
            history.append(total / len(data))
        self.params.zero_grad()
        return history

    def mean_loss(self, keys, seed: int = 0) -> float:
        data = to_unit(np.asarray(keys, dtype=float).reshape(-1, self.d_k))
        noise = np.random.default_rng(seed).standard_normal(
            (len(data), self.config.n_keys, self.latent_dim))
        return float(self.batch_loss(data, noise)[0].value)

    def generate(self, keys: np.ndarray, n_keys: int, rng: np.random.Generator) -> np.ndarray:
        """keys (Q, d_k) in encoder range -> (Q, n_keys, d_k) in encoder range; z from the prior."""
        keys = np.asarray(keys, dtype=float).reshape(-1, self.d_k)
        z = rng.standard_normal((len(keys), n_keys, self.latent_dim))
        return from_unit(self.decode(dm.Tensor(z), to_unit(keys)).value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state) -> None:
        self.params.load_state_dict(state)


def sample_latent(mu, logvar, noise) -> dm.Tensor:
    """z = mu + noise * exp(logvar / 2); noise may carry an extra sample axis before the last."""
    mu, logvar = dm.as_tensor(mu), dm.as_tensor(logvar)
    noise = np.asarray(noise, dtype=float)
    sigma = dm.exp(dm.mul(logvar, 0.5))
    if noise.ndim > mu.value.ndim:
        shape = mu.shape[:-1] + (1,) + mu.shape[-1:]
        mu, sigma = dm.reshape(mu, shape), dm.reshape(sigma, shape)
    return dm.add(mu, dm.mul(noise, sigma))


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


def loss_total(k_unit, generated, mu, logvar, config: KeyGenConfig) -> tuple[dm.Tensor, dict[str, float]]:
    """Reconstruction + eta * KL + lambda * diversity, averaged over any leading batch axis.

    ``generated`` is (N, d_k) for a single key or (B, N, d_k) for a batch.
    """
    gen = dm.as_tensor(generated)
    mu, logvar = dm.as_tensor(mu), dm.as_tensor(logvar)
    k = np.asarray(dm.as_tensor(k_unit).value)
    n = gen.shape[-2]
    if n == 0:
        raise ValueError("need at least one generated key")
    single = gen.value.ndim == 2
    if single:
        gen = dm.reshape(gen, (1,) + gen.shape)
        k = k.reshape(1, -1)
        mu = dm.reshape(mu, (1, -1))
        logvar = dm.reshape(logvar, (1, -1))
    B = gen.shape[0]

    # ||k - mean(gen)||^2 written as ||mean(gen - k)||^2: equal in exact arithmetic,
    # but exactly zero in floating point when every generated key equals k
    recon = dm.tensor_sum(dm.square(dm.mean(dm.sub(gen, k[:, None, :]), axis=1)), axis=-1)
    # exp(l) - 1 - l >= 0 analytically; relu clears the last-ulp rounding residue
    spread = dm.relu(dm.sub(dm.expm1(logvar), logvar))
    kl = dm.mul(dm.tensor_sum(dm.add(spread, dm.square(mu)), axis=-1), 0.5)
    if n > 1:
        i, j = _pairs(n)
        diff = dm.sub(gen[:, i], gen[:, j])
        dist = dm.add(dm.tensor_sum(dm.square(diff), axis=-1), config.div_eps)
        div = dm.tensor_sum(dm.reciprocal(dist), axis=-1)
    else:
        div = dm.Tensor(np.zeros(B))
    per_example = dm.add(dm.add(recon, dm.mul(kl, config.eta)), dm.mul(div, config.lam))
    total = dm.mean(per_example)
    terms = {"recon": float(recon.value.mean()), "kl": float(kl.value.mean()),
             "div": float(div.value.mean()), "total": float(total.value)}
    return total, terms


def train_generator(keys, d_k: int, config: KeyGenConfig | None = None) -> KeyGenerator:
    gen = KeyGenerator(d_k, config)
    gen.fit(keys)
    return gen


def generate_keys(k: np.ndarray, gen: KeyGenerator, n_keys: int, seed: int) -> np.ndarray:
    """N_k keys (encoder range) for one context key; fully determined by (gen, k, seed)."""
    return gen.generate(np.asarray(k)[None], n_keys, np.random.default_rng(seed))[0]
