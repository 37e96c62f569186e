"""Shared oracles for the test modules."""

import numpy as np

from dpvae.nn import DenseNet, Layer, Rng
from dpvae.vae import VaeConfig, VaeModel, loss_and_grads


def fd_check(model: VaeModel, x, eta, rng: Rng, coords: int = 10, h: float = 1e-6, y=None) -> float:
    """Largest relative error between analytic and central-difference gradients on random coordinates."""
    _, grads = loss_and_grads(model, x, eta, y)
    params = model.params()
    worst = 0.0
    for _ in range(coords):
        k = int(rng.integers(0, len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up, _ = loss_and_grads(model, x, eta, y)
        p[idx] = old - h
        down, _ = loss_and_grads(model, x, eta, y)
        p[idx] = old
        fd = (up - down) / (2 * h)
        an = grads[k][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def random_small_vae(rng: Rng, mode: str = "standard") -> VaeModel:
    data_dim = int(rng.integers(2, 7))
    latent = int(rng.integers(1, 4))
    hidden = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(0, 3))))
    act = ["tanh", "sigmoid", "leaky_relu"][int(rng.integers(0, 3))]
    cfg = VaeConfig(data_dim=data_dim, latent_dim=latent, hidden=hidden, activation=act, mode=mode,
                    noise_bound=0.3 if mode == "vae_ldp" else 0.0)
    return VaeModel.create(cfg, rng.child("init"))


def linear_vae(enc_w, enc_b, dec_w, dec_b, output_activation="identity", **cfg) -> VaeModel:
    """Single-layer encoder and decoder with given weights."""
    enc_w, dec_w = np.asarray(enc_w, float), np.asarray(dec_w, float)
    config = VaeConfig(data_dim=enc_w.shape[0], latent_dim=dec_w.shape[0], hidden=(),
                       output_activation=output_activation, **cfg)
    enc = DenseNet([Layer(enc_w, np.asarray(enc_b, float), "identity")])
    dec = DenseNet([Layer(dec_w, np.asarray(dec_b, float), output_activation)])
    return VaeModel(config, enc, dec)


def identity_autoencoder(dim: int) -> VaeModel:
    """mu = x, sigma ~ 0, decoder = identity."""
    enc_w = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=1)
    enc_b = np.concatenate([np.zeros(dim), np.full(dim, -1e4)])
    return linear_vae(enc_w, enc_b, np.eye(dim), np.zeros(dim))
