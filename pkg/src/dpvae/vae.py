"""Variational autoencoder on dense networks, trainable with Adam or DP-Adam.

The encoder emits ``2 * latent_dim`` values per row: the mean and the log
variance of the latent Gaussian. In ``vae_ldp`` mode the mean is squashed to
``[-mean_bound, mean_bound]`` with tanh and the standard deviation is floored
at ``noise_bound``, which turns the trained model into a local randomizer.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .accounting import RdpAccountant
from .errors import ConfigurationError, NumericError, ParameterError, StateError
from .mechanisms import clip_factors
from .nn import AdamState, DenseNet, Rng, adam_step, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    data_dim: int
    latent_dim: int = 8
    hidden: tuple = (64,)
    activation: str = "leaky_relu"
    output_activation: str = "sigmoid"
    mode: str = "standard"
    noise_bound: float = 0.0
    mean_bound: float = 3.0
    num_classes: int | None = None
    conditional: bool = False
    kl_weight: float = 1.0
    recon_weight: float = 1.0
    class_weight: float = 0.0
    recon_loss: str = "mse"
    data_shape: tuple | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.data_shape is not None:
            self.data_shape = tuple(int(s) for s in self.data_shape)
            if math.prod(self.data_shape) != self.data_dim:
                raise ConfigurationError(f"data_shape {self.data_shape} does not match data_dim {self.data_dim}")
        if self.mode not in ("standard", "vae_ldp"):
            raise ConfigurationError(f"unknown VAE mode {self.mode!r}")
        if self.recon_loss not in ("mse", "sse"):
            raise ConfigurationError(f"unknown reconstruction loss {self.recon_loss!r}")
        if self.latent_dim < 1 or self.data_dim < 1:
            raise ConfigurationError("latent_dim and data_dim must be positive")
        if self.noise_bound < 0 or not self.mean_bound > 0:
            raise ConfigurationError("noise_bound must be >= 0 and mean_bound > 0")
        if min(self.kl_weight, self.recon_weight, self.class_weight) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.class_weight > 0 and not self.num_classes:
            raise ConfigurationError("a classifier loss weight needs num_classes")
        if self.conditional and not self.num_classes:
            raise ConfigurationError("conditional generation needs num_classes")


@dataclass
class VaeLoss:
    reconstruction: float
    kl: float
    classifier: float = 0.0
    kl_weight: float = 1.0
    recon_weight: float = 1.0
    class_weight: float = 0.0

    @property
    def total(self) -> float:
        return self.kl_weight * self.kl + self.recon_weight * self.reconstruction + self.class_weight * self.classifier


@dataclass
class Encoding:
    mu: np.ndarray
    sigma: np.ndarray
    log_var: np.ndarray
    z: np.ndarray


class VaeModel:
    def __init__(self, config: VaeConfig, encoder: DenseNet, decoder: DenseNet, head: DenseNet | None = None):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.head = head
        if encoder.out_dim != 2 * config.latent_dim or decoder.in_dim != config.latent_dim:
            raise ConfigurationError("encoder/decoder dimensions do not match latent_dim")
        if decoder.out_dim != config.data_dim or encoder.in_dim != config.data_dim:
            raise ConfigurationError("decoder output dimension must equal the data dimension")

    @classmethod
    def create(cls, config: VaeConfig, rng: Rng) -> "VaeModel":
        d = config.latent_dim
        n_hidden = len(config.hidden)
        enc = DenseNet.create(
            [config.data_dim, *config.hidden, 2 * d],
            [config.activation] * n_hidden + ["identity"],
            rng.child("encoder"),
        )
        dec = DenseNet.create(
            [d, *reversed(config.hidden), config.data_dim],
            [config.activation] * n_hidden + [config.output_activation],
            rng.child("decoder"),
        )
        head = None
        if config.num_classes and config.class_weight > 0:
            head = DenseNet.create([d, config.num_classes], ["identity"], rng.child("head"))
        return cls(config, enc, dec, head)

    @property
    def nets(self) -> dict[str, DenseNet]:
        out = {"encoder": self.encoder, "decoder": self.decoder}
        if self.head is not None:
            out["head"] = self.head
        return out

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets.values() for p in net.params()]

    def param_names(self) -> list[str]:
        return [n for name, net in self.nets.items() for n in net.param_names(name + ".")]

    @property
    def parameter_count(self) -> int:
        return sum(net.parameter_count for net in self.nets.values())

    def copy(self) -> "VaeModel":
        return VaeModel(
            dataclasses.replace(self.config),
            self.encoder.copy(),
            self.decoder.copy(),
            self.head.copy() if self.head is not None else None,
        )

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.decoder.forward(np.atleast_2d(z), keep=False)


def _latent_params(model: VaeModel, raw: np.ndarray):
    cfg = model.config
    d = cfg.latent_dim
    raw_mu, raw_lv = raw[:, :d], raw[:, d:]
    if cfg.mode == "vae_ldp":
        t = np.tanh(raw_mu)
        mu = cfg.mean_bound * t
        v = np.exp(0.5 * raw_lv)
        sigma = np.maximum(cfg.noise_bound, v)
        with np.errstate(divide="ignore"):
            log_var = 2.0 * np.log(sigma)
        return mu, sigma, log_var, (t, v)
    return raw_mu, np.exp(0.5 * raw_lv), raw_lv, None


def encode(model: VaeModel, x: np.ndarray, rng: Rng | None = None, eta: np.ndarray | None = None) -> Encoding:
    """Latent mean, std and a reparameterized draw z = mu + sigma * eta.

    ``eta`` defaults to a fresh standard-normal draw from ``rng``; passing
    neither gives z = mu.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.config.data_dim:
        raise ParameterError(f"records have {x.shape[1]} features, model expects {model.config.data_dim}")
    raw = model.encoder.forward(x, keep=False)
    if not np.all(np.isfinite(raw)):
        raise NumericError("encoder produced non-finite output")
    mu, sigma, log_var, _ = _latent_params(model, raw)
    if eta is None:
        if rng is None:
            return Encoding(mu, sigma, log_var, mu.copy())
        eta = rng.normal(mu.shape)
    return Encoding(mu, sigma, log_var, mu + sigma * eta)


def _kl_rows(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    # expm1(l) - l rounds to >= 0, unlike exp(l) - 1 - l
    return 0.5 * np.sum(np.expm1(log_var) - log_var + mu * mu, axis=-1)


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims, averaged over rows."""
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    if mu.shape != log_var.shape:
        raise ParameterError("mu and log_var shapes differ")
    return float(np.mean(_kl_rows(mu, log_var)))


def _recon_rows(kind: str, xhat: np.ndarray, x: np.ndarray):
    diff = xhat - x
    if kind == "mse":
        return np.mean(diff * diff, axis=1), 2.0 * diff / x.shape[1]
    return np.sum(diff * diff, axis=1), 2.0 * diff


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


class _Backprop:
    """One forward/backward pass over a batch with rows kept separate."""

    def __init__(self, model: VaeModel, x: np.ndarray, eta: np.ndarray, y: np.ndarray | None = None):
        cfg = model.config
        self.model = model
        raw = model.encoder.forward(x)
        if not np.all(np.isfinite(raw)):
            raise NumericError("encoder produced non-finite output")
        mu, sigma, log_var, extra = _latent_params(model, raw)
        z = mu + sigma * eta
        xhat = model.decoder.forward(z)
        recon, g_xhat = _recon_rows(cfg.recon_loss, xhat, x)
        kl = _kl_rows(mu, log_var)
        dec_deltas, g_z = model.decoder.deltas(cfg.recon_weight * g_xhat)

        g_mu = g_z + cfg.kl_weight * mu
        ce = np.zeros(x.shape[0])
        self.head_deltas = None
        if model.head is not None:
            if y is None:
                raise ParameterError("the classifier head needs labels")
            logits = model.head.forward(mu)
            logp = _log_softmax(logits)
            rows = np.arange(x.shape[0])
            ce = -logp[rows, y]
            g_logits = np.exp(logp)
            g_logits[rows, y] -= 1.0
            self.head_deltas, g_head_in = model.head.deltas(cfg.class_weight * g_logits)
            g_mu = g_mu + g_head_in

        g_sigma = g_z * eta
        if cfg.mode == "vae_ldp":
            t, v = extra
            g_raw_mu = g_mu * cfg.mean_bound * (1.0 - t * t)
            g_sigma = g_sigma + cfg.kl_weight * (sigma - 1.0 / sigma)
            active = v >= cfg.noise_bound
            g_raw_lv = g_sigma * 0.5 * v * active
        else:
            g_raw_lv = g_sigma * 0.5 * sigma + cfg.kl_weight * 0.5 * (sigma * sigma - 1.0)
            g_raw_mu = g_mu
        self.enc_deltas, _ = model.encoder.deltas(np.concatenate([g_raw_mu, g_raw_lv], axis=1))
        self.dec_deltas = dec_deltas

        self.recon, self.kl, self.ce = recon, kl, ce
        self.rows = cfg.kl_weight * kl + cfg.recon_weight * recon + cfg.class_weight * ce
        self.batch = x.shape[0]

    def _pairs(self):
        yield self.model.encoder, self.enc_deltas
        yield self.model.decoder, self.dec_deltas
        if self.model.head is not None:
            yield self.model.head, self.head_deltas

    def grads(self, row_weights: np.ndarray | None = None, per_example: bool = False) -> list[np.ndarray]:
        out = []
        for net, deltas in self._pairs():
            out.extend(net.grads_from_deltas(deltas, row_weights, per_example))
        return out

    def row_sq_norms(self) -> np.ndarray:
        return sum(net.row_sq_norms(deltas) for net, deltas in self._pairs())

    def loss(self) -> VaeLoss:
        cfg = self.model.config
        return VaeLoss(
            float(self.recon.mean()), float(self.kl.mean()), float(self.ce.mean()),
            cfg.kl_weight, cfg.recon_weight, cfg.class_weight,
        )


def loss_and_grads(model: VaeModel, x, eta, y=None) -> tuple[float, list[np.ndarray]]:
    """Mean batch loss and its gradient for a fixed noise draw ``eta``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    bp = _Backprop(model, x, np.asarray(eta, dtype=np.float64), y)
    return float(bp.rows.mean()), [g / bp.batch for g in bp.grads()]


def per_example_grads(model: VaeModel, x, eta, y=None) -> np.ndarray:
    """``(B, P)`` matrix of flattened per-row gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    bp = _Backprop(model, x, np.asarray(eta, dtype=np.float64), y)
    return np.concatenate([g.reshape(bp.batch, -1) for g in bp.grads(per_example=True)], axis=1)


def evaluate(model: VaeModel, x, y=None) -> VaeLoss:
    """Loss at z = mu (no sampling noise); deterministic."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cfg = model.config
    raw = model.encoder.forward(x, keep=False)
    mu, sigma, log_var, _ = _latent_params(model, raw)
    xhat = model.decoder.forward(mu, keep=False)
    recon, _ = _recon_rows(cfg.recon_loss, xhat, x)
    ce = 0.0
    if model.head is not None and y is not None:
        logp = _log_softmax(model.head.forward(mu, keep=False))
        ce = float(-logp[np.arange(len(y)), y].mean())
    return VaeLoss(float(recon.mean()), float(_kl_rows(mu, log_var).mean()), ce,
                   cfg.kl_weight, cfg.recon_weight, cfg.class_weight)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    record_norms: bool = False
    collapse_kl: float = 1e-3
    collapse_patience: int = 10
    max_steps: int | None = None


@dataclass
class DpConfig:
    noise_multiplier: float
    clipping_norm: float = math.inf

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ConfigurationError("noise multiplier must be non-negative")
        if not self.clipping_norm > 0:
            raise ConfigurationError("clipping norm must be positive")
        if self.noise_multiplier > 0 and math.isinf(self.clipping_norm):
            raise ConfigurationError("an infinite clipping norm with positive noise gives infinite noise")


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    train_test_gap: list = field(default_factory=list)
    train_recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    clipped_norms: list = field(default_factory=list)
    steps: int = 0
    collapse_epoch: int | None = None
    accountant: RdpAccountant | None = None

    @property
    def collapsed(self) -> bool:
        return self.collapse_epoch is not None

    def summary(self) -> dict:
        return {
            "epochs": len(self.train_loss),
            "steps": self.steps,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_val_loss": self.val_loss[-1] if self.val_loss else None,
            "final_train_test_gap": self.train_test_gap[-1] if self.train_test_gap else None,
            "collapse_epoch": self.collapse_epoch,
        }


def train(
    model: VaeModel,
    x: np.ndarray,
    config: TrainConfig,
    rng: Rng,
    dp: DpConfig | None = None,
    y: np.ndarray | None = None,
    val: tuple | np.ndarray | None = None,
    test: tuple | np.ndarray | None = None,
) -> TrainLog:
    """Train ``model`` in place and return the training log.

    With ``dp`` set, each step clips every row's gradient to the clipping norm,
    sums, adds N(0, (z C)^2) noise and divides by the batch size, and an
    accountant with sampling rate batch/n records one step per batch.
    Sampling noise for the latent draw and the DP noise come from separate
    child streams of ``rng``, so z = 0 with no binding clip reproduces
    non-private training exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ParameterError("cannot train on an empty dataset")
    if model.head is not None and y is None:
        raise ParameterError("the classifier head needs labels")
    y = None if y is None else np.asarray(y, dtype=np.int64)
    batch = min(config.batch_size, n)
    val_x, val_y = _split_xy(val)
    test_x, test_y = _split_xy(test)

    shuffle_rng = rng.child("shuffle")
    eta_rng = rng.child("eta")
    noise_rng = rng.child("dp-noise")
    state = AdamState(learning_rate=config.learning_rate)
    params = model.params()
    names = model.param_names()
    tlog = TrainLog()
    if dp is not None:
        tlog.accountant = RdpAccountant(batch / n, dp.noise_multiplier)

    prev_val_recon = math.inf
    streak = 0
    d = model.config.latent_dim
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch):
            if config.max_steps is not None and tlog.steps >= config.max_steps:
                break
            idx = order[start : start + batch]
            xb = x[idx]
            yb = None if y is None else y[idx]
            b = len(idx)
            bp = _Backprop(model, xb, eta_rng.normal((b, d)), yb)
            if dp is None:
                grads = bp.grads()
                if config.record_norms:
                    tlog.gradient_norms.append(np.sqrt(bp.row_sq_norms()))
            else:
                norms = np.sqrt(bp.row_sq_norms())
                scale = clip_factors(norms, dp.clipping_norm)
                grads = bp.grads(row_weights=scale)
                if dp.noise_multiplier > 0:
                    sd = dp.noise_multiplier * dp.clipping_norm
                    grads = [g + sd * noise_rng.normal(g.shape) for g in grads]
                if config.record_norms:
                    tlog.gradient_norms.append(norms)
                    tlog.clipped_norms.append(norms * scale)
                tlog.accountant.accumulate(1)
            grads = [g / b for g in grads]
            adam_step(state, params, grads, names)
            tlog.steps += 1

        tr = evaluate(model, x, y)
        tlog.train_loss.append(tr.total)
        tlog.train_recon.append(tr.reconstruction)
        tlog.kl.append(tr.kl)
        watch = tr.reconstruction
        if val_x is not None:
            va = evaluate(model, val_x, val_y)
            tlog.val_loss.append(va.total)
            watch = va.reconstruction
        if test_x is not None:
            te = evaluate(model, test_x, test_y)
            tlog.test_loss.append(te.total)
            tlog.train_test_gap.append(te.total - tr.total)
        if watch >= prev_val_recon and tr.kl < config.collapse_kl:
            streak += 1
        else:
            streak = 0
        prev_val_recon = watch
        if streak >= config.collapse_patience and tlog.collapse_epoch is None:
            tlog.collapse_epoch = epoch
            log.warning("posterior collapse suspected at epoch %d (KL %.2e)", epoch, tr.kl)
        if config.max_steps is not None and tlog.steps >= config.max_steps:
            break
    return tlog


def _split_xy(data):
    if data is None:
        return None, None
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), (None if y is None else np.asarray(y, dtype=np.int64))
    return np.asarray(data, dtype=np.float64), None


def generate(
    model: VaeModel,
    n: int,
    rng: Rng,
    label: int | None = None,
    source: tuple | None = None,
) -> np.ndarray:
    """Draw ``n`` synthetic records.

    Prior mode decodes z ~ N(0, I). A conditional model needs ``label`` and
    ``source=(records, labels)``; each sample decodes a draw from the latent
    Gaussian of a random source record carrying that label.
    """
    cfg = model.config
    if n < 0:
        raise ParameterError("n must be non-negative")
    if cfg.conditional:
        if label is None:
            raise ParameterError("this model generates class-conditionally; pass a label")
        if not 0 <= label < cfg.num_classes:
            raise ParameterError(f"label {label} outside [0, {cfg.num_classes})")
        if source is None:
            raise ParameterError("conditional generation needs source=(records, labels)")
        if n == 0:
            return np.zeros((0, cfg.data_dim))
        xs, ys = source
        pool = np.flatnonzero(np.asarray(ys) == label)
        if pool.size == 0:
            raise ParameterError(f"no source records carry label {label}")
        pick = pool[rng.integers(0, pool.size, n)]
        enc = encode(model, np.asarray(xs)[pick], rng)
        return model.decode(enc.z)
    if label is not None:
        raise ParameterError("label given but the model is not class-conditional")
    if n == 0:
        return np.zeros((0, cfg.data_dim))
    return model.decode(rng.normal((n, cfg.latent_dim)))


def perturb_via_vae_ldp(model: VaeModel, x: np.ndarray, rng: Rng) -> np.ndarray:
    """Encode with bounded mean and floored std, sample, decode."""
    if model.config.mode != "vae_ldp":
        raise StateError("model was not trained in vae_ldp mode")
    return model.decode(encode(model, x, rng).z)


def save_model(path, model: VaeModel, **extra):
    cfg = dataclasses.asdict(model.config)
    return save_checkpoint(
        path,
        model.nets,
        vae=cfg,
        latent_dim=model.config.latent_dim,
        mode=model.config.mode,
        noise_bound=model.config.noise_bound,
        mean_bound=model.config.mean_bound,
        loss_weights=[model.config.kl_weight, model.config.recon_weight, model.config.class_weight],
        **extra,
    )


def load_model(path) -> tuple[VaeModel, dict]:
    nets, manifest = load_checkpoint(path)
    if "vae" not in manifest:
        raise ConfigurationError("checkpoint does not describe a VAE")
    cfg = VaeConfig(**manifest["vae"])
    return VaeModel(cfg, nets["encoder"], nets["decoder"], nets.get("head")), manifest
