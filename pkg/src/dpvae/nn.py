"""Dense network substrate: layers with exact gradients, Adam, seeded RNG.

Arrays are plain ``numpy.ndarray`` objects of dtype float64; weight matrices
are stored as ``(in_features, out_features)`` so a forward pass is
``x @ W + b`` on row-major batches.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, ParameterError, StateError

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid", "softmax")
DEFAULT_LEAKY_SLOPE = 0.2


class Rng:
    """Seeded counter-based generator (Philox) with named child streams.

    Children are derived from the parent seed and a name, never from the
    parent's stream position, so ``rng.child("noise")`` yields the same
    sequence no matter how much of the parent has been consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str | int) -> "Rng":
        if isinstance(name, int):
            key = name
        else:
            key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
        return Rng(self.seed, self.path + (key,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def laplace(self, scale, shape=()) -> np.ndarray:
        return self._gen.laplace(0.0, scale, shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)


def gaussian_sample(rng: Rng, shape, scale: float = 1.0) -> np.ndarray:
    if scale < 0 or not np.isfinite(scale):
        raise ParameterError(f"gaussian scale must be finite and >= 0, got {scale}")
    return scale * rng.normal(shape)


def laplace_sample(rng: Rng, scale: float, shape) -> np.ndarray:
    if not scale > 0 or not np.isfinite(scale):
        raise ParameterError(f"laplace scale must be finite and > 0, got {scale}")
    return rng.laplace(scale, shape)


def _act(name: str, h: np.ndarray, slope: float) -> np.ndarray:
    if name == "identity":
        return h
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "leaky_relu":
        return np.where(h > 0, h, slope * h)
    if name == "tanh":
        return np.tanh(h)
    if name == "sigmoid":
        # split form avoids exp overflow for large |h|
        out = np.empty_like(h)
        pos = h >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
        e = np.exp(h[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if name == "softmax":
        s = h - h.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=-1, keepdims=True)
    raise ConfigurationError(f"unknown activation {name!r}")


def _act_backward(name: str, h: np.ndarray, a: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    """Map dL/d(activation output) to dL/d(pre-activation)."""
    if name == "identity":
        return g
    if name == "relu":
        return g * (h > 0)
    if name == "leaky_relu":
        return g * np.where(h > 0, 1.0, slope)
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    if name == "softmax":
        return a * (g - (g * a).sum(axis=-1, keepdims=True))
    raise ConfigurationError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigurationError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not compose"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ConfigurationError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class DenseNet:
    """Feed-forward stack of dense layers.

    ``forward`` retains the intermediates needed by ``backward``; calling
    ``backward`` without a preceding forward raises :class:`StateError`.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ConfigurationError("a DenseNet needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer {i} outputs {a.out_dim} features but layer {i + 1} expects {b.in_dim}"
                )
        self.layers = list(layers)
        self._cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    @classmethod
    def create(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: Rng,
        slope: float = DEFAULT_LEAKY_SLOPE,
    ) -> "DenseNet":
        """Glorot-uniform initialised net; ``len(activations) == len(dims) - 1``."""
        if len(activations) != len(dims) - 1:
            raise ConfigurationError("need exactly one activation per layer")
        layers = []
        for n_in, n_out, act in zip(dims[:-1], dims[1:], activations):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, (n_in, n_out))
            layers.append(Layer(w, np.zeros(n_out), act, slope))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend((l.weight, l.bias))
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names.extend((f"{prefix}layer{i}.weight", f"{prefix}layer{i}.bias"))
        return names

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"input has {x.shape[-1]} features, first layer expects {self.in_dim}"
            )
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        cache = []
        for l in self.layers:
            h = a @ l.weight + l.bias
            out = _act(l.activation, h, l.slope)
            cache.append((a, h, out))
            a = out
        self._cache = cache if keep else None
        return a[0] if squeeze else a

    __call__ = forward

    def deltas(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Per-layer pre-activation gradients and the gradient w.r.t. the input.

        Rows stay separate: ``deltas[l][i]`` belongs to batch row ``i`` only.
        """
        if self._cache is None:
            raise StateError("backward called without a retained forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        out = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            a_in, h, a_out = self._cache[i]
            d = _act_backward(layer.activation, h, a_out, g, layer.slope)
            out[i] = d
            g = d @ layer.weight.T
        return out, g

    def grads_from_deltas(
        self,
        deltas: list[np.ndarray],
        row_weights: np.ndarray | None = None,
        per_example: bool = False,
    ) -> list[np.ndarray]:
        """Parameter gradients summed over rows, or stacked per row.

        ``row_weights`` rescales each row's contribution before summation,
        which is how per-example clipping is applied without materialising
        per-example gradients.
        """
        grads = []
        for (a_in, _, _), d in zip(self._cache, deltas):
            if row_weights is not None:
                d = d * row_weights[:, None]
            if per_example:
                grads.append(np.einsum("bi,bo->bio", a_in, d))
                grads.append(d.copy())
            else:
                grads.append(a_in.T @ d)
                grads.append(d.sum(axis=0))
        return grads

    def row_sq_norms(self, deltas: list[np.ndarray]) -> np.ndarray:
        """Squared l2 norm of each row's full parameter gradient.

        Uses ||a d^T||_F = ||a|| ||d|| for the weight block of a dense layer.
        """
        total = 0.0
        for (a_in, _, _), d in zip(self._cache, deltas):
            dd = np.einsum("bo,bo->b", d, d)
            total = total + dd * (np.einsum("bi,bi->b", a_in, a_in) + 1.0)
        return total

    def backward(self, loss_grad: np.ndarray, per_example: bool = False) -> list[np.ndarray]:
        """Gradient of the loss w.r.t. every parameter, in ``params()`` order.

        ``loss_grad`` is dL/d(output) for the batch from the last ``forward``.
        With ``per_example=True`` each returned array gains a leading batch axis.
        """
        deltas, _ = self.deltas(loss_grad)
        return self.grads_from_deltas(deltas, per_example=per_example)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.slope) for l in self.layers]
        )

    def spec(self) -> dict:
        return {
            "dims": [self.in_dim] + [l.out_dim for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "slopes": [l.slope for l in self.layers],
        }


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {b}")


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    names: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ConfigurationError(f"{len(params)} parameter blocks but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient block {i} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"block {i}"
            raise NumericError(f"non-finite gradient in {label}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon_hat)
    return params


def save_checkpoint(path: str | os.PathLike, nets: dict[str, DenseNet], **extra) -> tuple[str, str]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (f64le params).

    Parameters are concatenated net by net in manifest order, layer by layer,
    weight then bias.
    """
    path = os.fspath(path)
    blobs = []
    manifest = {"format": "dpvae-checkpoint", "dtype": "f64le", "nets": []}
    for name, net in nets.items():
        entry = {"name": name, **net.spec()}
        manifest["nets"].append(entry)
        blobs.extend(p.ravel() for p in net.params())
    manifest.update(extra)
    flat = np.concatenate(blobs) if blobs else np.zeros(0)
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    flat.astype("<f8").tofile(path + ".bin")
    return path + ".json", path + ".bin"


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, DenseNet], dict]:
    path = os.fspath(path)
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    flat = np.fromfile(path + ".bin", dtype="<f8").astype(np.float64)
    nets = {}
    pos = 0
    for entry in manifest["nets"]:
        dims = entry["dims"]
        layers = []
        for n_in, n_out, act, slope in zip(dims[:-1], dims[1:], entry["activations"], entry["slopes"]):
            w = flat[pos : pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = flat[pos : pos + n_out]
            pos += n_out
            layers.append(Layer(w.copy(), b.copy(), act, slope))
        nets[entry["name"]] = DenseNet(layers)
    if pos != flat.size:
        raise ConfigurationError(f"checkpoint blob has {flat.size} values, manifest describes {pos}")
    return nets, manifest
