"""Target-classifier accuracy and the relative privacy-accuracy score phi."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, ParameterError
from .nn import AdamState, DenseNet, Rng, adam_step

ATK_BASE = 0.5


@dataclass
class ClassifierConfig:
    hidden: tuple = (64,)
    activation: str = "relu"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    holdout_fraction: float = 0.2


@dataclass
class TargetClassifier:
    net: DenseNet
    class_count: int
    patience: int = 10
    epochs_trained: int = 0
    history: list = field(default_factory=list)

    def predict_proba(self, x) -> np.ndarray:
        return self.net.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)), keep=False)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or labels.size == 0:
        raise ParameterError("predictions and labels must be non-empty and equally long")
    return float(np.mean(pred == labels))


def _xent(probs: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))))


def train_target_classifier(
    gen_x,
    gen_y,
    test_x,
    test_y,
    config: ClassifierConfig,
    rng: Rng,
    class_count: int | None = None,
    val: tuple | None = None,
) -> tuple[TargetClassifier, float]:
    """Fit a softmax classifier on generated data; return it and its test accuracy.

    Early stopping watches the cross-entropy on ``val`` when given, otherwise
    on a held-out slice of the generated data; the best weights are restored.
    """
    gen_x = np.asarray(gen_x, dtype=np.float64)
    gen_y = np.asarray(gen_y, dtype=np.int64)
    if gen_x.shape[0] == 0:
        raise DegenerateDataError("no generated records to train on")
    if np.unique(gen_y).size < 2:
        raise DegenerateDataError("generated data contains a single class")
    classes = int(class_count or max(gen_y.max(), np.max(test_y)) + 1)

    if val is None:
        perm = rng.child("holdout").permutation(len(gen_x))
        k = max(1, int(round(config.holdout_fraction * len(gen_x))))
        hold, fit = perm[:k], perm[k:]
        val_x, val_y = gen_x[hold], gen_y[hold]
        fit_x, fit_y = gen_x[fit], gen_y[fit]
    else:
        val_x = np.asarray(val[0], dtype=np.float64)
        val_y = np.asarray(val[1], dtype=np.int64)
        fit_x, fit_y = gen_x, gen_y

    dims = [gen_x.shape[1], *config.hidden, classes]
    acts = [config.activation] * len(config.hidden) + ["softmax"]
    net = DenseNet.create(dims, acts, rng.child("init"))
    clf = TargetClassifier(net, classes, config.patience)
    state = AdamState(learning_rate=config.learning_rate)
    params = net.params()
    shuffle = rng.child("shuffle")
    n = len(fit_x)
    batch = min(config.batch_size, n)
    best = np.inf
    best_params = [p.copy() for p in params]
    stale = 0
    for epoch in range(config.max_epochs):
        order = shuffle.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            probs = net.forward(fit_x[idx])
            # softmax + cross-entropy: dL/dlogits = p - onehot; fed through the softmax layer as dL/dp
            g = np.zeros_like(probs)
            rows = np.arange(len(idx))
            g[rows, fit_y[idx]] = -1.0 / np.clip(probs[rows, fit_y[idx]], 1e-300, None)
            grads = net.backward(g / len(idx))
            adam_step(state, params, grads)
        loss = _xent(clf.predict_proba(val_x), val_y)
        clf.history.append(loss)
        clf.epochs_trained = epoch + 1
        if loss < best - 1e-12:
            best = loss
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for p, b in zip(params, best_params):
        p[...] = b
    acc = accuracy(clf.predict(test_x), np.asarray(test_y))
    return clf, acc


@dataclass(frozen=True)
class PhiInputs:
    atk_orig: float
    atk_eps: float
    acc_orig: float
    acc_eps: float
    acc_base: float
    atk_base: float = ATK_BASE

    def __post_init__(self):
        for name in ("atk_orig", "atk_eps", "acc_orig", "acc_eps", "acc_base", "atk_base"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name}={v} outside [0, 1]")

    @classmethod
    def for_classes(cls, atk_orig, atk_eps, acc_orig, acc_eps, class_count: int) -> "PhiInputs":
        return cls(atk_orig, atk_eps, acc_orig, acc_eps, 1.0 / class_count)


def phi(inputs: PhiInputs) -> float:
    """Relative attack-performance loss over relative accuracy loss, clamped to [0, 2].

    Zero numerator gives 0 (including 0/0); positive numerator over a
    non-positive denominator gives the cap 2.
    """
    num = max(0.0, (inputs.atk_orig - inputs.atk_eps) * (inputs.acc_orig - inputs.acc_base))
    den = max(0.0, (inputs.acc_orig - inputs.acc_eps) * (inputs.atk_orig - inputs.atk_base))
    if num <= 0.0:
        return 0.0
    if den <= 0.0:
        return 2.0
    return min(2.0, num / den)
