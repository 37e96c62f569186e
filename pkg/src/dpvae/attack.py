"""Reconstruction membership-inference attack against a trained VAE.

A record is scored by decoding N draws from its own latent Gaussian and
averaging the distance (MSE) or similarity (SSIM) to the original. Scores
are oriented so that larger always means "more likely a member", and the
attack is summarised by the average precision over all score thresholds.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParameterError, UndefinedMetricError
from .nn import Rng
from .vae import VaeModel, encode

log = logging.getLogger(__name__)

DISTANCES = ("mse", "ssim")


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _box_mean(img: np.ndarray, w: int) -> np.ndarray:
    """Mean over every valid w x w window of the last two axes."""
    c = np.cumsum(np.cumsum(img, axis=-1), axis=-2)
    c = np.pad(c, [(0, 0)] * (img.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]
    return s / (w * w)


def ssim_map(a, b, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ParameterError("SSIM needs images with two spatial axes")
    if min(a.shape[-2:]) < window:
        raise ParameterError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    if not data_range > 0:
        raise ParameterError("data range must be positive")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03):
    """Mean SSIM over valid windows of a uniform ``window x window`` filter.

    Leading axes are treated as a batch and yield one value per image.
    """
    m = ssim_map(a, b, window, data_range, k1, k2)
    out = m.mean(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class AttackConfig:
    n_per_side: int = 1000
    samples: int = 300
    distance: str = "mse"
    ssim_window: int = 7
    data_range: float = 1.0

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ParameterError(f"unknown distance {self.distance!r}; choose from {DISTANCES}")
        if self.samples < 1:
            raise ParameterError("need at least one latent sample per record")


def reconstruction_score(
    model: VaeModel,
    x,
    samples: int,
    distance: str,
    rng: Rng,
    image_shape=None,
    window: int = 7,
    data_range: float = 1.0,
) -> float:
    """Mean reconstruction quality of ``x`` over ``samples`` latent draws.

    Returns -mean(MSE) or +mean(SSIM); higher is more member-like.
    """
    if samples < 1:
        raise ParameterError("need at least one latent sample per record")
    if distance not in DISTANCES:
        raise ParameterError(f"unknown distance {distance!r}; choose from {DISTANCES}")
    x = np.asarray(x, dtype=np.float64).ravel()
    enc = encode(model, x[None, :])
    eta = rng.normal((samples, model.config.latent_dim))
    xhat = model.decode(enc.mu + enc.sigma * eta)
    if distance == "mse":
        return -float(np.mean((xhat - x) ** 2))
    shape = image_shape or model.config.data_shape
    if shape is None or len(shape) != 2:
        raise ParameterError("SSIM scoring needs a 2-D image shape")
    sims = ssim(xhat.reshape(samples, *shape), np.broadcast_to(x.reshape(shape), (samples, *shape)),
                window, data_range)
    return float(np.mean(sims))


@dataclass
class PrCurve:
    thresholds: list
    precision: list
    recall: list


def precision_recall(scores, labels) -> tuple[float, PrCurve]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ParameterError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    # last index of every run of equal scores closes one threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    precision = tp_at / predicted
    recall = tp_at / n_pos
    # integer recall steps keep a perfect ranking at exactly 1
    ap = float(np.sum(np.diff(np.r_[0.0, tp_at]) * precision) / n_pos)
    return ap, PrCurve(s[ends].tolist(), precision.tolist(), recall.tolist())


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: sum over thresholds of (R_n - R_{n-1}) * P_n; ties share a threshold."""
    return precision_recall(scores, labels)[0]


@dataclass
class AttackRecord:
    record_id: object
    is_member: bool
    score: float = float("nan")


@dataclass
class AttackResult:
    ap: float
    records: list
    curve: PrCurve
    n_per_side: int
    samples: int
    distance: str
    notes: list = field(default_factory=list)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record_id", "score", "is_member"])
        for r in self.records:
            w.writerow([r.record_id, repr(float(r.score)), int(r.is_member)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "n_per_side": self.n_per_side,
            "samples": self.samples,
            "distance": self.distance,
            "curve": {
                "thresholds": self.curve.thresholds,
                "precision": self.curve.precision,
                "recall": self.curve.recall,
            },
            "notes": list(self.notes),
        }


def _row_keys(x: np.ndarray) -> set:
    return {row.tobytes() for row in np.ascontiguousarray(x)}


def run_attack(
    model: VaeModel,
    train_x,
    test_x,
    config: AttackConfig,
    rng: Rng,
    train_ids=None,
    test_ids=None,
    image_shape=None,
) -> AttackResult:
    """Score a balanced member/non-member sample and compute the attack AP."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_ids = [f"train:{i}" for i in range(len(train_x))] if train_ids is None else list(train_ids)
    test_ids = [f"test:{i}" for i in range(len(test_x))] if test_ids is None else list(test_ids)
    if set(train_ids) & set(test_ids) or _row_keys(train_x) & _row_keys(test_x):
        raise IntegrityError("member and non-member splits overlap")
    notes = []
    n = config.n_per_side
    cap = min(len(train_x), len(test_x))
    if n > cap:
        notes.append(f"n_per_side clamped from {n} to {cap}")
        log.info("n_per_side clamped from %d to %d", n, cap)
        n = cap
    if n < 1:
        raise ParameterError("both splits need at least one record")
    pick_rng = rng.child("pick")
    mem = np.sort(pick_rng.choice(len(train_x), n, replace=False))
    non = np.sort(pick_rng.choice(len(test_x), n, replace=False))
    records = [AttackRecord(train_ids[i], True) for i in mem] + [AttackRecord(test_ids[i], False) for i in non]
    rows = np.concatenate([train_x[mem], test_x[non]])
    score_rng = rng.child("score")
    for rec, row in zip(records, rows):
        rec.score = reconstruction_score(
            model, row, config.samples, config.distance, score_rng.child(str(rec.record_id)),
            image_shape, config.ssim_window, config.data_range,
        )
    ap, curve = precision_recall([r.score for r in records], [r.is_member for r in records])
    return AttackResult(ap, records, curve, n, config.samples, config.distance, notes)
