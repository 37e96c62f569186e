"""Central and local differential-privacy primitives.

Central: Gaussian calibration, per-example clipping and the noisy clipped
mean used by DP-Adam. Local: pixelization with Laplace noise for images and
per-feature Laplace noise for time series, with a per-record ledger that sums
the budgets of every randomizer invocation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError, StateError
from .nn import Rng, gaussian_sample, laplace_sample


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float = math.inf
    delta: float = 0.0
    sensitivity: float = 1.0
    noise_multiplier: float = 0.0
    clipping_norm: float = math.inf

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ParameterError("delta must lie in [0, 1)")
        if not self.sensitivity > 0:
            raise ParameterError("sensitivity must be positive")
        if self.noise_multiplier < 0:
            raise ParameterError("noise multiplier must be non-negative")
        if not self.clipping_norm > 0:
            raise ParameterError("clipping norm must be positive")


def gaussian_sigma(eps: float, delta: float, sensitivity: float = 1.0) -> float:
    """Smallest sigma of the classic Gaussian mechanism: sqrt(2 ln(1.25/delta)) * sens / eps.

    Only valid for eps in (0, 1); larger budgets need the RDP accountant.
    """
    if not 0.0 < eps < 1.0:
        raise ParameterError(
            f"classic Gaussian calibration needs 0 < eps < 1 (got {eps}); "
            "use dpvae.accounting.RdpAccountant for larger budgets"
        )
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if not sensitivity > 0:
        raise ParameterError("sensitivity must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / eps


def clip_factors(norms: np.ndarray, clip: float) -> np.ndarray:
    """Per-row scale min(1, C/||g||); rows with zero norm keep factor 1."""
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, clip / norms)


def clip_gradients(per_example_grads: np.ndarray, clip: float) -> np.ndarray:
    """Scale each row of a ``(B, P)`` gradient matrix to l2 norm at most ``clip``."""
    if not clip > 0:
        raise ParameterError("clipping norm must be positive")
    g = np.asarray(per_example_grads, dtype=np.float64)
    norms = np.sqrt(np.einsum("bp,bp->b", g, g))
    return g * clip_factors(norms, clip)[:, None]


def dp_gradient(per_example_grads: np.ndarray, clip: float, noise_multiplier: float, rng: Rng) -> np.ndarray:
    """Noisy clipped mean: (sum_i clip(g_i) + N(0, (z C)^2 I)) / B."""
    g = np.asarray(per_example_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1:
        raise ParameterError("expected a non-empty (B, P) matrix of per-example gradients")
    total = clip_gradients(g, clip).sum(axis=0)
    if noise_multiplier > 0:
        total = total + gaussian_sample(rng, total.shape, noise_multiplier * clip)
    return total / g.shape[0]


def clipping_norm_heuristic(gradient_norm_log) -> float:
    """Median of the per-example gradient norms seen in a non-private run."""
    norms = np.asarray(list(gradient_norm_log), dtype=np.float64).ravel()
    if norms.size == 0:
        raise StateError("no gradient norms recorded; run a preliminary non-private training first")
    return float(np.median(norms))


@dataclass
class LedgerEntry:
    record_id: int | str
    mechanism: str
    eps_i: float
    invocations: int

    @property
    def eps_total(self) -> float:
        return self.eps_i * self.invocations


@dataclass
class LocalAlgorithmLedger:
    """Budget spent per record; a record's total is the sum of its entries."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, record_id, mechanism: str, eps_i: float, invocations: int = 1) -> None:
        self.entries.append(LedgerEntry(record_id, mechanism, float(eps_i), int(invocations)))

    def total(self, record_id) -> float:
        return sum(e.eps_total for e in self.entries if e.record_id == record_id)

    def totals(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e.record_id] = out.get(e.record_id, 0.0) + e.eps_total
        return out

    @property
    def max_total(self) -> float:
        t = self.totals()
        return max(t.values()) if t else 0.0

    def export(self) -> list[dict]:
        return [{**asdict(e), "eps_total": e.eps_total} for e in self.entries]

    def to_json(self) -> str:
        return json.dumps(self.export(), indent=2)


@dataclass(frozen=True)
class PixelizationParams:
    """Parameters of pixelization; ``epsilon_per_feature=inf`` disables noise."""

    epsilon_per_feature: float
    neighborhood: float = 1.0
    cell_size: int = 1
    value_range: float = 255.0

    def __post_init__(self):
        if not self.epsilon_per_feature > 0:
            raise ParameterError("epsilon must be positive")
        if not self.neighborhood > 0:
            raise ParameterError("neighborhood m must be positive")
        if int(self.cell_size) != self.cell_size or self.cell_size < 1:
            raise ParameterError("cell size b must be a positive integer")
        if not self.value_range > 0:
            raise ParameterError("value range must be positive")

    @property
    def scale(self) -> float:
        return self.value_range * self.neighborhood / (self.cell_size**2 * self.epsilon_per_feature)


def pixelize_ldp(
    image: np.ndarray,
    params: PixelizationParams,
    rng: Rng,
    ledger: LocalAlgorithmLedger | None = None,
    record_id=0,
    input_range: float = 1.0,
) -> np.ndarray:
    """Pixelize a 2-D image into b x b cell means and add Laplace noise per cell.

    The image is given in model units ``[0, input_range]``; noise is added in
    ``[0, value_range]`` units, the result clamped and mapped back.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ParameterError(f"pixelization needs a 2-D image, got shape {img.shape}")
    b = int(params.cell_size)
    h, w = img.shape
    if h % b or w % b:
        raise ParameterError(f"image {h}x{w} is not divisible into {b}x{b} cells")
    vr = params.value_range
    raw = img * (vr / input_range)
    cells = raw.reshape(h // b, b, w // b, b).mean(axis=(1, 3))
    lam = params.scale
    if lam > 0:
        cells = cells + laplace_sample(rng, lam, cells.shape)
    cells = np.clip(cells, 0.0, vr)
    out = np.repeat(np.repeat(cells, b, axis=0), b, axis=1)
    if ledger is not None:
        ledger.record(record_id, "pixelization", params.epsilon_per_feature, 1)
    return out * (input_range / vr)


def feature_sensitivity(train_series: np.ndarray) -> np.ndarray:
    """Per-feature sensitivity: the largest absolute observed value of each feature (last axis)."""
    s = np.asarray(train_series, dtype=np.float64)
    sens = np.abs(s.reshape(-1, s.shape[-1])).max(axis=0)
    # an all-zero feature still needs a positive scale
    return np.where(sens > 0, sens, 1.0)


def laplace_feature_ldp(
    series: np.ndarray,
    eps_per_feature: float,
    per_feature_sensitivity,
    rng: Rng,
    ledger: LocalAlgorithmLedger | None = None,
    record_ids=None,
) -> np.ndarray:
    """Laplace-perturb every scalar of ``series`` (records along axis 0, features on the last axis).

    Each scalar is one randomizer invocation, so a record's ledger total is
    ``eps_per_feature`` times its scalar count.
    """
    x = np.asarray(series, dtype=np.float64)
    sens = np.asarray(per_feature_sensitivity, dtype=np.float64).ravel()
    if sens.size != x.shape[-1]:
        raise ParameterError(f"{sens.size} sensitivities for {x.shape[-1]} features")
    if np.any(sens <= 0):
        raise ParameterError("sensitivities must be positive")
    if not eps_per_feature > 0:
        raise ParameterError("epsilon must be positive")
    scales = sens / eps_per_feature
    out = x.copy()
    if np.all(scales > 0):
        out = out + rng.laplace(1.0, x.shape) * scales
    if ledger is not None:
        n = x.shape[0] if x.ndim > 1 else 1
        per_record = x.size // n
        ids = range(n) if record_ids is None else record_ids
        for rid in ids:
            ledger.record(rid, "laplace", eps_per_feature, per_record)
    return out
