"""Experiment orchestration: one baseline run plus one run per sweep value.

Each run perturbs data as its privacy setting demands, trains the target VAE
(DP-Adam for ``cdp``), generates a labelled synthetic set the size of the
training split, trains the target classifier on it, attacks the VAE with
unperturbed train/test records and scores the trade-off against the baseline.

Every run draws its randomness from the same named child streams of the
experiment seed, so two settings differ only by their privacy mechanism.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .attack import AttackConfig, run_attack
from .data import Dataset, check_fractions, load_dataset, split, synth_dataset
from .errors import ConfigurationError
from .mechanisms import (
    LocalAlgorithmLedger,
    PixelizationParams,
    clipping_norm_heuristic,
    feature_sensitivity,
    laplace_feature_ldp,
    pixelize_ldp,
)
from .nn import Rng
from .tradeoff import ClassifierConfig, PhiInputs, phi, train_target_classifier
from .vae import DpConfig, TrainConfig, VaeConfig, VaeModel, generate, perturb_via_vae_ldp, train

log = logging.getLogger(__name__)

SETTINGS = ("baseline", "cdp", "ldp_full", "ldp_train", "vae_ldp")
CSV_COLUMNS = ("setting", "privacy_param", "epsilon", "delta", "acc", "ap", "phi", "train_test_gap")

DEFAULTS: dict = {
    "dataset": {"synthetic": {"generator": "blob-images", "classes": 4, "n": 200, "noise": 0.1}},
    "split": [0.5, 0.2, 0.3],
    "setting": "baseline",
    "sweep": [],
    "clipping_norm": "auto",
    "clip_warmup_epochs": 20,
    "ldp_mechanism": "auto",
    "pixelization": {"neighborhood": 1.0, "cell_size": 1, "value_range": 255.0},
    "mean_bound": 3.0,
    "delta": None,
    "vae": {"latent_dim": 8, "hidden": [64], "kl_weight": 1.0, "recon_weight": 1.0, "class_weight": 0.0,
            "recon_loss": "sse"},
    "train": {"epochs": 100, "batch_size": 32, "learning_rate": 1e-3},
    "classifier": {"hidden": [64], "learning_rate": 1e-3, "batch_size": 32, "max_epochs": 200, "patience": 10},
    "attack": {"n_per_side": 1000, "samples": 300, "distance": "mse"},
    "seed": 0,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` keeps the merged JSON form."""

    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self) -> None:
        r = self.raw
        check_fractions(r["split"])
        if r["setting"] not in SETTINGS:
            raise ConfigurationError(f"setting must be one of {SETTINGS}, got {r['setting']!r}")
        sweep = [float(v) for v in r["sweep"]]
        if r["setting"] != "baseline":
            if not sweep:
                raise ConfigurationError("sweep values must be non-empty for a private setting")
            if sweep != sorted(sweep):
                raise ConfigurationError("sweep values must be sorted ascending")
        c = r["clipping_norm"]
        if not (c == "auto" or c is None or (isinstance(c, (int, float)) and c > 0)):
            raise ConfigurationError("clipping_norm must be 'auto', null (no clipping) or a positive number")
        if r["ldp_mechanism"] not in ("auto", "pixelization", "laplace"):
            raise ConfigurationError("ldp_mechanism must be auto, pixelization or laplace")
        AttackConfig(**r["attack"])
        ds = r["dataset"]
        if not isinstance(ds, dict) or len(set(ds) & {"synthetic", "path"}) != 1:
            raise ConfigurationError("dataset needs exactly one of 'synthetic' or 'path'")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def setting(self) -> str:
        return self.raw["setting"]

    @property
    def sweep(self) -> list[float]:
        return [float(v) for v in self.raw["sweep"]]

    def with_overrides(self, seed=None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        return ExperimentConfig(raw)


def load_experiment_data(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.raw["dataset"]
    if "synthetic" in ds:
        return synth_dataset(ds["synthetic"], seed=cfg.seed)
    return load_dataset(ds["path"], ds.get("record_shape"))


@dataclass
class TradeoffReport:
    config: dict
    baseline: dict
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config, "baseline": self.baseline, "rows": self.rows}

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffReport":
        return cls(d["config"], d["baseline"], d["rows"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class _Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def total(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def _vae_config(cfg: ExperimentConfig, data: Dataset, mode: str = "standard", noise_bound: float = 0.0) -> VaeConfig:
    v = dict(cfg.raw["vae"])
    classes = data.num_classes
    shape = data.record_shape if data.record_shape is not None and len(data.record_shape) == 2 else None
    out_act = v.pop("output_activation", None)
    if out_act is None:
        out_act = "sigmoid" if data.x.min() >= 0.0 and data.x.max() <= 1.0 else "tanh"
    return VaeConfig(
        data_dim=data.x.shape[1],
        num_classes=classes or None,
        conditional=bool(classes),
        data_shape=shape,
        output_activation=out_act,
        mode=mode,
        noise_bound=noise_bound,
        mean_bound=float(cfg.raw["mean_bound"]),
        **v,
    )


def _train_config(cfg: ExperimentConfig, **over) -> TrainConfig:
    t = dict(cfg.raw["train"])
    t.update(over)
    return TrainConfig(**t)


def _generate_labelled(model: VaeModel, source: Dataset, rng: Rng) -> Dataset:
    counts = np.bincount(source.y, minlength=model.config.num_classes)
    xs, ys = [], []
    for label, k in enumerate(counts):
        if k == 0:
            continue
        xs.append(generate(model, int(k), rng.child(f"class-{label}"), label=label, source=(source.x, source.y)))
        ys.append(np.full(int(k), label))
    return Dataset(np.concatenate(xs), np.concatenate(ys), source.record_shape)


def _clf_config(cfg: ExperimentConfig) -> ClassifierConfig:
    c = dict(cfg.raw["classifier"])
    if "hidden" in c:
        c["hidden"] = tuple(c["hidden"])
    return ClassifierConfig(**c)


def _attack(cfg: ExperimentConfig, model: VaeModel, splits: _Splits, rng: Rng):
    acfg = AttackConfig(**cfg.raw["attack"])
    return run_attack(
        model, splits.train.x, splits.test.x, acfg, rng,
        train_ids=[int(i) for i in splits.train.ids], test_ids=[int(i) for i in splits.test.ids],
    )


def _auto_clip(cfg: ExperimentConfig, splits: _Splits, root: Rng) -> float:
    rng = root.child("clip-warmup")
    model = VaeModel.create(_vae_config(cfg, splits.train), rng.child("init"))
    tcfg = _train_config(cfg, epochs=int(cfg.raw["clip_warmup_epochs"]), record_norms=True)
    tlog = train(model, splits.train.x, tcfg, rng.child("train"), y=splits.train.y)
    return clipping_norm_heuristic(np.concatenate(tlog.gradient_norms))


def _ldp_mechanism(cfg: ExperimentConfig, data: Dataset) -> str:
    mech = cfg.raw["ldp_mechanism"]
    if mech != "auto":
        return mech
    if data.record_shape is not None and len(data.record_shape) == 2 and data.x.min() >= 0 and data.x.max() <= 1:
        return "pixelization"
    return "laplace"


def _perturb(cfg: ExperimentConfig, data: Dataset, eps_i: float, sens, rng: Rng, ledger) -> Dataset:
    mech = _ldp_mechanism(cfg, data)
    if mech == "pixelization":
        p = cfg.raw["pixelization"]
        params = PixelizationParams(eps_i, float(p["neighborhood"]), int(p["cell_size"]), float(p["value_range"]))
        out = np.empty_like(data.x)
        for k, (row, rid) in enumerate(zip(data.x, data.ids)):
            out[k] = pixelize_ldp(row.reshape(data.record_shape), params, rng, ledger, int(rid)).ravel()
        return data.replace_x(out)
    shape = data.record_shape or (data.x.shape[1], 1)
    series = data.x.reshape(len(data), *shape)
    if series.ndim == 2:
        series = series[..., None]
    out = laplace_feature_ldp(series, eps_i, sens, rng, ledger, [int(i) for i in data.ids])
    return data.replace_x(out.reshape(len(data), -1))


def train_target_model(cfg: ExperimentConfig, splits: _Splits, setting: str, value, clip: float | None):
    """Perturb data as ``setting`` requires and train the target VAE.

    Returns the model, its training log, a partially filled report row and
    the (possibly perturbed) train/val/test splits the model saw.
    """
    root = Rng(cfg.seed)
    row: dict = {"setting": setting, "privacy_param": value, "epsilon": None, "delta": None}
    train_d, val_d, test_d = splits.train, splits.val, splits.test
    dp = None
    vae_mode, noise_bound = "standard", 0.0

    if setting == "cdp":
        c = math.inf if clip is None else clip
        dp = DpConfig(float(value), c)
        row["clipping_norm"] = c
    elif setting in ("ldp_full", "ldp_train"):
        ledger = LocalAlgorithmLedger()
        ldp_rng = root.child("ldp")
        sens = None
        if _ldp_mechanism(cfg, train_d) == "laplace":
            shape = train_d.record_shape or (train_d.x.shape[1], 1)
            series = train_d.x.reshape(len(train_d), *shape)
            sens = feature_sensitivity(series if series.ndim > 2 else series[..., None])
        train_d = _perturb(cfg, train_d, float(value), sens, ldp_rng.child("train"), ledger)
        if setting == "ldp_full":
            val_d = _perturb(cfg, val_d, float(value), sens, ldp_rng.child("val"), ledger)
            test_d = _perturb(cfg, test_d, float(value), sens, ldp_rng.child("test"), ledger)
        row["epsilon"] = ledger.max_total
        row["delta"] = 0.0
        row["ledger"] = ledger.export()
    elif setting == "vae_ldp":
        vae_mode, noise_bound = "vae_ldp", float(value)

    vae_cfg = _vae_config(cfg, train_d, vae_mode, noise_bound)
    model = VaeModel.create(vae_cfg, root.child("vae-init"))
    tlog = train(
        model, train_d.x, _train_config(cfg), root.child("vae-train"), dp=dp, y=train_d.y,
        val=(val_d.x, val_d.y), test=(test_d.x, test_d.y),
    )
    row["train_test_gap"] = tlog.train_test_gap[-1]
    row["collapse_epoch"] = tlog.collapse_epoch
    row["vae_steps"] = tlog.steps

    if setting == "cdp":
        delta = cfg.raw["delta"] or accounting.default_delta(len(splits.train))
        export = tlog.accountant.export(delta)
        row["accounting"] = export
        row["epsilon"] = export["eps"]
        row["delta"] = delta
    if setting == "vae_ldp":
        delta = cfg.raw["delta"] or accounting.default_delta(splits.total)
        row["epsilon"] = accounting.vae_ldp_epsilon(noise_bound, delta, vae_cfg.latent_dim, vae_cfg.mean_bound)
        row["delta"] = delta
    return model, tlog, row, _Splits(train_d, val_d, test_d)


def _run_point(cfg: ExperimentConfig, splits: _Splits, setting: str, value, baseline: dict | None,
               clip: float | None) -> dict:
    root = Rng(cfg.seed)
    model, _, row, seen = train_target_model(cfg, splits, setting, value, clip)
    train_d, val_d, test_d = seen.train, seen.val, seen.test

    if setting == "vae_ldp":
        gen_d = train_d.replace_x(perturb_via_vae_ldp(model, train_d.x, root.child("vae-ldp-perturb")))
    else:
        gen_d = _generate_labelled(model, train_d, root.child("generate"))

    _, acc = train_target_classifier(
        gen_d.x, gen_d.y, test_d.x, test_d.y, _clf_config(cfg), root.child("classifier"),
        class_count=splits.train.num_classes, val=(val_d.x, val_d.y),
    )
    row["acc"] = acc
    result = _attack(cfg, model, splits, root.child("attack"))
    row["ap"] = result.ap
    row["attack"] = result.to_dict()
    row["attack"]["table"] = [[r.record_id, r.score, bool(r.is_member)] for r in result.records]

    if baseline is not None:
        row["phi"] = phi(PhiInputs.for_classes(baseline["ap"], result.ap, baseline["acc"], acc,
                                               splits.train.num_classes))
    else:
        row["phi"] = None
    row["status"] = "ok"
    return row


def run_sweep(cfg: ExperimentConfig) -> TradeoffReport:
    data = load_experiment_data(cfg)
    if data.y is None:
        raise ConfigurationError("the trade-off pipeline needs a labelled dataset")
    train_d, val_d, test_d = split(data, cfg.raw["split"], cfg.seed)
    splits = _Splits(train_d, val_d, test_d)

    baseline = _run_point(cfg, splits, "baseline", None, None, None)
    _, real_acc = train_target_classifier(
        train_d.x, train_d.y, test_d.x, test_d.y, _clf_config(cfg), Rng(cfg.seed).child("classifier"),
        class_count=data.num_classes, val=(val_d.x, val_d.y),
    )
    baseline["real_data_acc"] = real_acc
    baseline["split_sizes"] = [len(train_d), len(val_d), len(test_d)]
    report = TradeoffReport(copy.deepcopy(cfg.raw), baseline)

    if cfg.setting == "baseline":
        report.rows.append(_summary_row(baseline))
        return report

    clip = None
    if cfg.setting == "cdp":
        c = cfg.raw["clipping_norm"]
        clip = _auto_clip(cfg, splits, Rng(cfg.seed)) if c == "auto" else (None if c is None else float(c))
    for value in cfg.sweep:
        try:
            row = _run_point(cfg, splits, cfg.setting, value, baseline, clip)
        except Exception as exc:  # one failed point must not sink the sweep
            log.exception("sweep point %s=%s failed", cfg.setting, value)
            row = {"setting": cfg.setting, "privacy_param": value, "status": "failed",
                   "error": f"{type(exc).__name__}: {exc}"}
        report.rows.append(row)
    return report


def _summary_row(point: dict) -> dict:
    return {k: v for k, v in point.items() if k not in ("real_data_acc", "split_sizes")}


def summary_records(report: TradeoffReport) -> list[dict]:
    out = []
    for row in report.rows:
        out.append({k: row.get(k) for k in CSV_COLUMNS})
    return out
