"""Command line entry point: ``dpvae <subcommand> ...``.

Failures exit non-zero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import accounting
from .attack import AttackConfig, run_attack
from .data import save_dataset, split, synth_dataset
from .errors import ConfigurationError, DpvaeError
from .nn import Rng
from .pipeline import ExperimentConfig, _auto_clip, _Splits, load_experiment_data, run_sweep, train_target_model
from .report import emit_plots, emit_report, load_report, write_summary_csv
from .vae import load_model, save_model


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed)


def _splits(cfg: ExperimentConfig) -> _Splits:
    data = load_experiment_data(cfg)
    return _Splits(*split(data, cfg.raw["split"], cfg.seed))


def cmd_synth(args) -> dict:
    spec = _load_json(args.config) if args.config else {}
    for key in ("generator", "classes", "n", "noise", "side", "timesteps", "channels"):
        v = getattr(args, key)
        if v is not None:
            spec[key] = v
    data = synth_dataset(spec, seed=args.seed or 0)
    out = args.out or "dataset.csv"
    files = save_dataset(out, data)
    return {"records": len(data), "features": data.x.shape[1], "classes": data.num_classes, "files": list(files)}


def _point_value(cfg: ExperimentConfig, value):
    if cfg.setting == "baseline":
        return None
    return float(value) if value is not None else cfg.sweep[0]


def cmd_train(args) -> dict:
    cfg = _experiment(args)
    splits = _splits(cfg)
    value = _point_value(cfg, args.value)
    clip = None
    if cfg.setting == "cdp":
        c = cfg.raw["clipping_norm"]
        clip = _auto_clip(cfg, splits, Rng(cfg.seed)) if c == "auto" else (None if c is None else float(c))
    model, tlog, row, _ = train_target_model(cfg, splits, cfg.setting, value, clip)
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, "model")
    save_model(stem, model, seed=cfg.seed, steps=tlog.steps, setting=cfg.setting, privacy_param=value)
    log_doc = {"row": row, "summary": tlog.summary(), "train_loss": tlog.train_loss,
               "val_loss": tlog.val_loss, "train_test_gap": tlog.train_test_gap}
    with open(os.path.join(out, "train_log.json"), "w") as fh:
        json.dump(log_doc, fh, indent=2, sort_keys=True)
    return {"model": stem, "epsilon": row["epsilon"], "delta": row["delta"], **tlog.summary()}


def cmd_attack(args) -> dict:
    cfg = _experiment(args)
    splits = _splits(cfg)
    model, _ = load_model(args.model)
    acfg = AttackConfig(**cfg.raw["attack"])
    result = run_attack(
        model, splits.train.x, splits.test.x, acfg, Rng(cfg.seed).child("attack"),
        train_ids=[int(i) for i in splits.train.ids], test_ids=[int(i) for i in splits.test.ids],
    )
    out = args.out or "attack"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "scores.csv"), "w") as fh:
        fh.write(result.table_csv())
    with open(os.path.join(out, "attack.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
    return {"ap": result.ap, "n_per_side": result.n_per_side, "notes": result.notes}


def cmd_sweep(args) -> dict:
    cfg = _experiment(args)
    report = run_sweep(cfg)
    files = emit_report(report, args.out or "report")
    return {"rows": len(report.rows), "files": files}


def cmd_accountant(args) -> dict:
    params = _load_json(args.config) if args.config else {}
    q = args.q if args.q is not None else params.get("q")
    z = args.z if args.z is not None else params.get("z")
    steps = args.steps if args.steps is not None else params.get("T")
    delta = args.delta if args.delta is not None else params.get("delta")
    if None in (q, z, steps, delta):
        raise ConfigurationError("accountant needs q, z, steps (T) and delta")
    orders = params.get("orders", accounting.DEFAULT_ORDERS)
    acct = accounting.RdpAccountant(float(q), float(z), tuple(orders)).accumulate(int(steps))
    return acct.export(float(delta))


def cmd_report(args) -> dict:
    report = load_report(args.source)
    out = args.out or os.path.dirname(os.path.abspath(args.source))
    os.makedirs(out, exist_ok=True)
    files = emit_plots(report, out)
    csv_path = os.path.join(out, "summary.csv")
    write_summary_csv(report, csv_path)
    return {"files": [csv_path, *files]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpvae", description="Privacy/accuracy benchmark for VAEs under CDP and LDP.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help="experiment config (JSON)"):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset file"), "synth spec (JSON)")
    s.add_argument("--generator", choices=["blob-images", "toy-series"])
    s.add_argument("--classes", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--side", type=int)
    s.add_argument("--timesteps", type=int)
    s.add_argument("--channels", type=int)
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("train", help="train one target VAE"))
    s.add_argument("--value", type=float, help="privacy parameter (defaults to the first sweep value)")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("attack", help="run the reconstruction MI attack on a saved model"))
    s.add_argument("--model", required=True, help="checkpoint stem (without .json/.bin)")
    s.set_defaults(func=cmd_attack)

    s = common(sub.add_parser("sweep", help="run a full experiment sweep"))
    s.set_defaults(func=cmd_sweep)

    s = common(sub.add_parser("accountant", help="(q, z, T, delta) -> epsilon"), "accountant query (JSON)")
    s.add_argument("--q", type=float)
    s.add_argument("--z", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--delta", type=float)
    s.set_defaults(func=cmd_accountant)

    s = sub.add_parser("report", help="re-emit summary and plots from report.json")
    s.add_argument("source", help="path to report.json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except DpvaeError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 2
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, default=_jsonable, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
