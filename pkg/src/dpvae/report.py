"""Report emission: report.json, summary.csv and SVG trade-off plots."""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DpvaeError  # noqa: E402
from .pipeline import CSV_COLUMNS, TradeoffReport, summary_records  # noqa: E402

PLOTS = (
    ("acc", "accuracy_vs_epsilon.svg", "target classifier test accuracy"),
    ("ap", "ap_vs_epsilon.svg", "MI AP"),
    ("phi", "phi_vs_epsilon.svg", "phi"),
)
PARAM_LABELS = {
    "cdp": "noise multiplier z",
    "ldp_full": "per-feature epsilon",
    "ldp_train": "per-feature epsilon",
    "vae_ldp": "noise bound sigma",
}

STYLE = {
    "svg.hashsalt": "dpvae",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (4.5, 3.2),
}


class ReportIOError(DpvaeError, OSError):
    kind = "io"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary_csv(report: TradeoffReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in summary_records(report):
            w.writerow([_fmt(rec[c]) for c in CSV_COLUMNS])


def _plot_rows(report: TradeoffReport) -> list[dict]:
    return [r for r in report.rows if r.get("setting") != "baseline" and r.get("status") == "ok"]


def _x_axis(rows: list[dict], setting: str):
    eps = [r.get("epsilon") for r in rows]
    if eps and all(e is not None and math.isfinite(e) and e > 0 for e in eps):
        return eps, "epsilon", True
    return [r["privacy_param"] for r in rows], PARAM_LABELS.get(setting, "privacy parameter"), False


def plot_metric(report: TradeoffReport, key: str, ylabel: str, path) -> int:
    """Draw one metric over the sweep; returns the number of plotted points."""
    rows = _plot_rows(report)
    setting = report.config.get("setting", "")
    xs, xlabel, log_x = _x_axis(rows, setting)
    pts = [(x, r[key]) for x, r in zip(xs, rows) if r.get(key) is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", gid="series", label=setting)
        base = report.baseline.get(key)
        if base is not None:
            ax.axhline(base, linestyle="--", color="0.4", gid="baseline", label="no privacy")
        if log_x and pts:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if key == "phi":
            ax.set_ylim(-0.05, 2.05)
        else:
            ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="best", fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return len(pts)


def emit_plots(report: TradeoffReport, out_dir) -> list[str]:
    paths = []
    for key, name, label in PLOTS:
        p = os.path.join(out_dir, name)
        plot_metric(report, key, label, p)
        paths.append(p)
    return paths


def emit_report(report: TradeoffReport, out_dir) -> list[str]:
    """Write report.json, summary.csv and the three plots into ``out_dir``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, "report.json")
        with open(json_path, "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        csv_path = os.path.join(out_dir, "summary.csv")
        write_summary_csv(report, csv_path)
        return [json_path, csv_path, *emit_plots(report, out_dir)]
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {out_dir}: {exc}") from exc


def load_report(path) -> TradeoffReport:
    with open(path) as fh:
        return TradeoffReport.from_dict(json.load(fh))
