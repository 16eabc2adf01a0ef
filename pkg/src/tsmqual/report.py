"""Per-method evaluation of predicted scores: exclusion rules, overall and
per-class mean tables, per-(method, beta) series, and figures."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError
from .pipeline import FILE_CLASSES

log = logging.getLogger(__name__)

UNIT_BETA = 1.0
MIN_BETA = 0.25
REQUIRED = ("method", "beta", "class")


@dataclass
class EvaluationReport:
    overall: pd.DataFrame
    per_class: dict
    series: pd.DataFrame
    series_counts: pd.DataFrame
    exclusions: pd.DataFrame
    n_total: int
    score: str = "omos"
    classes: tuple = field(default=FILE_CLASSES)

    @property
    def n_excluded(self) -> int:
        return len(self.exclusions)

    @property
    def n_included(self) -> int:
        return self.n_total - self.n_excluded


def exclusion_reason(beta: float) -> str | None:
    if beta == UNIT_BETA:
        return "beta == 1"
    if beta < MIN_BETA:
        return f"beta < {MIN_BETA}"
    return None


def apply_exclusions(frame: pd.DataFrame):
    """Split rows into (included, exclusion log). Every dropped row is logged
    with its reason."""
    reasons = frame["beta"].map(exclusion_reason)
    mask = reasons.notna()
    excluded = frame.loc[mask].copy()
    excluded["reason"] = reasons[mask]
    for _, row in excluded.iterrows():
        log.info("excluded %s beta=%g (%s)", row.get("test", row["method"]), row["beta"],
                 row["reason"])
    return frame.loc[~mask].copy(), excluded


def _check_columns(frame, score):
    missing = [c for c in REQUIRED + (score,) if c not in frame.columns]
    if missing:
        raise DataError(f"evaluation input lacks columns {missing}")
    if frame[score].isna().any():
        raise DataError(f"some rows have no {score!r} value")


def evaluate(frame: pd.DataFrame, score: str = "omos") -> EvaluationReport:
    """Mean score per method overall and per file class, plus mean per
    (method, beta). Exclusions are applied before any averaging."""
    _check_columns(frame, score)
    frame = frame.copy()
    frame["beta"] = pd.to_numeric(frame["beta"], errors="raise").astype(np.float64)
    frame["class"] = frame["class"].astype(str).str.lower()
    included, excluded = apply_exclusions(frame)
    if included.empty:
        raise DataError("no rows left after exclusions")

    by_method = included.groupby("method")[score]
    overall = pd.DataFrame({"overall": by_method.mean(), "n": by_method.size()})
    per_class = {}
    for cls in FILE_CLASSES:
        sub = included[included["class"] == cls].groupby("method")[score]
        table = pd.DataFrame({"mean": sub.mean(), "n": sub.size()})
        per_class[cls] = table.sort_values(["mean", "n"]).rename_axis("method")
        overall[cls] = table["mean"]
        overall[f"n_{cls}"] = table["n"].reindex(overall.index).fillna(0).astype(int)
    overall = overall.sort_values("overall", kind="mergesort").rename_axis("method")

    grouped = included.groupby(["beta", "method"])[score]
    series = grouped.mean().unstack("method").sort_index()
    counts = grouped.size().unstack("method").fillna(0).astype(int).sort_index()
    return EvaluationReport(overall, per_class, series, counts,
                            excluded.reset_index(drop=True), len(frame), score)


def _fmt(table: pd.DataFrame) -> str:
    return table.to_string(float_format=lambda v: f"{v:.3f}", na_rep="-")


def format_report(report: EvaluationReport) -> str:
    cols = ["overall"] + list(report.classes)
    lines = [f"rows: {report.n_total} total, {report.n_included} included, "
             f"{report.n_excluded} excluded", "", _fmt(report.overall[cols + ["n"]])]
    for cls in report.classes:
        if len(report.per_class[cls]):
            lines += ["", f"[{cls}]", _fmt(report.per_class[cls])]
    return "\n".join(lines) + "\n"


def write_report(report: EvaluationReport, out_dir, figures: bool = True) -> list:
    """Machine-readable CSVs at full precision, a 3-decimal text summary and,
    optionally, PNG figures. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, table, **kw):
        p = out / name
        table.to_csv(p, lineterminator="\n", **kw)
        written.append(p)

    put("overall.csv", report.overall)
    for cls, table in report.per_class.items():
        put(f"class_{cls}.csv", table)
    put("series.csv", report.series)
    put("series_counts.csv", report.series_counts)
    put("exclusions.csv", report.exclusions, index=False)
    summary = out / "summary.txt"
    summary.write_text(format_report(report), encoding="utf-8")
    written.append(summary)
    if figures and not report.series.empty:
        written.append(plot_series(report.series, out / "series.png", report.score))
        written.append(plot_overall(report.overall, out / "overall.png", report.classes))
    return written


# -- figures -------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_series(series: pd.DataFrame, path, score: str = "omos") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in series.columns:
        col = series[method].dropna()
        ax.plot(col.index, col.values, marker="o", ms=3, label=str(method))
    ax.set_xlabel("time-scale ratio")
    ax.set_ylabel(f"mean {score.upper()}")
    ax.set_ylim(1, 5)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_overall(overall: pd.DataFrame, path, classes=FILE_CLASSES) -> Path:
    plt = _pyplot()
    cols = ["overall"] + list(classes)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.arange(len(overall))
    width = 0.8 / len(cols)
    for i, col in enumerate(cols):
        ax.bar(x + (i - (len(cols) - 1) / 2) * width, overall[col].fillna(0).values,
               width, label=col)
    ax.set_xticks(x, [str(m) for m in overall.index], rotation=30, ha="right")
    ax.set_ylim(1, 5)
    ax.set_ylabel("mean score")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_history(history: pd.DataFrame, path, selected: int | None = None) -> Path:
    """Loss and correlation curves per split, with the selected epoch marked."""
    plt = _pyplot()
    fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(10, 4))
    for split in ("tr", "val", "te"):
        if history[f"L_{split}"].notna().any():
            ax_l.plot(history["epoch"], history[f"L_{split}"], label=split)
            ax_r.plot(history["epoch"], history[f"rho_{split}"], label=split)
    ax_l.plot(history["epoch"], history["D"], "k--", lw=1, label="D")
    for ax in (ax_l, ax_r):
        if selected is not None:
            ax.axvline(selected, color="grey", lw=0.8)
        ax.set_xlabel("epoch")
        ax.legend(fontsize="small")
        ax.grid(alpha=0.3)
    ax_l.set_ylabel("RMSE (1-5 scale)")
    ax_r.set_ylabel("Pearson correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
