"""Metrics, cross-domain gaps, stage-cost accounting, and report emission.

The positive class is always SUICIDE. Metrics are stored as fractions;
rendered reports show percentages to two decimals. Zero-denominator
conventions: precision is 0 when nothing was predicted positive, recall is
0 when nothing is positive, and F1 is 0 when precision + recall is 0.

Reports come in four forms written side by side: a human-readable table, a
machine jsonl report, a delimited csv of the metric rows, and matplotlib
figures for the per-domain metrics, the cross-domain gaps, and the stage
cost split.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .cascade import EscalationReason, RoutingDecision
from .core import Dataset, Label, check_probability
from .errors import EmptyEvaluationError, LengthMismatchError
from .modelio import atomic_write_text

__all__ = [
    "ConfusionCounts",
    "GapReport",
    "MetricSet",
    "StageCostReport",
    "confusion",
    "cross_domain_gap",
    "metrics",
    "render_figures",
    "render_table",
    "stage_cost_report",
    "write_dataset_jsonl",
    "write_report_csv",
    "write_report_jsonl",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def __post_init__(self) -> None:
        for name in ("accuracy", "precision", "recall", "f1"):
            check_probability(getattr(self, name), name)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class GapReport:
    delta_rec: float
    delta_f1: float
    avg_gap: float

    def to_dict(self) -> dict:
        return {"delta_rec": self.delta_rec, "delta_f1": self.delta_f1, "avg_gap": self.avg_gap}


def confusion(preds: Sequence[Label], gold: Sequence[Label]) -> ConfusionCounts:
    """Tally the four confusion cells; SUICIDE is the positive class."""
    if len(preds) != len(gold):
        raise LengthMismatchError(f"{len(preds)} predictions vs {len(gold)} gold labels")
    if len(preds) == 0:
        raise LengthMismatchError("need at least one pair")
    tp = fp = fn = tn = 0
    for p, g in zip(preds, gold):
        if p is Label.SUICIDE and g is Label.SUICIDE:
            tp += 1
        elif p is Label.SUICIDE:
            fp += 1
        elif g is Label.SUICIDE:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metrics(c: ConfusionCounts) -> MetricSet:
    """Accuracy, precision, recall, and F1 from confusion counts."""
    if c.total == 0:
        raise EmptyEvaluationError("confusion counts are all zero")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricSet(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def cross_domain_gap(m_r: MetricSet, m_d: MetricSet) -> GapReport:
    """Absolute recall and F1 differences between two domains, and their mean."""
    delta_rec = abs(m_r.recall - m_d.recall)
    delta_f1 = abs(m_r.f1 - m_d.f1)
    return GapReport(delta_rec=delta_rec, delta_f1=delta_f1, avg_gap=(delta_rec + delta_f1) / 2.0)


@dataclass(frozen=True)
class StageCostReport:
    stage1_fraction: float
    stage2_fraction: float
    reasons: dict[EscalationReason, float]  # fractions of escalations, sum to 1

    def to_dict(self) -> dict:
        return {
            "stage1_fraction": self.stage1_fraction,
            "stage2_fraction": self.stage2_fraction,
            "reasons": {r.value: f for r, f in self.reasons.items()},
        }


def stage_cost_report(decisions: Sequence[RoutingDecision]) -> StageCostReport:
    """Fractions resolved per stage plus a histogram of escalation reasons."""
    if not decisions:
        raise EmptyEvaluationError("no routing decisions to account")
    n = len(decisions)
    accepted = sum(1 for d in decisions if d.accepted)
    escalations = [d for d in decisions if not d.accepted]
    reasons: dict[EscalationReason, float] = {}
    if escalations:
        for d in escalations:
            reasons[d.reason] = reasons.get(d.reason, 0.0) + 1.0
        for r in reasons:
            reasons[r] /= len(escalations)
    return StageCostReport(
        stage1_fraction=accepted / n,
        stage2_fraction=(n - accepted) / n,
        reasons=reasons,
    )


# ---------------------------------------------------------------------------
# Dataset writer (jsonl round-trips with core.load_dataset).
# ---------------------------------------------------------------------------


def write_dataset_jsonl(ds: Dataset, path: str | Path) -> None:
    lines = []
    for post in ds.posts:
        record: dict = {"id": post.id, "text": post.text}
        if post.gold_label is not None:
            record["label"] = post.gold_label.to_name()
        lines.append(json.dumps(record, sort_keys=True) + "\n")
    atomic_write_text(path, "".join(lines))


# ---------------------------------------------------------------------------
# Report emission.
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    dataset: str
    method: str
    metrics: MetricSet
    cost: Optional[StageCostReport] = None


def _pct(x: float) -> str:
    return f"{100.0 * x:6.2f}"


def render_table(rows: Sequence[ReportRow], gaps: Optional[dict[str, GapReport]] = None) -> str:
    """Human-readable table; percentages to two decimals."""
    lines = []
    header = f"{'dataset':<16} {'method':<16} {'acc%':>7} {'prec%':>7} {'rec%':>7} {'f1%':>7} {'stage1%':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in rows:
        m = row.metrics
        stage1 = _pct(row.cost.stage1_fraction) if row.cost is not None else "     -"
        lines.append(
            f"{row.dataset:<16} {row.method:<16} {_pct(m.accuracy):>7} {_pct(m.precision):>7} "
            f"{_pct(m.recall):>7} {_pct(m.f1):>7} {stage1:>8}"
        )
    if gaps:
        lines.append("")
        lines.append(f"{'method':<16} {'dRec%':>7} {'dF1%':>7} {'avg_gap%':>9}")
        for method, gap in gaps.items():
            lines.append(
                f"{method:<16} {_pct(gap.delta_rec):>7} {_pct(gap.delta_f1):>7} {_pct(gap.avg_gap):>9}"
            )
    return "\n".join(lines) + "\n"


def write_report_jsonl(path: str | Path, rows: Sequence[ReportRow],
                       gaps: Optional[dict[str, GapReport]] = None) -> None:
    lines = []
    for row in rows:
        record = {
            "dataset": row.dataset,
            "method": row.method,
            "metrics": row.metrics.to_dict(),
        }
        if row.cost is not None:
            record["cost"] = row.cost.to_dict()
        lines.append(json.dumps(record, sort_keys=True) + "\n")
    if gaps:
        for method, gap in gaps.items():
            record = {"dataset": "cross_domain", "method": method, "gaps": gap.to_dict()}
            lines.append(json.dumps(record, sort_keys=True) + "\n")
    atomic_write_text(path, "".join(lines))


def write_report_csv(path: str | Path, rows: Sequence[ReportRow]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["dataset", "method", "accuracy", "precision", "recall", "f1", "stage1_fraction"])
    for row in rows:
        m = row.metrics
        writer.writerow([
            row.dataset, row.method, m.accuracy, m.precision, m.recall, m.f1,
            row.cost.stage1_fraction if row.cost is not None else "",
        ])
    atomic_write_text(path, buffer.getvalue())


def render_figures(outdir: str | Path, rows: Sequence[ReportRow],
                   gaps: Optional[dict[str, GapReport]] = None) -> list[Path]:
    """Render the report as PNG figures next to the delimited output.

    One grouped bar chart of recall/F1 per dataset and method, one bar chart
    of the cross-domain gaps (when present), and one stacked stage-cost bar
    per dataset. Returns the written paths.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def save(fig, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        fig.savefig(tmp, dpi=120, format="png")
        os.replace(tmp, path)
        plt.close(fig)
        written.append(path)

    labels = [f"{r.dataset}\n{r.method}" for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.4 * len(rows)), 4.0))
    width = 0.35
    ax.bar([i - width / 2 for i in x], [100 * r.metrics.recall for r in rows],
           width, label="recall %")
    ax.bar([i + width / 2 for i in x], [100 * r.metrics.f1 for r in rows],
           width, label="F1 %")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title("recall and F1 by dataset and method")
    fig.tight_layout()
    save(fig, outdir / "metrics_by_domain.png")

    if gaps:
        methods = list(gaps)
        fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(methods)), 4.0))
        width = 0.25
        for offset, (key, label) in enumerate(
            [("delta_rec", "dRec %"), ("delta_f1", "dF1 %"), ("avg_gap", "avg gap %")]
        ):
            values = [100 * getattr(gaps[m], key) for m in methods]
            ax.bar([i + (offset - 1) * width for i in range(len(methods))], values,
                   width, label=label)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, fontsize=8)
        ax.set_ylabel("percentage points")
        ax.legend()
        ax.set_title("cross-domain gaps (smaller is more robust)")
        fig.tight_layout()
        save(fig, outdir / "cross_domain_gaps.png")

    cost_rows = [r for r in rows if r.cost is not None]
    if cost_rows:
        fig, ax = plt.subplots(figsize=(max(6.0, 1.4 * len(cost_rows)), 4.0))
        names = [f"{r.dataset}\n{r.method}" for r in cost_rows]
        stage1 = [100 * r.cost.stage1_fraction for r in cost_rows]
        stage2 = [100 * r.cost.stage2_fraction for r in cost_rows]
        ax.bar(names, stage1, label="stage 1 %")
        ax.bar(names, stage2, bottom=stage1, label="stage 2 %")
        ax.set_ylabel("percent of posts")
        ax.legend()
        ax.set_title("stage cost split")
        ax.tick_params(axis="x", labelsize=8)
        fig.tight_layout()
        save(fig, outdir / "stage_cost.png")

    return written
