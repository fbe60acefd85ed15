"""Scoring: ROUGE-L, exact-match accuracy, and per-metric-group averaging.

Scores are on a 0..100 scale. Datasets belong to a task and declare one
metric; a report aggregates per-dataset means and then averages those
means (unweighted) within each (task, metric) group. Display rounding is
half-up at two decimals.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError, EmptyReductionError

METRICS = ("rouge_l", "accuracy")

_STRIP_CHARS = string.punctuation + string.whitespace


def _rouge_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    out = []
    for w in text.lower().split():
        w = w.strip(_STRIP_CHARS)
        if w:
            out.append(w)
    return out


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length via the standard DP table."""
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ai = a[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[n]


def rouge_l(prediction: str, reference: str) -> float:
    """LCS-based F1 (beta = 1), scaled to 0..100.

    Zero when either side tokenizes to nothing or nothing is shared.
    """
    pred = _rouge_tokens(prediction)
    ref = _rouge_tokens(reference)
    if not pred or not ref:
        return 0.0
    lcs = _lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def normalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation/brackets."""
    collapsed = " ".join(text.lower().split())
    return collapsed.strip(_STRIP_CHARS)


def accuracy_score(prediction: str, gold: str,
                   choices: Sequence[str] | None = None) -> float:
    """100 for a normalized exact match, else 0."""
    del choices  # reserved for choice-aware normalization
    return 100.0 if normalize_answer(prediction) == normalize_answer(gold) else 0.0


def aggregate_group_average(scores: Sequence[float]) -> float:
    """Unweighted arithmetic mean of per-dataset mean scores."""
    if len(scores) == 0:
        raise EmptyReductionError("cannot average an empty metric group")
    return sum(scores) / len(scores)


def format_score(value: float) -> str:
    """Two decimals, half-up, from the shortest decimal repr of the float."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    dataset: str
    metric: str
    prediction: str
    gold: str
    score: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if not (0.0 <= self.score <= 100.0):
            raise ConfigurationError(f"score {self.score} outside [0, 100]")


@dataclass(frozen=True)
class DatasetScore:
    dataset: str
    task: str
    metric: str
    n_samples: int
    mean: float


@dataclass
class MetricReport:
    """Per-dataset means plus group averages keyed by (task, metric)."""

    datasets: dict[str, DatasetScore] = field(default_factory=dict)

    def add(self, score: DatasetScore) -> None:
        self.datasets[score.dataset] = score

    def group_averages(self) -> dict[tuple[str, str], float]:
        groups: dict[tuple[str, str], list[float]] = {}
        for ds in self.datasets.values():
            groups.setdefault((ds.task, ds.metric), []).append(ds.mean)
        return {key: aggregate_group_average(vals) for key, vals in sorted(groups.items())}


def report_from_samples(samples: Iterable[ScoredSample],
                        task_by_dataset: Mapping[str, str]) -> MetricReport:
    """Collect per-sample scores into per-dataset means."""
    by_dataset: dict[str, list[ScoredSample]] = {}
    for s in samples:
        by_dataset.setdefault(s.dataset, []).append(s)
    report = MetricReport()
    for name in sorted(by_dataset):
        rows = by_dataset[name]
        metrics = {r.metric for r in rows}
        if len(metrics) > 1:
            raise ConfigurationError(f"dataset {name!r} mixes metrics {sorted(metrics)}")
        report.add(DatasetScore(
            dataset=name,
            task=task_by_dataset.get(name, "unknown"),
            metric=rows[0].metric,
            n_samples=len(rows),
            mean=sum(r.score for r in rows) / len(rows),
        ))
    return report


# ---------------------------------------------------------------------------
# rendering

_METRIC_LABELS = {"rouge_l": "ROUGE-L", "accuracy": "Accuracy"}

# Fixed layout of the three-task challenge table: per task, the metric
# groups and their member datasets in display order.
TRACK_TABLE_LAYOUT: tuple[tuple[str, tuple[tuple[str, tuple[str, ...]], ...]], ...] = (
    ("Multi-Image Reasoning", (
        ("rouge_l", ("Spot-the-Diff", "CLEVR-Change", "IEdit", "Birds-to-Words")),
        ("accuracy", ("nuscenes", "VISION", "Fashion200K",
                      "MIT-States_PropertyCoherence", "MIT-States_StateCoherence",
                      "RecipeQA_ImageCoherence", "NLVR2", "VizWiz")),
    )),
    ("Document and Knowledge-Based Understanding", (
        ("accuracy", ("SlideVQA", "OCR-VQA", "WebQA", "TQA",
                      "MultiModalQA", "ManyModalQA")),
    )),
    ("Interactive Multi-Modal Communication", (
        ("rouge_l", ("MMCoQA", "ALFRED")),
    )),
)

# The four held-out test tables; the document table omits ManyModalQA.
TEST_TABLE_LAYOUT: tuple[tuple[str, tuple[tuple[str, tuple[str, ...]], ...]], ...] = (
    ("Multi-Image Reasoning (a)", (
        ("rouge_l", ("Spot-the-Diff", "CLEVR-Change", "IEdit", "Birds-to-Words")),
    )),
    ("Multi-Image Reasoning (b)", (
        ("accuracy", ("nuscenes", "VISION", "Fashion200K",
                      "MIT-States_PropertyCoherence", "MIT-States_StateCoherence",
                      "RecipeQA_ImageCoherence", "NLVR2", "VizWiz")),
    )),
    ("Document and Knowledge-Based Understanding (c)", (
        ("accuracy", ("SlideVQA", "OCR-VQA", "WebQA", "TQA", "MultiModalQA")),
    )),
    ("Interactive Multi-Modal Communication (d)", (
        ("rouge_l", ("MMCoQA", "ALFRED")),
    )),
)

LAYOUTS = {"table1": TRACK_TABLE_LAYOUT, "test_tables": TEST_TABLE_LAYOUT}


def _auto_layout(report: MetricReport):
    tasks: dict[str, dict[str, list[str]]] = {}
    for ds in report.datasets.values():
        tasks.setdefault(ds.task, {}).setdefault(ds.metric, []).append(ds.dataset)
    layout = []
    for task in sorted(tasks):
        groups = tuple((metric, tuple(sorted(names)))
                       for metric, names in sorted(tasks[task].items()))
        layout.append((task, groups))
    return tuple(layout)


def render_report(report: MetricReport, layout: str = "auto") -> str:
    """Aligned plain-text table grouped by task, one AVERAGE row per
    metric group. Datasets required by a fixed layout but missing from the
    report are shown as absent and excluded from that group's average."""
    if layout == "auto":
        sections = _auto_layout(report)
    elif layout in LAYOUTS:
        sections = LAYOUTS[layout]
    else:
        raise ConfigurationError(f"unknown layout {layout!r}")

    name_width = 36
    lines = [f"{'DATASET':<{name_width}} {'SCORE':>8}"]
    any_rows = False
    for task, groups in sections:
        lines.append("")
        lines.append(task)
        for metric, names in groups:
            present = []
            for name in names:
                ds = report.datasets.get(name)
                if ds is None:
                    lines.append(f"  {name:<{name_width - 2}} {'absent':>8}")
                    continue
                any_rows = True
                present.append(ds.mean)
                lines.append(f"  {name:<{name_width - 2}} {format_score(ds.mean):>8}")
            label = f"AVERAGE ({_METRIC_LABELS[metric]})"
            if present:
                avg = format_score(aggregate_group_average(present))
                lines.append(f"  {label:<{name_width - 2}} {avg:>8}")
            else:
                lines.append(f"  {label:<{name_width - 2}} {'absent':>8}")
    if not report.datasets or not any_rows:
        lines.append("")
        lines.append("warning: no dataset scores to report")
    return "\n".join(lines) + "\n"
