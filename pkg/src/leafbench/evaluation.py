"""Confusion matrices, macro metrics, cross matrices, heatmaps and report tables.

Per class c the tallies are TP = counts[c][c], FP = column sum - TP,
FN = row sum - TP, TN = total - TP - FP - FN; precision, recall and F1
follow the standard one-vs-rest definitions with a zero-division convention
of 0. Report-level metrics are unweighted (macro) means over classes, and
accuracy is trace/total. Predictions that could not be parsed land in a
dedicated ``unparseable`` column so they count against accuracy instead of
silently shrinking the test set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ReportError
from .scheduler import JobLedgerEntry, PredictionRecord, RunPaths, SweepResult, load_ledger_entries, load_sweeps

UNPARSEABLE = "unparseable"

REPORT_FILES = (
    "finetune_ledger.csv",
    "fewshot_results.csv",
    "progressive_ledger.csv",
    "progressive_results.csv",
    "zeroshot_results.csv",
    "cross_resolution.csv",
    "cross_plant.csv",
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """rows = true class; columns = predicted classes plus ``unparseable``."""

    classes: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.classes)
        if len(self.counts) != n or any(len(row) != n + 1 for row in self.counts):
            raise ValueError(f"counts must be {n}x{n + 1}")
        if any(v < 0 for row in self.counts for v in row):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sums(self) -> tuple[int, ...]:
        return tuple(sum(row) for row in self.counts)

    def column_labels(self) -> tuple[str, ...]:
        return self.classes + (UNPARSEABLE,)


@dataclass(frozen=True)
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: Mapping[str, ClassMetrics]
    duration_s: float = 0.0
    cost_usd: float = 0.0


def build_confusion(records: Sequence[PredictionRecord], classes: Sequence[str]) -> ConfusionMatrix:
    """Tally true-vs-predicted counts; unparsed predictions go to the extra column."""
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    grid = [[0] * (len(classes) + 1) for _ in classes]
    for record in records:
        if record.true_label not in index:
            raise ReportError(f"true label {record.true_label!r} not in {classes}")
        row = index[record.true_label]
        if record.parsed_category is None or record.parsed_category not in index:
            grid[row][len(classes)] += 1
        else:
            grid[row][index[record.parsed_category]] += 1
    return ConfusionMatrix(classes=classes, counts=tuple(tuple(row) for row in grid))


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Macro-averaged accuracy/precision/recall/F1 from one confusion matrix."""
    total = cm.total
    if total == 0:
        raise ReportError("empty confusion matrix")
    n = len(cm.classes)
    per_class: dict[str, ClassMetrics] = {}
    for i, label in enumerate(cm.classes):
        tp = cm.counts[i][i]
        fp = sum(cm.counts[r][i] for r in range(n)) - tp
        fn = sum(cm.counts[i]) - tp
        tn = total - tp - fp - fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[label] = ClassMetrics(tp, fp, fn, tn, precision, recall, f1)
    trace = sum(cm.counts[i][i] for i in range(n))
    return MetricsReport(
        accuracy=trace / total,
        precision=sum(m.precision for m in per_class.values()) / n,
        recall=sum(m.recall for m in per_class.values()) / n,
        f1=sum(m.f1 for m in per_class.values()) / n,
        per_class=per_class,
    )


def metrics_for_sweep(sweep: SweepResult) -> tuple[ConfusionMatrix, MetricsReport]:
    classes = tuple(sorted({r.true_label for r in sweep.records}))
    from .dataset import PLANT_CLASSES

    if sweep.meta.test_plant in PLANT_CLASSES:
        classes = tuple(sorted(PLANT_CLASSES[sweep.meta.test_plant]))
    cm = build_confusion(sweep.records, classes)
    report = compute_metrics(cm)
    return cm, replace(report, duration_s=sweep.duration_s, cost_usd=sweep.cost_usd)


@dataclass(frozen=True)
class CrossMatrix:
    """Train-axis x test-axis grid of metric reports; missing cells are holes."""

    axis: str  # "resolution" | "plant"
    fixed: str  # the held-constant plant (resolution axis) or resolution (plant axis)
    train_values: tuple[str, ...]
    test_values: tuple[str, ...]
    cells: Mapping[tuple[str, str], MetricsReport | None]

    def holes(self) -> list[tuple[str, str]]:
        return [key for key, value in self.cells.items() if value is None]


def build_cross_matrix(sweeps: Mapping[str, SweepResult], axis: str, fixed) -> CrossMatrix:
    """Assemble the grid from persisted sweeps.

    ``axis="resolution"`` fixes a plant and spans train/test resolutions;
    ``axis="plant"`` fixes a resolution and spans train/test plants. Diagonal
    cells come from the same-domain sweep of the matching model.
    """
    if axis not in ("resolution", "plant"):
        raise ReportError(f"unknown cross axis {axis!r}")
    relevant = [
        s for s in sweeps.values()
        if s.meta.train_plant is not None and s.meta.regime in ("full", "progressive", "cross_resolution", "cross_plant")
    ]
    if axis == "resolution":
        relevant = [s for s in relevant if s.meta.test_plant == fixed and s.meta.train_plant == fixed]
        values = sorted({str(s.meta.train_resolution) for s in relevant} | {str(s.meta.test_resolution) for s in relevant}, key=int)
        keyer = lambda s: (str(s.meta.train_resolution), str(s.meta.test_resolution))
    else:
        relevant = [s for s in relevant if s.meta.test_resolution == int(fixed) and s.meta.train_resolution == int(fixed)]
        values = sorted({s.meta.train_plant for s in relevant} | {s.meta.test_plant for s in relevant})
        keyer = lambda s: (s.meta.train_plant, s.meta.test_plant)

    found: dict[tuple[str, str], MetricsReport] = {}
    for sweep in relevant:
        key = keyer(sweep)
        if key in found and sweep.meta.phase is not None:
            continue  # prefer the full-regime sweep over phase sweeps on the diagonal
        _, report = metrics_for_sweep(sweep)
        found[key] = report
    cells = {(a, b): found.get((a, b)) for a in values for b in values}
    return CrossMatrix(axis=axis, fixed=str(fixed), train_values=tuple(values),
                       test_values=tuple(values), cells=cells)


# -- heatmaps ---------------------------------------------------------------

_CELL_W, _CELL_H = 84, 56
_LEFT, _TOP = 170, 46


def _heat_color(value: int, row_max: int) -> str:
    if row_max <= 0 or value <= 0:
        return "#ffffff"
    t = value / row_max  # linear scale from 0 to the row maximum
    r = round(255 + (27 - 255) * t)
    g = round(255 + (94 - 255) * t)
    b = round(255 + (32 - 255) * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_heatmap(cm: ConfusionMatrix, svg_path: Path | str, csv_path: Path | str) -> None:
    """Annotated SVG heatmap plus its raw-grid CSV twin."""
    svg_path, csv_path = Path(svg_path), Path(csv_path)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.parent.mkdir(parents=True, exist_ok=True)

    cols = cm.column_labels()
    width = _LEFT + _CELL_W * len(cols) + 20
    height = _TOP + _CELL_H * len(cm.classes) + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">'
    ]
    for j, col in enumerate(cols):
        x = _LEFT + j * _CELL_W + _CELL_W // 2
        parts.append(f'<text x="{x}" y="{_TOP - 12}" text-anchor="middle">{col}</text>')
    for i, row_label in enumerate(cm.classes):
        y = _TOP + i * _CELL_H
        row = cm.counts[i]
        row_max = max(row)
        parts.append(
            f'<text x="{_LEFT - 10}" y="{y + _CELL_H // 2 + 4}" text-anchor="end">{row_label}</text>'
        )
        for j, value in enumerate(row):
            x = _LEFT + j * _CELL_W
            fill = _heat_color(value, row_max)
            text_fill = "#ffffff" if row_max and value / row_max > 0.6 else "#1a1a1a"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL_W}" height="{_CELL_H}" '
                f'fill="{fill}" stroke="#999"/>'
            )
            parts.append(
                f'<text x="{x + _CELL_W // 2}" y="{y + _CELL_H // 2 + 4}" '
                f'text-anchor="middle" fill="{text_fill}">{value}</text>'
            )
    parts.append("</svg>")
    svg_path.write_text("\n".join(parts) + "\n", encoding="utf-8")

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true_class", *cols])
        for label, row in zip(cm.classes, cm.counts):
            writer.writerow([label, *row])


def load_confusion_csv(path: Path | str) -> ConfusionMatrix:
    """Reparse a heatmap's CSV twin back into a confusion matrix."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        classes = tuple(header[1:-1])
        counts = tuple(tuple(int(v) for v in row[1:]) for row in reader)
    return ConfusionMatrix(classes=classes, counts=counts)


# -- report tables -----------------------------------------------------------


def _fmt(value, places: int = 4) -> str:
    if value is None:
        return ""
    return f"{value:.{places}f}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _plant_of(entry: JobLedgerEntry) -> str:
    return entry.plan_id.rsplit("-", 2)[0]


def _resolution_of(entry: JobLedgerEntry) -> int:
    return int(entry.plan_id.rsplit("-", 2)[1])


def _entry_sort_key(entry: JobLedgerEntry):
    return (_plant_of(entry), -_resolution_of(entry), entry.phase or 0)


def improvement_points(finetuned_accuracy: float, zeroshot_accuracy: float) -> float:
    """Fine-tuned minus zero-shot accuracy, in percentage points."""
    return (finetuned_accuracy - zeroshot_accuracy) * 100.0


def emit_report(paths: RunPaths, out_dir: Path | str | None = None) -> dict[str, Path]:
    """Write the seven report CSVs, per-sweep heatmaps and a Markdown summary.

    Raises :class:`ReportError` when the run directory holds no sweeps.
    """
    sweeps = load_sweeps(paths)
    if not sweeps:
        raise ReportError("nothing to report: no prediction sweeps found")
    full_entries, prog_entries = load_ledger_entries(paths)
    out = Path(out_dir) if out_dir else paths.reports
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    metrics: dict[str, tuple[ConfusionMatrix, MetricsReport]] = {
        sweep_id: metrics_for_sweep(sweep) for sweep_id, sweep in sweeps.items()
    }
    for sweep_id, (cm, _) in metrics.items():
        emit_heatmap(cm, out / "heatmaps" / f"{sweep_id}.svg", out / "heatmaps" / f"{sweep_id}.csv")

    def metric_row(sweep: SweepResult) -> list[str]:
        report = metrics[sweep.meta.sweep_id][1]
        return [
            _fmt(report.accuracy), _fmt(report.precision), _fmt(report.recall), _fmt(report.f1),
            _fmt(report.duration_s, 2), _fmt(report.cost_usd, 4),
        ]

    path = out / "finetune_ledger.csv"
    _write_csv(
        path,
        ["plant", "subset_identifier", "epochs", "batch_size", "training_loss",
         "full_validation_loss", "training_duration_s", "training_cost_usd",
         "base_model", "output_model"],
        [
            [
                _plant_of(e), f"Resolution-{_resolution_of(e)}",
                e.hp.epochs if e.hp else "", e.hp.batch_size if e.hp else "",
                _fmt(e.job.train_loss), _fmt(e.job.full_validation_loss),
                _fmt(e.job.duration_s, 1), _fmt(e.job.cost_usd, 4),
                e.job.base_model, e.job.output_model or "",
            ]
            for e in sorted(full_entries, key=_entry_sort_key)
        ],
    )
    written["finetune_ledger"] = path

    path = out / "progressive_ledger.csv"
    _write_csv(
        path,
        ["plant", "subset_identifier", "trained_tokens", "training_loss",
         "full_validation_loss", "training_duration_s", "training_cost_usd",
         "base_model", "output_model", "errors"],
        [
            [
                _plant_of(e), f"Phase-{e.phase}-Resolution-{_resolution_of(e)}",
                e.job.trained_tokens if e.job.trained_tokens is not None else "",
                _fmt(e.job.train_loss), _fmt(e.job.full_validation_loss),
                _fmt(e.job.duration_s, 1), _fmt(e.job.cost_usd, 4),
                e.job.base_model, e.job.output_model or "", e.errors,
            ]
            for e in sorted(prog_entries, key=_entry_sort_key)
        ],
    )
    written["progressive_ledger"] = path

    def sweep_sort_key(sweep: SweepResult):
        meta = sweep.meta
        return (meta.test_plant, -meta.test_resolution, meta.phase or 0)

    fewshot = sorted((s for s in sweeps.values() if s.meta.regime == "full"), key=sweep_sort_key)
    path = out / "fewshot_results.csv"
    _write_csv(
        path,
        ["plant", "prediction_column", "fine_tuned_model", "accuracy", "precision",
         "recall", "f1", "prediction_duration_s", "prediction_cost_usd"],
        [
            [s.meta.test_plant, f"Resolution-{s.meta.test_resolution}", s.meta.model_id, *metric_row(s)]
            for s in fewshot
        ],
    )
    written["fewshot_results"] = path

    progressive = sorted((s for s in sweeps.values() if s.meta.regime == "progressive"), key=sweep_sort_key)
    path = out / "progressive_results.csv"
    _write_csv(
        path,
        ["plant", "prediction_column", "phase", "fine_tuned_model", "accuracy", "precision",
         "recall", "f1", "prediction_duration_s", "prediction_cost_usd"],
        [
            [
                s.meta.test_plant, f"Phase-{s.meta.phase}-Resolution-{s.meta.test_resolution}",
                s.meta.phase, s.meta.model_id, *metric_row(s),
            ]
            for s in progressive
        ],
    )
    written["progressive_results"] = path

    zeroshot = sorted((s for s in sweeps.values() if s.meta.regime == "zero_shot"), key=sweep_sort_key)
    path = out / "zeroshot_results.csv"
    _write_csv(
        path,
        ["plant", "prediction_column", "base_model", "accuracy", "precision",
         "recall", "f1", "prediction_duration_s", "prediction_cost_usd"],
        [
            [s.meta.test_plant, f"Resolution-{s.meta.test_resolution}", s.meta.model_id, *metric_row(s)]
            for s in zeroshot
        ],
    )
    written["zeroshot_results"] = path

    cross_res = sorted(
        (s for s in sweeps.values() if s.meta.regime == "cross_resolution"),
        key=lambda s: (s.meta.test_plant, -(s.meta.train_resolution or 0), -s.meta.test_resolution),
    )
    path = out / "cross_resolution.csv"
    _write_csv(
        path,
        ["prediction_column", "model", "plant", "train_resolution", "test_resolution",
         "accuracy", "precision", "recall", "f1", "prediction_duration_s", "prediction_cost_usd"],
        [
            [
                f"{s.meta.test_plant.capitalize()}-Trained-{s.meta.train_resolution}"
                f"-Prediction-{s.meta.test_resolution}",
                s.meta.model_id, s.meta.test_plant, s.meta.train_resolution,
                s.meta.test_resolution, *metric_row(s),
            ]
            for s in cross_res
        ],
    )
    written["cross_resolution"] = path

    cross_plant = sorted(
        (s for s in sweeps.values() if s.meta.regime == "cross_plant"),
        key=lambda s: (s.meta.train_plant or "", -s.meta.test_resolution),
    )
    path = out / "cross_plant.csv"
    _write_csv(
        path,
        ["prediction_column", "model", "train_plant", "test_plant", "resolution",
         "accuracy", "precision", "recall", "f1", "prediction_duration_s", "prediction_cost_usd"],
        [
            [
                f"Trained-{s.meta.train_plant.capitalize()}-Prediction-"
                f"{s.meta.test_plant.capitalize()}-{s.meta.test_resolution}",
                s.meta.model_id, s.meta.train_plant, s.meta.test_plant,
                s.meta.test_resolution, *metric_row(s),
            ]
            for s in cross_plant
        ],
    )
    written["cross_plant"] = path

    written["summary"] = _emit_summary(out, sweeps, metrics)
    return written


def _emit_summary(out: Path, sweeps, metrics) -> Path:
    """Markdown summary with the fine-tune-vs-zero-shot delta per (plant, resolution)."""
    lines = ["# Run summary", ""]
    domains = sorted(
        {(s.meta.test_plant, s.meta.test_resolution) for s in sweeps.values()
         if s.meta.regime in ("full", "zero_shot")},
        key=lambda d: (d[0], -d[1]),
    )
    by_domain: dict[tuple[str, int], dict[str, float]] = {}
    for sweep in sweeps.values():
        if sweep.meta.regime in ("full", "zero_shot"):
            key = (sweep.meta.test_plant, sweep.meta.test_resolution)
            by_domain.setdefault(key, {})[sweep.meta.regime] = metrics[sweep.meta.sweep_id][1].accuracy
    has_delta = any("full" in v and "zero_shot" in v for v in by_domain.values())
    header = "| plant | resolution | fine-tuned accuracy | zero-shot accuracy |"
    rule = "|---|---|---|---|"
    if has_delta:
        header += " improvement (points) |"
        rule += "---|"
    lines += [header, rule]
    for key in domains:
        plant, res = key
        accs = by_domain.get(key, {})
        ft = accs.get("full")
        zs = accs.get("zero_shot")
        row = [plant, str(res), _fmt(ft), _fmt(zs)]
        if has_delta:
            row.append(
                f"{improvement_points(ft, zs):.2f}" if ft is not None and zs is not None else ""
            )
        lines.append("| " + " | ".join(row) + " |")
    lines += ["", f"Sweeps evaluated: {len(sweeps)}", ""]
    path = out / "summary.md"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
