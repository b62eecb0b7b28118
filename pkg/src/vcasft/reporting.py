"""Result tables (CSV and markdown) and the per-question-type comparison figure.

Two table layouts are produced. The question-type table holds one row per
(model, task) with a 0-1 score per question type. The ScienceQA table
holds one row per (model, method) with accuracy percentages overall, per
subject and per grade band.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .corpus import GRADE_BANDS, QTYPES, SUBJECTS  # noqa: E402
from .metrics.report import MetricReport  # noqa: E402
from .metrics.scores import scienceqa_accuracy  # noqa: E402

QTYPE_COLUMNS = ("numerical", "theoretical", "factual", "mcq", "conceptual")
QTYPE_TITLES = {
    "numerical": "Numerical Reasoning",
    "theoretical": "Theoretical Reasoning",
    "factual": "Fact-Based",
    "mcq": "MCQ",
    "conceptual": "Conceptual",
}
SCIENCEQA_COLUMNS = ("full_test_set",) + SUBJECTS[:3] + GRADE_BANDS
TASK_ORDER = ("zero_shot", "sft", "vcasft", "ablation_no_image")
TASK_LABELS = {"zero_shot": "Zero-shot", "sft": "SFT", "vcasft": "VCASFT", "ablation_no_image": "Caption only"}


def task_id(task: str) -> str:
    """Canonical task name, so "Zero-shot" and "zero_shot" compare equal."""
    return "_".join(task.strip().lower().replace("-", " ").split())


def _task_key(task: str) -> tuple[int, str]:
    t = task_id(task)
    return (TASK_ORDER.index(t) if t in TASK_ORDER else len(TASK_ORDER), t)


def _fmt(value: float | None, digits: int) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.{digits}f}"


# -- question-type table ------------------------------------------------------


def qtype_rows_from_reports(reports: Mapping[tuple[str, str], MetricReport]) -> list[dict]:
    """One row per (model, task) from evaluated reports."""
    rows = []
    for (model, task), report in reports.items():
        scores = report.qtype_scores()
        rows.append({"model": model, "task": task, **{q: scores.get(q) for q in QTYPE_COLUMNS}})
    return sort_rows(rows)


def read_qtype_csv(path: str | Path) -> list[dict]:
    """Read rows with columns model, task and one column per question type."""
    rows = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {"model": raw["model"], "task": raw["task"]}
            for q in QTYPE_COLUMNS:
                cell = (raw.get(q) or "").strip()
                row[q] = float(cell) if cell else None
            rows.append(row)
    return rows


def sort_rows(rows: Iterable[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (r["model"], _task_key(r["task"])))


def write_qtype_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "task", "scale", *QTYPE_COLUMNS])
        for r in rows:
            w.writerow([r["model"], r["task"], "0-1", *(_fmt(r[q], 3) for q in QTYPE_COLUMNS)])
    return path


def qtype_markdown(rows: Sequence[dict]) -> str:
    head = ["Model", "Task", *(QTYPE_TITLES[q] for q in QTYPE_COLUMNS)]
    lines = [
        "Scores per question type (scale 0-1)",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    for r in rows:
        cells = [r["model"], TASK_LABELS.get(task_id(r["task"]), r["task"]), *(_fmt(r[q], 3) for q in QTYPE_COLUMNS)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def comparison_rows(rows: Sequence[dict], baseline: str = "sft") -> list[dict]:
    """Per model and question type: every task's score and its delta against ``baseline``."""
    by_model: dict[str, dict[str, dict]] = defaultdict(dict)
    for r in rows:
        by_model[r["model"]][task_id(r["task"])] = r
    out = []
    for model in sorted(by_model):
        tasks = by_model[model]
        base = tasks.get(task_id(baseline))
        for q in QTYPE_COLUMNS:
            for task in sorted(tasks, key=_task_key):
                if task == task_id(baseline):
                    continue
                value = tasks[task][q]
                base_value = base[q] if base else None
                delta = None if value is None or base_value is None else value - base_value
                out.append(
                    {
                        "model": model,
                        "qtype": q,
                        "baseline": task_id(baseline),
                        "baseline_score": base_value,
                        "task": task,
                        "score": value,
                        "delta": delta,
                    }
                )
    return out


def write_comparison_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["model", "qtype", "baseline", "baseline_score", "task", "score", "delta"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c], 3) if isinstance(r[c], float) or r[c] is None else r[c] for c in cols])
    return path


def comparison_markdown(rows: Sequence[dict]) -> str:
    lines = [
        "| Model | Question type | Baseline | Task | Score | Delta |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        delta = "" if r["delta"] is None else f"{r['delta']:+.3f}"
        lines.append(
            f"| {r['model']} | {QTYPE_TITLES[r['qtype']]} | {_fmt(r['baseline_score'], 3)} | "
            f"{TASK_LABELS.get(r['task'], r['task'])} | {_fmt(r['score'], 3)} | {delta} |"
        )
    return "\n".join(lines) + "\n"


# -- ScienceQA table ----------------------------------------------------------


def read_correctness_csv(path: str | Path) -> list[dict]:
    """Per-question rows: model, method, correct (0/1/true/false), subject, grade_band."""
    out = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for raw in csv.DictReader(fh):
            out.append(
                {
                    "model": raw["model"],
                    "method": raw["method"],
                    "correct": raw["correct"].strip().lower() in ("1", "true", "yes"),
                    "subject": (raw.get("subject") or "").strip() or None,
                    "grade_band": (raw.get("grade_band") or "").strip() or None,
                }
            )
    return out


def scienceqa_rows(correctness: Iterable[dict]) -> list[dict]:
    groups: dict[tuple[str, str], list[tuple[bool, str | None, str | None]]] = defaultdict(list)
    for r in correctness:
        groups[(r["model"], r["method"])].append((r["correct"], r["subject"], r["grade_band"]))
    rows = []
    for (model, method), items in groups.items():
        table = scienceqa_accuracy(items)
        row = {"model": model, "method": method, "full_test_set": table.overall}
        for s in SUBJECTS[:3]:
            row[s] = table.subject.get(s)
        for g in GRADE_BANDS:
            row[g] = table.grade_band.get(g)
        rows.append(row)
    return sorted(rows, key=lambda r: (r["model"], _task_key(r["method"])))


def scienceqa_rows_from_reports(reports: Mapping[tuple[str, str], MetricReport]) -> list[dict]:
    correctness = []
    for (model, method), report in reports.items():
        for row in report.rows:
            if row.qtype == "mcq":
                correctness.append(
                    {
                        "model": model,
                        "method": method,
                        "correct": bool(row.mcq_correct),
                        "subject": row.subject,
                        "grade_band": row.grade_band,
                    }
                )
    return scienceqa_rows(correctness) if correctness else []


def write_scienceqa_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "method", "scale", *SCIENCEQA_COLUMNS])
        for r in rows:
            w.writerow([r["model"], r["method"], "percent", *(_fmt(r[c], 2) for c in SCIENCEQA_COLUMNS)])
    return path


def scienceqa_markdown(rows: Sequence[dict]) -> str:
    head = ["Model", "Method", "Full Test Set", "Social Sci", "Natural Sci", "Lang. Sci", "Lower", "Secondary", "Higher"]
    lines = ["Accuracy (%)", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["model"], TASK_LABELS.get(task_id(r["method"]), r["method"]), *(_fmt(r[c], 2) for c in SCIENCEQA_COLUMNS)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- figures ------------------------------------------------------------------


def figure_size(width: float = 11.0, height: float | None = None) -> tuple[float, float]:
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, height or width * golden * 0.5


def plot_qtype_comparison(rows: Sequence[dict], path: str | Path, title: str | None = None) -> Path:
    """One panel per question type, grouped bars of task scores per model."""
    models = sorted({r["model"] for r in rows})
    tasks = sorted({task_id(r["task"]) for r in rows}, key=_task_key)
    lookup = {(r["model"], task_id(r["task"])): r for r in rows}
    fig, axes = plt.subplots(1, len(QTYPE_COLUMNS), figsize=figure_size(), sharey=True)
    width = 0.8 / max(1, len(tasks))
    for ax, q in zip(axes, QTYPE_COLUMNS):
        for k, task in enumerate(tasks):
            xs = [i + (k - (len(tasks) - 1) / 2) * width for i in range(len(models))]
            ys = [(lookup.get((m, task)) or {}).get(q) or 0.0 for m in models]
            ax.bar(xs, ys, width=width, label=TASK_LABELS.get(task, task))
        ax.set_title(QTYPE_TITLES[q], fontsize=9)
        ax.set_xticks(range(len(models)))
        ax.set_xticklabels(models, rotation=30, ha="right", fontsize=7)
        ax.set_ylim(0, 1)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylabel("score")
    axes[-1].legend(fontsize=7, loc="upper right")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_scienceqa(rows: Sequence[dict], path: str | Path) -> Path:
    labels = [f"{r['model']}\n{TASK_LABELS.get(task_id(r['method']), r['method'])}" for r in rows]
    fig, ax = plt.subplots(figsize=figure_size(8.0))
    n = len(SCIENCEQA_COLUMNS)
    width = 0.8 / n
    for k, col in enumerate(SCIENCEQA_COLUMNS):
        xs = [i + (k - (n - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [r[col] or 0.0 for r in rows], width=width, label=col.replace("_", " "))
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=6, ncol=4)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
