"""Route each prediction to its question-type scorer and aggregate the results."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from ..captioning import Caption, effective_captions
from ..corpus import GRADE_BANDS, QTYPES, SUBJECTS, DatasetManifest, QARecord
from ..training import Prediction
from .judge import Judge
from .scores import (
    DEFAULT_REL_TOL,
    composite_numerical,
    composite_theoretical,
    score_css,
    score_factual,
    score_faa,
    score_mcq_choice,
    scienceqa_accuracy,
)
from .text import corpus_bleu, meteor, rouge_l, rouge_n, tokenize

SCORE_FIELDS = ("s_faa", "s_iss", "s_css", "composite", "factual", "mcq_correct")
TEXT_FIELDS = ("rouge1", "rouge2", "rougeL", "meteor")
# the headline score of each question type
PRIMARY_FIELD = {
    "numerical": "composite",
    "theoretical": "composite",
    "conceptual": "s_css",
    "factual": "factual",
    "mcq": "mcq_correct",
}


class EvaluationError(ValueError):
    pass


@dataclass
class RecordScores:
    record_id: str
    qtype: str
    language: str
    subject: str | None = None
    grade_band: str | None = None
    s_faa: float | None = None
    s_iss: float | None = None
    s_css: float | None = None
    composite: float | None = None
    factual: float | None = None
    mcq_correct: float | None = None
    rouge1: float = 0.0
    rouge2: float = 0.0
    rougeL: float = 0.0
    meteor: float = 0.0
    flags: list[str] = field(default_factory=list)

    @property
    def score(self) -> float:
        return getattr(self, PRIMARY_FIELD[self.qtype])


@dataclass
class MetricReport:
    rows: list[RecordScores]
    aggregates: dict[str, Any]
    metadata: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "aggregates": self.aggregates,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricReport":
        return cls([RecordScores(**r) for r in data["rows"]], data["aggregates"], data["metadata"])

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def qtype_scores(self) -> dict[str, float | None]:
        return {q: self.aggregates["by_qtype"].get(q, {}).get("score") for q in QTYPES}


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def _group_stats(rows: Sequence[RecordScores]) -> dict[str, Any]:
    out: dict[str, Any] = {"n": len(rows), "score": _mean(r.score for r in rows)}
    for name in SCORE_FIELDS + TEXT_FIELDS:
        value = _mean(getattr(r, name) for r in rows)
        if value is not None:
            out[name] = value
    return out


def aggregate(rows: Sequence[RecordScores], bleu_pairs: Sequence[tuple[list[str], list[str]]] = ()) -> dict[str, Any]:
    """Arithmetic means per question type, subject and grade band."""
    agg: dict[str, Any] = {"overall": _group_stats(rows), "by_qtype": {}, "by_subject": {}, "by_grade_band": {}}
    for q in QTYPES:
        group = [r for r in rows if r.qtype == q]
        if group:
            agg["by_qtype"][q] = _group_stats(group)
    for s in SUBJECTS:
        group = [r for r in rows if r.subject == s]
        if group:
            agg["by_subject"][s] = _group_stats(group)
    for g in GRADE_BANDS:
        group = [r for r in rows if r.grade_band == g]
        if group:
            agg["by_grade_band"][g] = _group_stats(group)
    mcq = [r for r in rows if r.qtype == "mcq"]
    if mcq:
        table = scienceqa_accuracy((bool(r.mcq_correct), r.subject, r.grade_band) for r in mcq)
        agg["mcq_accuracy_percent"] = {
            "overall": table.overall,
            "subject": table.subject,
            "grade_band": table.grade_band,
        }
    if bleu_pairs:
        agg["corpus_bleu"] = corpus_bleu(bleu_pairs)
    return agg


def score_record(
    record: QARecord,
    prediction: str,
    judge: Judge,
    rel_tol: float = DEFAULT_REL_TOL,
) -> RecordScores:
    row = RecordScores(record.id, record.qtype, record.language, record.subject, record.grade_band)
    q = record.qtype
    if q in ("numerical", "theoretical"):
        truth_steps = judge.extract_steps(record.id, "ground_truth", record.answer_text)
        if not truth_steps.steps:
            raise EvaluationError(f"{record.id}: no ground-truth steps extracted")
        pred_steps = judge.extract_steps(record.id, "prediction", prediction)
        row.s_iss = judge.score_iss(pred_steps, truth_steps)
    if q in ("numerical", "theoretical", "conceptual"):
        gateway = judge.gateway
        if gateway is None:
            raise EvaluationError("concept similarity needs an embedding gateway")
        truth_c = judge.extract_concepts(record.id, "ground_truth", record.answer_text)
        pred_c = judge.extract_concepts(record.id, "prediction", prediction)
        row.s_css, flag = score_css(pred_c, truth_c, gateway)
        if flag:
            row.flags.append(flag)
    if q == "numerical":
        found = judge.final_answer(prediction)
        if found is None:
            row.s_faa = 0.0
            row.flags.append("no-final-answer")
        else:
            row.s_faa = float(score_faa(found[0], record.final_numeric.value, rel_tol))
        row.composite = composite_numerical(row.s_faa, row.s_iss, row.s_css)
    elif q == "theoretical":
        row.composite = composite_theoretical(row.s_iss, row.s_css)
    elif q == "factual":
        row.factual = float(score_factual(prediction, record.answer_text))
    elif q == "mcq":
        choice = judge.mcq_choice(prediction, record.options)
        correct, flag = score_mcq_choice(choice, record.correct_option, record.options)
        row.mcq_correct = float(correct)
        if flag:
            row.flags.append(flag)

    pred_tokens, truth_tokens = tokenize(prediction), tokenize(record.answer_text)
    row.rouge1 = rouge_n(pred_tokens, truth_tokens, 1)[2]
    row.rouge2 = rouge_n(pred_tokens, truth_tokens, 2)[2]
    row.rougeL = rouge_l(pred_tokens, truth_tokens)
    row.meteor = meteor(pred_tokens, truth_tokens, record.language)
    return row


def _fingerprint(predictions: Sequence[Prediction]) -> str:
    h = hashlib.sha256()
    for p in sorted(predictions, key=lambda p: p.record_id):
        h.update(json.dumps(asdict(p), ensure_ascii=False, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def evaluate_run(
    predictions: Sequence[Prediction],
    manifest: DatasetManifest,
    captions: Iterable[Caption] | None,
    judge: Judge,
    rel_tol: float = DEFAULT_REL_TOL,
    model: str | None = None,
    max_workers: int = 4,
) -> MetricReport:
    """Score one prediction per test record and aggregate.

    Rows come out sorted by record id, and the report carries no
    timestamps, so replayed runs serialize byte-identically.
    """
    test = {r.id: r for r in manifest.in_split("test")}
    by_id: dict[str, Prediction] = {}
    for p in predictions:
        if p.record_id in by_id:
            raise EvaluationError(f"duplicate prediction for {p.record_id!r}")
        if p.record_id not in test:
            raise EvaluationError(f"prediction for unknown or non-test record {p.record_id!r}")
        by_id[p.record_id] = p
    missing = sorted(set(test) - set(by_id))
    if missing:
        raise EvaluationError(f"missing predictions for {len(missing)} record(s): {missing[:5]}")
    modes = {p.mode for p in predictions}
    if len(modes) > 1:
        raise EvaluationError(f"predictions mix prompt modes {sorted(modes)}")

    ids = sorted(test)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        rows = list(pool.map(lambda rid: score_record(test[rid], by_id[rid].text, judge, rel_tol), ids))
    bleu_pairs = [(tokenize(by_id[rid].text), tokenize(test[rid].answer_text)) for rid in ids]

    captioned = None
    if captions is not None:
        effective = effective_captions(captions)
        captioned = sum((rid, test[rid].language) in effective for rid in ids)
    metadata = {
        "mode": modes.pop() if modes else None,
        "model": model,
        "judge_profile": judge.profile,
        "judge_model": judge.model_id if judge.uses_llm else None,
        "rel_tol": rel_tol,
        "n_records": len(rows),
        "captioned_records": captioned,
        "predictions_sha256": _fingerprint(predictions),
        "manifest": manifest.name,
    }
    return MetricReport(rows, aggregate(rows, bleu_pairs), metadata)
