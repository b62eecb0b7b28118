"""Evaluation: text metrics, judge-assisted component scores and run reports."""

from .judge import Judge, JudgeError
from .report import EvaluationError, MetricReport, RecordScores, evaluate_run, score_record
from .scores import (
    AccuracyTable,
    ConceptList,
    StepList,
    composite_numerical,
    composite_theoretical,
    score_css,
    score_factual,
    score_faa,
    score_mcq,
    scienceqa_accuracy,
)
from .text import corpus_bleu, embedding_f1, meteor, rouge_l, rouge_n, tokenize


def extract_final_numeric(answer_text: str, judge: Judge | None = None) -> tuple[float, str] | None:
    """Final numeric answer and unit; the judge decides when given, else a regex does."""
    if judge is None:
        judge = Judge(profile="local")
    return judge.final_answer(answer_text)


def score_iss(pred_steps: StepList, truth_steps: StepList, judge: Judge) -> float:
    return judge.score_iss(pred_steps, truth_steps)


__all__ = [
    "AccuracyTable",
    "ConceptList",
    "EvaluationError",
    "Judge",
    "JudgeError",
    "MetricReport",
    "RecordScores",
    "StepList",
    "composite_numerical",
    "composite_theoretical",
    "corpus_bleu",
    "embedding_f1",
    "evaluate_run",
    "extract_final_numeric",
    "meteor",
    "rouge_l",
    "rouge_n",
    "score_css",
    "score_factual",
    "score_faa",
    "score_iss",
    "score_mcq",
    "score_record",
    "scienceqa_accuracy",
    "tokenize",
]
