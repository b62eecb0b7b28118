"""Per-record scorers and the weighted composites for each question type."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from ..gateway import Gateway, cosine
from .text import normalize_text, tokenize

# numerical: final answer dominates, steps weigh least since valid derivations differ
NUMERICAL_WEIGHTS = {"s_faa": 0.5, "s_iss": 0.15, "s_css": 0.35}
# theoretical: concepts to steps held at 4:1
THEORETICAL_WEIGHTS = {"s_iss": 0.2, "s_css": 0.8}

FAA_TOL_RANGE = (0.02, 0.03)
DEFAULT_REL_TOL = 0.02
DEFAULT_ABS_TOL = 1e-6


@dataclass(frozen=True)
class StepList:
    record_id: str
    side: str
    steps: tuple[str, ...]
    transcript: str = ""

    def __post_init__(self):
        if self.side not in ("prediction", "ground_truth"):
            raise ValueError(f"side must be prediction or ground_truth, got {self.side!r}")
        steps = tuple(s.strip() for s in self.steps if s and s.strip())
        object.__setattr__(self, "steps", steps)


@dataclass(frozen=True)
class ConceptList:
    record_id: str
    side: str
    concepts: tuple[str, ...]
    transcript: str = ""

    def __post_init__(self):
        seen, out = set(), []
        for c in self.concepts:
            c = c.strip() if c else ""
            key = normalize_text(c).strip()
            if key and key not in seen:
                seen.add(key)
                out.append(c)
        object.__setattr__(self, "concepts", tuple(out))


def _check_unit_interval(**scores: float) -> None:
    for name, value in scores.items():
        if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
            raise ValueError(f"{name} must be in [0, 1], got {value!r}")


def composite_numerical(s_faa: float, s_iss: float, s_css: float) -> float:
    _check_unit_interval(s_faa=s_faa, s_iss=s_iss, s_css=s_css)
    w = NUMERICAL_WEIGHTS
    return w["s_faa"] * s_faa + w["s_iss"] * s_iss + w["s_css"] * s_css


def composite_theoretical(s_iss: float, s_css: float) -> float:
    _check_unit_interval(s_iss=s_iss, s_css=s_css)
    w = THEORETICAL_WEIGHTS
    return w["s_iss"] * s_iss + w["s_css"] * s_css


def score_faa(
    pred: float,
    truth: float,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> int:
    """1 if ``pred`` lies within ``rel_tol`` of ``truth`` (inclusive), else 0.

    A zero ground truth falls back to the absolute tolerance.
    """
    lo, hi = FAA_TOL_RANGE
    if not lo <= rel_tol <= hi:
        raise ValueError(f"rel_tol must be in [{lo}, {hi}], got {rel_tol}")
    if not (math.isfinite(pred) and math.isfinite(truth)):
        raise ValueError("score_faa needs finite inputs")
    diff = abs(pred - truth)
    if truth == 0:
        return int(diff <= abs_tol)
    # slack of a few ulps keeps boundary cases such as 102 vs 100 at 2% inclusive
    return int(diff <= rel_tol * abs(truth) * (1 + 1e-12))


def match_steps_exact(pred_steps: Sequence[str], truth_steps: Sequence[str]) -> list[bool]:
    pred = {" ".join(tokenize(s)) for s in pred_steps}
    return [" ".join(tokenize(s)) in pred for s in truth_steps]


def score_iss_from_matches(matches: Sequence[bool]) -> float:
    if not matches:
        raise ValueError("intermediate-steps score needs at least one ground-truth step")
    return sum(bool(m) for m in matches) / len(matches)


def score_css(pred: ConceptList, truth: ConceptList, gateway: Gateway) -> tuple[float, str | None]:
    """Mean over truth concepts of the best cosine against any predicted concept.

    Returns ``(score, flag)``; the flag names degenerate inputs.
    """
    if not truth.concepts and not pred.concepts:
        return 0.0, "no-concepts"
    if not truth.concepts:
        return 0.0, "no-truth-concepts"
    if not pred.concepts:
        return 0.0, "no-predicted-concepts"
    vectors = gateway.embed(list(truth.concepts) + list(pred.concepts))
    tv, pv = vectors[: len(truth.concepts)], vectors[len(truth.concepts) :]
    best = [max(cosine(t, p) for p in pv) for t in tv]
    return min(1.0, max(0.0, sum(best) / len(best))), None


_STOPWORDS = {
    "a", "an", "the", "is", "are", "was", "were", "be", "of", "to", "in", "on", "at", "and", "or",
    "it", "its", "this", "that", "by", "for", "as", "with", "from",
    "है", "हैं", "था", "थे", "का", "की", "के", "को", "में", "से", "पर", "और", "या", "यह", "वह", "एक",
}


def content_tokens(text: str) -> list[str]:
    tokens = tokenize(text)
    content = [t for t in tokens if t not in _STOPWORDS]
    return content or tokens


def score_factual(pred_text: str, truth_text: str) -> int:
    """1 iff every content word of the truth appears in the prediction."""
    truth = content_tokens(truth_text)
    if not truth:
        raise ValueError("factual ground truth is empty")
    pred = set(tokenize(pred_text))
    return int(all(t in pred for t in truth))


OPTION_LETTERS = "abcd"
_HINDI_LETTERS = "कखगघ"
_LETTER_PATTERNS = [
    re.compile(r"\(\s*([a-dA-D])\s*\)"),
    re.compile(r"(?:^|\s)([a-dA-D])\)"),
    re.compile(r"\b(?:option|answer|choice|उत्तर|विकल्प)\s*(?:is|:|-)?\s*\(?([a-dA-D])\b\)?", re.IGNORECASE),
    re.compile(r"^\s*([a-dA-D])\s*[.:]?\s*$"),
    re.compile(r"\(\s*([कखगघ])\s*\)"),
]


def parse_mcq_choice(pred_text: str, options: Sequence[str]) -> int | None:
    """Local choice extraction: an explicit option letter, else a unique quoted option text."""
    for pattern in _LETTER_PATTERNS:
        letters = {m.group(1).lower() for m in pattern.finditer(pred_text)}
        if len(letters) == 1:
            (letter,) = letters
            return OPTION_LETTERS.index(letter) if letter in OPTION_LETTERS else _HINDI_LETTERS.index(letter)
        if len(letters) > 1:
            return None
    norm_pred = " " + " ".join(tokenize(pred_text)) + " "
    hits = [i for i, opt in enumerate(options) if " " + " ".join(tokenize(opt)) + " " in norm_pred]
    return hits[0] if len(hits) == 1 else None


def score_mcq_choice(choice: int | None, correct_option: int, options: Sequence[str]) -> tuple[int, str | None]:
    if len(options) != 4:
        raise ValueError("mcq scoring needs exactly 4 options")
    if choice is None:
        return 0, "unparseable-choice"
    return int(choice == correct_option), None


def score_mcq(pred_text: str, correct_option: int, options: Sequence[str]) -> tuple[int, str | None]:
    """Local matcher variant; the judge-backed path lives in :class:`Judge`."""
    return score_mcq_choice(parse_mcq_choice(pred_text, options), correct_option, options)


# -- ScienceQA accuracy -------------------------------------------------------


def percent(correct: int, total: int) -> float:
    value = (Decimal(correct) * 100 / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(value)


@dataclass
class AccuracyTable:
    overall: float
    n: int
    subject: dict[str, float] = field(default_factory=dict)
    grade_band: dict[str, float] = field(default_factory=dict)
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)


def scienceqa_accuracy(rows: Iterable[tuple[bool, str | None, str | None]]) -> AccuracyTable:
    """Accuracy in percent (2 decimals), overall and per subject and grade band."""
    rows = list(rows)
    if not rows:
        raise ValueError("scienceqa_accuracy needs at least one row")
    groups: dict[str, list[int]] = {}

    def add(key: str, ok: bool) -> None:
        c = groups.setdefault(key, [0, 0])
        c[0] += int(ok)
        c[1] += 1

    for ok, subject, grade in rows:
        add("overall", ok)
        if subject:
            add(f"subject:{subject}", ok)
        if grade:
            add(f"grade_band:{grade}", ok)
    table = AccuracyTable(overall=percent(*groups["overall"]), n=len(rows))
    for key, (c, t) in sorted(groups.items()):
        table.counts[key] = (c, t)
        if key.startswith("subject:"):
            table.subject[key.split(":", 1)[1]] = percent(c, t)
        elif key.startswith("grade_band:"):
            table.grade_band[key.split(":", 1)[1]] = percent(c, t)
    return table
