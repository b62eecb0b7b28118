"""LLM-as-judge extraction for the evaluation schema, with local fallbacks."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Sequence

from ..gateway import ChatRequest, Gateway
from ..numbers import final_numeric
from ..templates import load_template
from .scores import (
    OPTION_LETTERS,
    ConceptList,
    StepList,
    match_steps_exact,
    parse_mcq_choice,
    score_factual,
    score_iss_from_matches,
)

JUDGE_PROFILES = ("llm", "local")
DEFAULT_JUDGE_MODEL = "gpt-4"

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?।])\s+|\n+")


class JudgeError(RuntimeError):
    pass


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s and s.strip()]


def _parse_json(text: str) -> Any:
    fence = re.search(r"```(?:json)?\s*\n(.*?)\n\s*```", text, re.DOTALL)
    if fence:
        text = fence.group(1)
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    for open_, close in ("[]", "{}"):
        start, end = text.find(open_), text.rfind(close)
        if 0 <= start < end:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                continue
    raise JudgeError(f"judge reply is not JSON: {text[:80]!r}")


def _string_list(reply: str) -> list[str]:
    data = _parse_json(reply)
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise JudgeError(f"expected a JSON array of strings, got {reply[:80]!r}")
    return data


@dataclass
class Judge:
    """Extracts steps, concepts, final answers and MCQ choices from free text.

    With ``profile="llm"`` every extraction goes through the gateway using
    the packaged judge templates. With ``profile="local"`` deterministic
    heuristics are used instead. Concept embeddings always come from the
    gateway.
    """

    gateway: Gateway | None = None
    profile: str = "llm"
    model_id: str = DEFAULT_JUDGE_MODEL

    def __post_init__(self):
        if self.profile not in JUDGE_PROFILES:
            raise ValueError(f"judge profile must be one of {JUDGE_PROFILES}")
        if self.profile == "llm" and self.gateway is None:
            raise ValueError("the llm judge profile needs a gateway")

    @property
    def uses_llm(self) -> bool:
        return self.profile == "llm"

    def _ask(self, template_id: str, **values: str) -> str:
        template = load_template(template_id)
        request = ChatRequest(
            model_id=self.model_id,
            system_text=template.system,
            user_text=template.render(**values),
        )
        return self.gateway.complete(request).text

    def extract_steps(self, record_id: str, side: str, text: str) -> StepList:
        if self.uses_llm:
            reply = self._ask("judge_steps_v1", answer=text)
            return StepList(record_id, side, tuple(_string_list(reply)), reply)
        return StepList(record_id, side, tuple(split_sentences(text)))

    def match_steps(self, pred: StepList, truth: StepList) -> list[bool]:
        if not truth.steps:
            raise ValueError(f"{truth.record_id}: no ground-truth steps")
        if not self.uses_llm:
            return match_steps_exact(pred.steps, truth.steps)
        if not pred.steps:
            return [False] * len(truth.steps)
        reply = self._ask(
            "judge_step_eval_v1",
            truth_steps=_numbered(truth.steps),
            pred_steps=_numbered(pred.steps),
        )
        data = _parse_json(reply)
        if not isinstance(data, list) or len(data) != len(truth.steps):
            raise JudgeError(f"{truth.record_id}: expected {len(truth.steps)} verdicts, got {reply[:80]!r}")
        return [_as_bool(x) for x in data]

    def score_iss(self, pred: StepList, truth: StepList) -> float:
        return score_iss_from_matches(self.match_steps(pred, truth))

    def extract_concepts(self, record_id: str, side: str, text: str) -> ConceptList:
        if self.uses_llm:
            reply = self._ask("judge_concepts_v1", answer=text)
            return ConceptList(record_id, side, tuple(_string_list(reply)), reply)
        return ConceptList(record_id, side, tuple(split_sentences(text)))

    def final_answer(self, text: str) -> tuple[float, str] | None:
        if not self.uses_llm:
            return final_numeric(text)
        reply = self._ask("judge_final_answer_v1", answer=text)
        data = _parse_json(reply)
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            return float(data), ""
        if not isinstance(data, dict) or "value" not in data:
            raise JudgeError(f"final-answer reply malformed: {reply[:80]!r}")
        if data["value"] is None:
            return None
        try:
            return float(data["value"]), str(data.get("unit") or "")
        except (TypeError, ValueError):
            raise JudgeError(f"final-answer value not numeric: {data['value']!r}") from None

    def mcq_choice(self, text: str, options: Sequence[str]) -> int | None:
        if not self.uses_llm:
            return parse_mcq_choice(text, options)
        listing = "\n".join(f"({l}) {o}" for l, o in zip(OPTION_LETTERS, options))
        reply = self._ask("judge_mcq_v1", answer=text, options=listing).strip().lower()
        m = re.fullmatch(r"\(?([a-d])\)?\.?", reply)
        return OPTION_LETTERS.index(m.group(1)) if m else None

    def fact_check(self, pred_text: str, truth_text: str) -> bool:
        if not self.uses_llm:
            return bool(score_factual(pred_text, truth_text))
        reply = self._ask("judge_fact_check_v1", answer=pred_text, truth=truth_text).strip().lower()
        return reply.startswith("yes") or reply.startswith("हाँ")


def _numbered(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(items, start=1))


def _as_bool(x: Any) -> bool:
    if isinstance(x, bool):
        return x
    if isinstance(x, str):
        return x.strip().lower() in ("true", "yes", "matched", "1")
    if isinstance(x, (int, float)):
        return x == 1
    return False
