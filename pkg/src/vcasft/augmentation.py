"""Training-set expansion by constant replacement (CR) and paraphrasing (Pa).

Candidates are generated through the gateway, scored for diversity against
their parent question, filtered, validated, and finally reviewed by a human
through a patch file before being injected into the manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .corpus import DatasetManifest, FinalNumeric, QARecord
from .gateway import ChatRequest, Gateway, cosine
from .numbers import extract_constants, final_numeric, same_value
from .templates import load_template

logger = logging.getLogger(__name__)

METHODS = ("CR", "Pa")
MAX_CANDIDATES = 10
NUMERICAL_CAP = 10
OTHER_CAP = 6
DEFAULT_MAX_COSINE = 0.9
DEFAULT_AUGMENT_MODEL = "gpt-4"


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentationCandidate:
    parent_id: str
    method: str
    question_text: str
    answer_text: str
    diversity_cosine: float | None = None
    accepted: bool = False
    violations: list[str] = field(default_factory=list)

    @property
    def candidate_id(self) -> str:
        digest = hashlib.sha256(f"{self.parent_id}\x1f{self.method}\x1f{self.question_text}".encode("utf-8"))
        return f"{self.parent_id}:{self.method}:{digest.hexdigest()[:12]}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["candidate_id"] = self.candidate_id
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentationCandidate":
        obj = {k: v for k, v in obj.items() if k != "candidate_id"}
        return cls(**obj)


def _parse_json_array(text: str) -> list:
    fence = re.search(r"```(?:json)?\s*\n(.*?)\n\s*```", text, re.DOTALL)
    if fence:
        text = fence.group(1)
    start, end = text.find("["), text.rfind("]")
    if start < 0 or end < start:
        raise ValueError("no JSON array in response")
    data = json.loads(text[start : end + 1])
    if not isinstance(data, list):
        raise ValueError("response is not a JSON array")
    return data


def _check_parent(record: QARecord) -> None:
    if record.is_augmented:
        raise AugmentationError(f"{record.id!r} is itself augmented; only originals can be parents")
    if record.split != "train":
        raise AugmentationError(f"{record.id!r} is not in the train split")


def generate_candidates(
    record: QARecord,
    method: str,
    n: int,
    gateway: Gateway,
    model_id: str = DEFAULT_AUGMENT_MODEL,
) -> list[AugmentationCandidate]:
    """Ask the model for up to ``n`` rewrites of ``record``.

    CR returns new questions with updated solutions and applies only to
    numerical records. Pa returns rewordings and keeps the parent's answer.
    Malformed items are dropped with a warning.
    """
    if method not in METHODS:
        raise AugmentationError(f"unknown method {method!r}")
    if not 1 <= n <= MAX_CANDIDATES:
        raise AugmentationError(f"n must be in [1, {MAX_CANDIDATES}], got {n}")
    if method == "CR" and record.qtype != "numerical":
        raise AugmentationError(f"constant replacement needs a numerical record, {record.id!r} is {record.qtype}")
    _check_parent(record)

    template = load_template("augment_cr_v1" if method == "CR" else "augment_pa_v1")
    user = template.render(question=record.question_text, answer=record.answer_text, n=str(n))
    response = gateway.complete(ChatRequest(model_id=model_id, system_text=template.system, user_text=user))
    try:
        items = _parse_json_array(response.text)
    except ValueError as exc:
        raise AugmentationError(f"unparseable {method} response for {record.id!r}: {exc}") from exc

    out: list[AugmentationCandidate] = []
    seen: set[str] = set()
    for i, item in enumerate(items):
        if method == "CR":
            if not (isinstance(item, dict) and isinstance(item.get("question"), str) and isinstance(item.get("solution"), str)):
                logger.warning("%s CR item %d: expected {question, solution}, dropped", record.id, i)
                continue
            question, answer = item["question"].strip(), item["solution"].strip()
            if not answer:
                logger.warning("%s CR item %d: empty solution, dropped", record.id, i)
                continue
        else:
            if isinstance(item, dict):
                item = item.get("question")
            if not isinstance(item, str):
                logger.warning("%s Pa item %d: expected a string, dropped", record.id, i)
                continue
            question, answer = item.strip(), record.answer_text
        if not question or question in seen:
            continue
        seen.add(question)
        out.append(AugmentationCandidate(record.id, method, question, answer))
        if len(out) == n:
            break
    if not out:
        raise AugmentationError(f"no usable {method} candidates for {record.id!r}")
    return out


def diversity_score(parent: QARecord, candidate: AugmentationCandidate, gateway: Gateway) -> float:
    """Cosine between parent and candidate question embeddings; stored on the candidate."""
    a, b = gateway.embed([parent.question_text, candidate.question_text])
    candidate.diversity_cosine = cosine(a, b)
    return candidate.diversity_cosine


def select_candidates(
    candidates: Sequence[AugmentationCandidate],
    qtype: str,
    max_cosine: float = DEFAULT_MAX_COSINE,
) -> list[AugmentationCandidate]:
    """Keep the most diverse candidates: 10 for numerical parents, 6 otherwise.

    Candidates above ``max_cosine`` are too close to the parent. Order is
    ascending cosine with question text as tie-break. Returns accepted
    copies; inputs are not modified.
    """
    for c in candidates:
        if c.diversity_cosine is None:
            raise ValueError(f"candidate {c.candidate_id} has no diversity score")
    cap = NUMERICAL_CAP if qtype == "numerical" else OTHER_CAP
    survivors = [c for c in candidates if c.diversity_cosine <= max_cosine and not c.violations]
    survivors.sort(key=lambda c: (c.diversity_cosine, c.question_text))
    return [replace(c, accepted=True) for c in survivors[:cap]]


def validate_cr(parent: QARecord, candidate: AugmentationCandidate) -> list[str]:
    """List problems with a constant-replacement candidate, for human review.

    Checks that no (value, unit) constant of the parent question survives,
    that every parent unit still appears, and that the final numeric answer
    changed.
    """
    violations = []
    parent_consts = extract_constants(parent.question_text)
    cand_consts = extract_constants(candidate.question_text)
    for pc in parent_consts:
        for cc in cand_consts:
            if same_value(pc.value, cc.value) and (pc.unit == cc.unit or not pc.unit):
                violations.append(f"constant survives: {pc.literal!r}")
                break
    cand_units = {c.unit for c in cand_consts}
    for unit in sorted({c.unit for c in parent_consts if c.unit}):
        if unit not in cand_units:
            violations.append(f"unit dropped: {unit!r}")

    if parent.final_numeric is not None:
        parent_final: float | None = parent.final_numeric.value
    else:
        found = final_numeric(parent.answer_text)
        parent_final = found[0] if found else None
    cand_final = final_numeric(candidate.answer_text)
    if cand_final is None:
        violations.append("no final numeric answer in updated solution")
    elif parent_final is not None and same_value(cand_final[0], parent_final):
        violations.append(f"final answer unchanged: {cand_final[0]:g}")
    return violations


def augment_record(
    parent: QARecord,
    methods: Sequence[str],
    gateway: Gateway,
    n: int = MAX_CANDIDATES,
    max_cosine: float = DEFAULT_MAX_COSINE,
    model_id: str = DEFAULT_AUGMENT_MODEL,
) -> list[AugmentationCandidate]:
    """Generate, score, validate and select candidates for one parent.

    CR is skipped for non-numerical parents. Selection caps apply to the
    union of all methods. Returns every candidate with ``accepted`` set on
    the selected ones; CR candidates with violations stay unaccepted until
    reviewed.
    """
    candidates: list[AugmentationCandidate] = []
    for method in methods:
        if method == "CR" and parent.qtype != "numerical":
            continue
        candidates.extend(generate_candidates(parent, method, n, gateway, model_id))
    for cand in candidates:
        diversity_score(parent, cand, gateway)
        if cand.method == "CR":
            cand.violations = validate_cr(parent, cand)
    chosen = {c.candidate_id for c in select_candidates(candidates, parent.qtype, max_cosine)}
    for cand in candidates:
        cand.accepted = cand.candidate_id in chosen
    return candidates


def mean_diversity(candidates: Iterable[AugmentationCandidate], accepted_only: bool = True) -> float | None:
    scores = [
        c.diversity_cosine
        for c in candidates
        if c.diversity_cosine is not None and (c.accepted or not accepted_only)
    ]
    return sum(scores) / len(scores) if scores else None


def write_candidates(path: str | Path, candidates: Iterable[AugmentationCandidate]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_candidates(path: str | Path) -> list[AugmentationCandidate]:
    with Path(path).open(encoding="utf-8") as fh:
        return [AugmentationCandidate.from_dict(json.loads(line)) for line in fh if line.strip()]


def apply_review(
    candidates: Sequence[AugmentationCandidate],
    patch_path: str | Path,
    parents: dict[str, QARecord] | None = None,
) -> list[AugmentationCandidate]:
    """Apply an annotator's accept/reject patch.

    Each patch line carries ``candidate_id`` and ``accepted`` and may also
    carry corrected ``question_text``/``answer_text``. When ``parents`` is
    given, corrected CR candidates are re-validated.
    """
    by_id = {c.candidate_id: c for c in candidates}
    patched = {cid: replace(c) for cid, c in by_id.items()}
    with Path(patch_path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            entry = json.loads(raw)
            cid = entry.get("candidate_id")
            if cid not in patched:
                raise AugmentationError(f"{patch_path}:{lineno}: unknown candidate {cid!r}")
            cand = patched[cid]
            for key in ("question_text", "answer_text"):
                if key in entry:
                    setattr(cand, key, entry[key])
            cand.accepted = bool(entry.get("accepted", cand.accepted))
            if cand.method == "CR" and parents is not None:
                cand.violations = validate_cr(parents[cand.parent_id], cand)
                if cand.accepted and cand.violations:
                    raise AugmentationError(f"accepted candidate {cid} still fails validation: {cand.violations}")
            elif cand.violations and cand.accepted:
                cand.violations = []
    return [patched[c.candidate_id] for c in candidates]


def inject_candidates(
    manifest: DatasetManifest,
    candidates: Iterable[AugmentationCandidate],
) -> DatasetManifest:
    """Append every accepted candidate as an augmented train record."""
    parents = manifest.by_id()
    existing = set(parents)
    counters: Counter[tuple[str, str]] = Counter()
    new_records = []
    for cand in candidates:
        if not cand.accepted:
            continue
        parent = parents.get(cand.parent_id)
        if parent is None:
            raise AugmentationError(f"candidate {cand.candidate_id} has unknown parent {cand.parent_id!r}")
        _check_parent(parent)
        if cand.method == "Pa" and cand.answer_text != parent.answer_text:
            raise AugmentationError(f"paraphrase {cand.candidate_id} changed the answer")
        counters[(parent.id, cand.method)] += 1
        rid = f"{parent.id}-{cand.method.lower()}{counters[(parent.id, cand.method)]:02d}"
        if rid in existing:
            raise AugmentationError(f"augmented id {rid!r} already exists")
        existing.add(rid)
        fn = parent.final_numeric
        if cand.method == "CR":
            found = final_numeric(cand.answer_text)
            if found is None:
                raise AugmentationError(f"candidate {cand.candidate_id} has no final numeric answer")
            fn = FinalNumeric(found[0], found[1] or (parent.final_numeric.unit if parent.final_numeric else ""))
        new_records.append(
            replace(
                parent,
                id=rid,
                question_text=cand.question_text,
                answer_text=cand.answer_text,
                final_numeric=fn,
                split="train",
                provenance="augmented",
                parent_id=parent.id,
                augmentation_method=cand.method,
            )
        )
    return replace(manifest, records=manifest.records + tuple(new_records))


def cohen_kappa(ratings_a: Sequence[Hashable], ratings_b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two raters over the same items."""
    if len(ratings_a) != len(ratings_b):
        raise ValueError(f"length mismatch: {len(ratings_a)} != {len(ratings_b)}")
    n = len(ratings_a)
    if n == 0:
        raise ValueError("cohen_kappa needs at least one rating")
    p_o = sum(a == b for a, b in zip(ratings_a, ratings_b)) / n
    count_a, count_b = Counter(ratings_a), Counter(ratings_b)
    p_e = sum(count_a[label] * count_b[label] for label in count_a) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)
