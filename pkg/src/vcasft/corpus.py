"""Multimodal science QA records: schema, JSONL storage, splitting and counts."""

from __future__ import annotations

import json
import math
import random
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

SCHEMA_VERSION = 1

LANGUAGES = ("en", "hi")
QTYPES = ("numerical", "theoretical", "conceptual", "factual", "mcq")
SUBJECTS = ("social_science", "natural_science", "language_science", "other")
GRADE_BANDS = ("lower", "secondary", "higher")
SPLITS = ("train", "test")
PROVENANCES = ("original", "augmented")
AUG_METHODS = ("CR", "Pa")

_HEADER_KEY = "_manifest"


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class FinalNumeric:
    value: float
    unit: str = ""


@dataclass(frozen=True)
class QARecord:
    """One question/answer item bound to an image.

    ``split`` is ``None`` for records that have not been assigned yet.
    Augmented records point back at their source through ``parent_id``.
    """

    id: str
    language: str
    qtype: str
    question_text: str
    answer_text: str
    image_ref: str
    split: str | None = None
    subject: str | None = None
    grade_band: str | None = None
    topic: str | None = None
    options: tuple[str, ...] | None = None
    correct_option: int | None = None
    final_numeric: FinalNumeric | None = None
    provenance: str = "original"
    parent_id: str | None = None
    augmentation_method: str | None = None

    @property
    def is_augmented(self) -> bool:
        return self.provenance == "augmented"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        if self.options is not None:
            out["options"] = list(self.options)
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "QARecord":
        """Build a record from a JSON object, raising ``RecordError`` on any violation."""
        problems = validate_record(obj)
        if problems:
            raise RecordError(problems)
        data = {k: _normalize(v) for k, v in obj.items()}
        if data.get("options") is not None:
            data["options"] = tuple(data["options"])
        if data.get("final_numeric") is not None:
            fn = data["final_numeric"]
            data["final_numeric"] = FinalNumeric(float(fn["value"]), fn.get("unit", ""))
        return cls(**data)


class RecordError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{f}: {r}" for f, r in problems))


@dataclass(frozen=True)
class Issue:
    line: int
    field: str
    reason: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.field}: {self.reason}"


class ManifestError(ValueError):
    """Raised when a manifest file has schema violations or duplicate ids."""

    def __init__(self, issues: list[Issue]):
        self.issues = issues
        head = "; ".join(str(i) for i in issues[:5])
        more = f" (+{len(issues) - 5} more)" if len(issues) > 5 else ""
        super().__init__(f"{len(issues)} invalid record(s): {head}{more}")


def _normalize(value: Any) -> Any:
    if isinstance(value, str):
        return nfc(value)
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    return value


_FIELDS = {
    "id", "language", "qtype", "subject", "grade_band", "topic", "question_text",
    "options", "correct_option", "answer_text", "final_numeric", "image_ref",
    "split", "provenance", "parent_id", "augmentation_method",
}
_REQUIRED = ("id", "language", "qtype", "question_text", "answer_text", "image_ref")
_ENUMS = {
    "language": LANGUAGES,
    "qtype": QTYPES,
    "subject": SUBJECTS,
    "grade_band": GRADE_BANDS,
    "split": SPLITS,
    "provenance": PROVENANCES,
    "augmentation_method": AUG_METHODS,
}


def validate_record(obj: Any) -> list[tuple[str, str]]:
    """Return ``(field, reason)`` pairs for every record-level invariant ``obj`` breaks.

    Cross-record rules (unique ids, augmented parents) are checked by
    :func:`validate_records`.
    """
    if not isinstance(obj, dict):
        return [("<record>", "not a JSON object")]
    problems: list[tuple[str, str]] = []
    for key in sorted(set(obj) - _FIELDS):
        problems.append((key, "unknown field"))
    for key in _REQUIRED:
        if key not in obj or obj[key] is None:
            problems.append((key, "missing"))
        elif not isinstance(obj[key], str):
            problems.append((key, "must be a string"))
    for key in ("id", "image_ref", "question_text"):
        if isinstance(obj.get(key), str) and not obj[key].strip():
            problems.append((key, "must be non-empty"))
    for key, allowed in _ENUMS.items():
        value = obj.get(key)
        if value is not None and value not in allowed:
            problems.append((key, f"{value!r} not in {allowed}"))
    for key in ("topic", "parent_id"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            problems.append((key, "must be a string"))

    qtype = obj.get("qtype")
    options = obj.get("options")
    correct = obj.get("correct_option")
    if qtype == "mcq":
        if options is None:
            problems.append(("options", "required for mcq"))
        if correct is None:
            problems.append(("correct_option", "required for mcq"))
    else:
        if options is not None:
            problems.append(("options", "only allowed for mcq"))
        if correct is not None:
            problems.append(("correct_option", "only allowed for mcq"))
    if options is not None and (
        not isinstance(options, list)
        or len(options) != 4
        or not all(isinstance(o, str) and o.strip() for o in options)
    ):
        problems.append(("options", "must be a list of exactly 4 non-empty strings"))
    if correct is not None and (
        not isinstance(correct, int) or isinstance(correct, bool) or not 0 <= correct <= 3
    ):
        problems.append(("correct_option", "must be an integer 0-3"))

    fn = obj.get("final_numeric")
    if qtype == "numerical" and fn is None:
        problems.append(("final_numeric", "required for numerical"))
    if fn is not None:
        if qtype != "numerical":
            problems.append(("final_numeric", "only allowed for numerical"))
        if not isinstance(fn, dict) or "value" not in fn:
            problems.append(("final_numeric", "must be an object with 'value'"))
        else:
            value = fn["value"]
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                problems.append(("final_numeric", "value must be a finite number"))
            if not isinstance(fn.get("unit", ""), str):
                problems.append(("final_numeric", "unit must be a string"))

    provenance = obj.get("provenance", "original")
    if provenance == "augmented":
        if not obj.get("parent_id"):
            problems.append(("parent_id", "required for augmented records"))
        if obj.get("augmentation_method") is None:
            problems.append(("augmentation_method", "required for augmented records"))
        if obj.get("split") == "test":
            problems.append(("split", "augmented records must be in train"))
    elif obj.get("parent_id") is not None or obj.get("augmentation_method") is not None:
        problems.append(("provenance", "parent_id/augmentation_method require provenance 'augmented'"))
    return problems


def validate_records(records: Iterable[QARecord], lines: list[int] | None = None) -> list[Issue]:
    """Cross-record checks: unique ids and resolvable augmented parents."""
    records = list(records)
    lines = lines or list(range(1, len(records) + 1))
    issues = []
    by_id: dict[str, QARecord] = {}
    for rec, line in zip(records, lines):
        if rec.id in by_id:
            issues.append(Issue(line, "id", f"duplicate id {rec.id!r}"))
        else:
            by_id[rec.id] = rec
    for rec, line in zip(records, lines):
        if not rec.is_augmented:
            continue
        parent = by_id.get(rec.parent_id)
        if parent is None:
            issues.append(Issue(line, "parent_id", f"unknown parent {rec.parent_id!r}"))
        elif parent.is_augmented:
            issues.append(Issue(line, "parent_id", f"parent {rec.parent_id!r} is not an original record"))
        elif parent.split != "train":
            issues.append(Issue(line, "parent_id", f"parent {rec.parent_id!r} is not in the train split"))
    return issues


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple[QARecord, ...] = field(default_factory=tuple)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def split_counts(self) -> dict[str, int]:
        counts = Counter(r.split for r in self.records)
        return {s: counts.get(s, 0) for s in SPLITS}

    def by_id(self) -> dict[str, QARecord]:
        return {r.id: r for r in self.records}

    def in_split(self, split: str) -> list[QARecord]:
        return [r for r in self.records if r.split == split]


def load_manifest(path: str | Path, name: str | None = None) -> DatasetManifest:
    """Parse a JSONL corpus file.

    Every line is validated; all violations are collected and raised together
    as a ``ManifestError`` so a single pass reports every bad line.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header: dict[str, Any] = {}
    records: list[QARecord] = []
    lines: list[int] = []
    issues: list[Issue] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                issues.append(Issue(lineno, "<json>", str(exc)))
                continue
            if isinstance(obj, dict) and _HEADER_KEY in obj:
                header = obj[_HEADER_KEY]
                continue
            try:
                records.append(QARecord.from_dict(obj))
                lines.append(lineno)
            except RecordError as exc:
                issues.extend(Issue(lineno, f, r) for f, r in exc.problems)
    issues.extend(validate_records(records, lines))
    if issues:
        raise ManifestError(sorted(issues, key=lambda i: i.line))
    return DatasetManifest(
        name=header.get("name", name or path.stem),
        records=tuple(records),
        schema_version=int(header.get("schema_version", SCHEMA_VERSION)),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {_HEADER_KEY: {"name": manifest.name, "schema_version": manifest.schema_version}}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def train_size(n: int, train_fraction: float) -> int:
    # round half up; 580 * 0.6327 -> 367
    return math.floor(n * train_fraction + 0.5)


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Deterministically reassign original records to train/test.

    Augmented records stay in train, and their parents are pinned to train
    (counted against the train quota) so provenance stays valid.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    originals = sorted((r for r in manifest.records if not r.is_augmented), key=lambda r: r.id)
    pinned = {r.parent_id for r in manifest.records if r.is_augmented}
    n_train = train_size(len(originals), train_fraction)
    if len(pinned) > n_train:
        raise ValueError(
            f"{len(pinned)} originals have augmented children but the train quota is {n_train}"
        )
    free = [r for r in originals if r.id not in pinned]
    random.Random(seed).shuffle(free)
    train_ids = set(pinned) | {r.id for r in free[: n_train - len(pinned)]}

    def assign(rec: QARecord) -> QARecord:
        if rec.is_augmented:
            return replace(rec, split="train")
        return replace(rec, split="train" if rec.id in train_ids else "test")

    return replace(manifest, records=tuple(assign(r) for r in manifest.records))


def dataset_stats(manifest: DatasetManifest) -> list[tuple[str, str, int]]:
    """Count records as ``(dimension, value, count)`` rows.

    Enumerated dimensions list every allowed value, including zero counts;
    topics list only the tags that occur.
    """
    recs = manifest.records
    rows: list[tuple[str, str, int]] = [("total", "all", len(recs))]
    split_counts = Counter(r.split or "unsplit" for r in recs)
    for s in SPLITS:
        rows.append(("split", s, split_counts.get(s, 0)))
    if split_counts.get("unsplit"):
        rows.append(("split", "unsplit", split_counts["unsplit"]))
    qtype_counts = Counter(r.qtype for r in recs)
    for q in QTYPES:
        rows.append(("qtype", q, qtype_counts.get(q, 0)))
    pair_counts = Counter((r.qtype, r.split or "unsplit") for r in recs)
    for q in QTYPES:
        for s in SPLITS:
            rows.append(("qtype_split", f"{q}/{s}", pair_counts.get((q, s), 0)))
    for q in QTYPES:
        if pair_counts.get((q, "unsplit")):
            rows.append(("qtype_split", f"{q}/unsplit", pair_counts[(q, "unsplit")]))
    lang_counts = Counter(r.language for r in recs)
    for lang in LANGUAGES:
        rows.append(("language", lang, lang_counts.get(lang, 0)))
    prov_counts = Counter(r.provenance for r in recs)
    for p in PROVENANCES:
        rows.append(("provenance", p, prov_counts.get(p, 0)))
    topic_counts = Counter(r.topic for r in recs if r.topic)
    for topic in sorted(topic_counts):
        rows.append(("topic", topic, topic_counts[topic]))
    return rows


def resolve_image(record: QARecord, assets_root: str | Path) -> Path:
    """Return the image path for ``record``; raise ``FileNotFoundError`` if absent."""
    path = Path(assets_root) / record.image_ref
    if not path.is_file():
        raise FileNotFoundError(f"image for {record.id!r} not found: {path}")
    return path
