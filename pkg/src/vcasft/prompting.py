"""Render training and inference prompts with or without the image caption block."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .captioning import Caption, effective_captions
from .corpus import DatasetManifest, QARecord
from .templates import load_template

MODES = ("sft", "vcasft", "ablation_no_image", "zero_shot")
CAPTION_MODES = ("vcasft", "ablation_no_image")

LABELS = {
    "en": {"caption": "Caption", "question": "Question"},
    "hi": {"caption": "कैप्शन", "question": "प्रश्न"},
}
OPTION_LETTERS = ("a", "b", "c", "d")


class MissingCaption(ValueError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    record_id: str
    mode: str
    rendered_text: str
    includes_image: bool
    target_answer: str | None = None
    language: str = "en"
    image_ref: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def needs_caption(mode: str) -> bool:
    return mode in CAPTION_MODES


def render_options(options: Iterable[str] | None) -> str:
    if not options:
        return ""
    return "".join(f"\n({letter}) {opt}" for letter, opt in zip(OPTION_LETTERS, options))


def build_prompt(
    record: QARecord,
    caption: Caption | None,
    mode: str,
    template_id: str = "v1",
    target: bool = False,
) -> PromptBundle:
    """Render one record's prompt.

    ``template_id`` names a template family: captioned modes use
    ``prompt_vcasft_<id>`` and the others ``prompt_sft_<id>``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    labels = LABELS[record.language]
    values = {
        "question_label": labels["question"],
        "caption_label": labels["caption"],
        "question": record.question_text,
        "options": render_options(record.options),
    }
    if needs_caption(mode):
        if caption is None:
            raise MissingCaption(f"record {record.id!r} has no {record.language} caption for mode {mode}")
        if caption.language != record.language or caption.record_id != record.id:
            raise MissingCaption(
                f"caption {caption.key} does not belong to record {(record.id, record.language)}"
            )
        values["caption"] = caption.text
        template = load_template(f"prompt_vcasft_{template_id}")
    else:
        template = load_template(f"prompt_sft_{template_id}")
    return PromptBundle(
        record_id=record.id,
        mode=mode,
        rendered_text=template.render(**values),
        includes_image=mode != "ablation_no_image",
        target_answer=record.answer_text if target else None,
        language=record.language,
        image_ref=record.image_ref,
    )


class PromptBuildError(ValueError):
    def __init__(self, errors: Mapping[str, str]):
        self.errors = dict(errors)
        super().__init__("; ".join(f"{rid}: {msg}" for rid, msg in sorted(self.errors.items())))


def build_prompts(
    records: Iterable[QARecord],
    captions: Iterable[Caption],
    mode: str,
    template_id: str = "v1",
    target: bool = False,
) -> tuple[list[PromptBundle], dict[str, str]]:
    """Render bundles for ``records`` sorted by id; per-record failures are returned, not raised."""
    effective = effective_captions(captions)
    bundles, errors = [], {}
    for rec in sorted(records, key=lambda r: r.id):
        try:
            bundles.append(build_prompt(rec, effective.get((rec.id, rec.language)), mode, template_id, target))
        except MissingCaption as exc:
            errors[rec.id] = str(exc)
    return bundles, errors


def build_training_set(
    manifest: DatasetManifest,
    captions: Iterable[Caption],
    mode: str,
    template_id: str = "v1",
) -> tuple[list[PromptBundle], dict[str, str]]:
    """One bundle per train record with ``target_answer`` set.

    Returns ``(bundles, errors)``; ``errors`` maps record id to the reason
    its bundle could not be built. Test records are never included.
    """
    return build_prompts(manifest.in_split("train"), captions, mode, template_id, target=True)


def write_bundles(path: str | Path, bundles: Iterable[PromptBundle]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_bundles(path: str | Path) -> list[PromptBundle]:
    with Path(path).open(encoding="utf-8") as fh:
        return [PromptBundle(**json.loads(line)) for line in fh if line.strip()]
