"""Image captions: generation, Hindi translation, human overrides and the sidecar store."""

from __future__ import annotations

import json
import logging
import mimetypes
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from .corpus import LANGUAGES, DatasetManifest, QARecord, nfc, resolve_image
from .gateway import ChatRequest, Gateway
from .templates import load_template

logger = logging.getLogger(__name__)

SOURCES = ("generated", "translated", "human_override")
_PRECEDENCE = {"generated": 0, "translated": 1, "human_override": 2}

DEFAULT_CAPTION_MODEL = "gemini-pro-vision"
DEFAULT_TRANSLATION_MODEL = "gemini-pro"


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class Caption:
    record_id: str
    language: str
    text: str
    source: str
    model_id: str | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise CaptionError(f"empty caption text for {self.record_id!r}")
        if self.language not in LANGUAGES:
            raise CaptionError(f"unsupported language {self.language!r}")
        if self.source not in SOURCES:
            raise CaptionError(f"unknown caption source {self.source!r}")
        object.__setattr__(self, "text", nfc(self.text))

    @property
    def key(self) -> tuple[str, str]:
        return (self.record_id, self.language)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _image_payload(path: Path) -> tuple[bytes, str]:
    media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return path.read_bytes(), media_type


def _caption_request(path: Path, template_id: str, model_id: str) -> ChatRequest:
    template = load_template(template_id)
    image, media_type = _image_payload(path)
    return ChatRequest(
        model_id=model_id,
        system_text=template.system,
        user_text=template.render(),
        image=image,
        media_type=media_type,
    )


def generate_caption(
    record: QARecord,
    gateway: Gateway,
    assets_root: str | Path,
    template_id: str = "caption_v1",
    model_id: str = DEFAULT_CAPTION_MODEL,
) -> Caption:
    """Caption the record's image in English, whatever the record's language."""
    path = resolve_image(record, assets_root)
    response = gateway.complete(_caption_request(path, template_id, model_id))
    return Caption(record.id, "en", response.text.strip(), "generated", model_id)


def caption_corpus(
    manifest: DatasetManifest,
    gateway: Gateway,
    assets_root: str | Path,
    template_id: str = "caption_v1",
    model_id: str = DEFAULT_CAPTION_MODEL,
) -> list[Caption]:
    # resolve every image up front so a missing file fails before any request
    paths = [resolve_image(r, assets_root) for r in manifest.records]
    requests = [_caption_request(p, template_id, model_id) for p in paths]
    responses = gateway.complete_many(requests)
    return [
        Caption(rec.id, "en", resp.text.strip(), "generated", model_id)
        for rec, resp in zip(manifest.records, responses)
    ]


def _translation_request(caption: Caption, target: str, template_id: str, model_id: str) -> ChatRequest:
    if caption.language != "en":
        raise CaptionError(f"only English captions can be translated (got {caption.language!r})")
    if target != "hi":
        raise CaptionError(f"unsupported translation target {target!r}")
    template = load_template(template_id)
    return ChatRequest(model_id=model_id, system_text=template.system, user_text=template.render(text=caption.text))


def translate_caption(
    caption: Caption,
    target: str,
    gateway: Gateway,
    template_id: str = "translate_hi_v1",
    model_id: str = DEFAULT_TRANSLATION_MODEL,
) -> Caption:
    request = _translation_request(caption, target, template_id, model_id)
    response = gateway.complete(request)
    return Caption(caption.record_id, target, response.text.strip(), "translated", model_id)


def translate_corpus(
    manifest: DatasetManifest,
    captions: Iterable[Caption],
    gateway: Gateway,
    template_id: str = "translate_hi_v1",
    model_id: str = DEFAULT_TRANSLATION_MODEL,
) -> list[Caption]:
    """Translate the effective English caption of every Hindi record."""
    effective = effective_captions(captions)
    sources = []
    for rec in manifest.records:
        if rec.language != "hi":
            continue
        en = effective.get((rec.id, "en"))
        if en is None:
            raise CaptionError(f"record {rec.id!r} has no English caption to translate")
        sources.append(en)
    requests = [_translation_request(c, "hi", template_id, model_id) for c in sources]
    responses = gateway.complete_many(requests)
    return [Caption(c.record_id, "hi", r.text.strip(), "translated", model_id) for c, r in zip(sources, responses)]


def effective_captions(captions: Iterable[Caption]) -> dict[tuple[str, str], Caption]:
    """Resolve one caption per (record_id, language): override beats translated beats generated.

    Among captions of equal precedence the last one wins.
    """
    best: dict[tuple[str, str], Caption] = {}
    for cap in captions:
        cur = best.get(cap.key)
        if cur is None or _PRECEDENCE[cap.source] >= _PRECEDENCE[cur.source]:
            best[cap.key] = cap
    return best


def check_translation_links(captions: Iterable[Caption]) -> list[str]:
    """Return record ids whose translated caption has no English source caption."""
    captions = list(captions)
    english = {c.record_id for c in captions if c.language == "en"}
    return sorted({c.record_id for c in captions if c.source == "translated" and c.record_id not in english})


def read_overrides(path: str | Path) -> list[Caption]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            obj = json.loads(raw)
            try:
                out.append(Caption(obj["record_id"], obj["language"], obj["text"], "human_override"))
            except KeyError as exc:
                raise CaptionError(f"{path}:{lineno}: override missing {exc}") from None
    return out


def apply_overrides(
    captions: Iterable[Caption],
    overrides_path: str | Path,
    known_ids: Iterable[str] | None = None,
) -> list[Caption]:
    """Replace captions with annotator corrections from ``overrides_path``.

    ``known_ids`` defaults to the record ids present in ``captions``. An
    override for a key with no caption yet is appended.
    """
    captions = list(captions)
    overrides = read_overrides(overrides_path)
    known = set(known_ids) if known_ids is not None else {c.record_id for c in captions}
    for ov in overrides:
        if ov.record_id not in known:
            raise CaptionError(f"override references unknown record_id {ov.record_id!r}")
    by_key = {ov.key: ov for ov in overrides}
    out, used = [], set()
    for cap in captions:
        ov = by_key.get(cap.key)
        if ov is None:
            out.append(cap)
        elif cap.key not in used:
            out.append(ov)
            used.add(cap.key)
    out.extend(ov for key, ov in by_key.items() if key not in used)
    return out


def lint_captions(manifest: DatasetManifest, captions: Iterable[Caption], split: str | None = None) -> list[str]:
    """Record ids that lack an effective caption in their own language."""
    effective = effective_captions(captions)
    records = manifest.records if split is None else manifest.in_split(split)
    return [r.id for r in records if (r.id, r.language) not in effective]


# -- sidecar store -------------------------------------------------------------


def read_captions(path: str | Path) -> list[Caption]:
    path = Path(path)
    if not path.is_file():
        return []
    with path.open(encoding="utf-8") as fh:
        return [Caption(**json.loads(line)) for line in fh if line.strip()]


def append_captions(path: str | Path, captions: Iterable[Caption]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps(cap.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def compact_captions(captions: Iterable[Caption]) -> list[Caption]:
    """Keep the latest caption per (record_id, language, source), sorted for stable output."""
    latest: dict[tuple[str, str, str], Caption] = {}
    for cap in captions:
        latest[(cap.record_id, cap.language, cap.source)] = cap
    return [latest[k] for k in sorted(latest, key=lambda k: (k[0], k[1], _PRECEDENCE[k[2]]))]


def write_captions(path: str | Path, captions: Iterable[Caption]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for cap in compact_captions(captions):
            fh.write(json.dumps(cap.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)
    return path

