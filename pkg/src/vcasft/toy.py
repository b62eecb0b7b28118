"""A ten-record demo workspace with recorded replay fixtures.

``python -m vcasft.toy DIR`` writes a small bilingual corpus with tiny
PNG images, runs every stage against :class:`ScriptedTransport` (a
deterministic stand-in for the remote caption, translation, augmentation
and judge models) and exports the responses as ``fixtures.json``. The
resulting ``config.json`` then runs the whole pipeline offline in replay mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import shutil
import string
import struct
import sys
import tempfile
import zlib
from pathlib import Path
from typing import Any

from .corpus import DatasetManifest, FinalNumeric, QARecord, save_manifest
from .gateway import ChatRequest, Gateway
from .metrics.judge import split_sentences
from .metrics.scores import OPTION_LETTERS, parse_mcq_choice, score_factual
from .metrics.text import tokenize
from .numbers import final_numeric
from .pipeline import Pipeline, PipelineConfig
from .prompting import MODES
from .templates import available_templates, load_template

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 16
MODEL_LABEL = "toy"

PARAPHRASE_PREFIXES = {
    "en": (
        "Answer the following.",
        "Consider this situation.",
        "Look at the figure.",
        "A student asks:",
        "Here is a problem.",
        "Try this one.",
        "Think carefully.",
        "From the diagram,",
        "Question for the class:",
        "Exam practice:",
    ),
    "hi": (
        "निम्नलिखित का उत्तर दीजिए।",
        "इस स्थिति पर विचार करें।",
        "चित्र को देखिए।",
        "एक छात्र पूछता है:",
        "यह एक प्रश्न है।",
        "इसे हल कीजिए।",
        "ध्यान से सोचिए।",
        "आरेख के अनुसार,",
        "कक्षा के लिए प्रश्न:",
        "परीक्षा अभ्यास:",
    ),
}

_DEVANAGARI = re.compile(r"[ऀ-ॿ]")


def ohm_question(r: float, i: float) -> str:
    return f"A resistor of {r:g} Ω carries a current of {i:g} A. What is the voltage across it?"


def ohm_solution(r: float, i: float) -> str:
    return f"Ohm's law gives V = I × R. Substituting the values, V = {i:g} A × {r:g} Ω. Therefore V = {r * i:g} V."


def ohm_variants(n: int) -> list[dict[str, str]]:
    """Constant-replacement variants of the toy Ohm's-law question.

    The last variant deliberately keeps the original resistance so that
    review has something to catch.
    """
    out = []
    for k in range(1, n + 1):
        r, i = (5, 2 + k) if k == 10 else (5 + k, 2 + k)
        out.append({"question": ohm_question(r, i), "solution": ohm_solution(r, i)})
    return out


def _record(**kw: Any) -> QARecord:
    kw.setdefault("image_ref", f"images/{kw['id']}.png")
    return QARecord(**kw)


def toy_records() -> list[QARecord]:
    return [
        _record(
            id="num-01",
            language="en",
            qtype="numerical",
            split="train",
            subject="natural_science",
            grade_band="secondary",
            question_text=ohm_question(5, 2),
            answer_text=ohm_solution(5, 2),
            final_numeric=FinalNumeric(10.0, "V"),
        ),
        _record(
            id="num-02",
            language="hi",
            qtype="numerical",
            split="test",
            subject="natural_science",
            grade_band="secondary",
            question_text="एक 4 Ω प्रतिरोधक से 3 A धारा प्रवाहित होती है। प्रतिरोधक के सिरों पर विभवांतर क्या है?",
            answer_text="ओम के नियम से V = I × R। मान रखने पर V = 3 A × 4 Ω। अतः V = 12 V।",
            final_numeric=FinalNumeric(12.0, "V"),
        ),
        _record(
            id="thr-01",
            language="en",
            qtype="theoretical",
            split="train",
            subject="natural_science",
            grade_band="secondary",
            question_text="Explain why the bulb in the circuit glows when the switch is closed.",
            answer_text=(
                "Closing the switch completes the circuit. Current flows through the bulb filament. "
                "The filament heats up and emits light."
            ),
        ),
        _record(
            id="thr-02",
            language="hi",
            qtype="theoretical",
            split="test",
            subject="natural_science",
            grade_band="higher",
            question_text="समझाइए कि चित्र में दिखाया गया चुंबक लोहे की कील को क्यों आकर्षित करता है।",
            answer_text="चुंबक के चारों ओर चुंबकीय क्षेत्र होता है। यह क्षेत्र कील को चुंबकित कर देता है। इसलिए कील चुंबक की ओर खिंचती है।",
        ),
        _record(
            id="con-01",
            language="hi",
            qtype="conceptual",
            split="train",
            subject="natural_science",
            grade_band="secondary",
            question_text="चित्र में गेंद नीचे क्यों गिरती है?",
            answer_text="पृथ्वी गेंद पर गुरुत्वाकर्षण बल लगाती है। यह बल गेंद को नीचे की ओर खींचता है।",
        ),
        _record(
            id="con-02",
            language="en",
            qtype="conceptual",
            split="test",
            subject="natural_science",
            grade_band="higher",
            question_text="Why does the spoon in the glass of water look bent?",
            answer_text="Light changes speed when it passes from water into air. This refraction bends the light rays.",
        ),
        _record(
            id="fac-01",
            language="en",
            qtype="factual",
            split="train",
            subject="natural_science",
            grade_band="lower",
            question_text="What is the SI unit of electric current shown on the meter?",
            answer_text="ampere",
        ),
        _record(
            id="fac-02",
            language="hi",
            qtype="factual",
            split="test",
            subject="natural_science",
            grade_band="lower",
            question_text="चित्र में दिखाए गए मीटर पर प्रतिरोध का SI मात्रक क्या है?",
            answer_text="ओम",
        ),
        _record(
            id="mcq-01",
            language="hi",
            qtype="mcq",
            split="train",
            subject="natural_science",
            grade_band="lower",
            question_text="चित्र में कौन सा जानवर स्तनधारी है?",
            options=("मछली", "मेंढक", "गाय", "साँप"),
            correct_option=2,
            answer_text="गाय स्तनधारी है क्योंकि वह अपने बच्चों को दूध पिलाती है। उत्तर: (ग)",
        ),
        _record(
            id="mcq-02",
            language="en",
            qtype="mcq",
            split="test",
            subject="natural_science",
            grade_band="lower",
            question_text="Which material in the picture is a good conductor of electricity?",
            options=("wood", "copper", "glass", "rubber"),
            correct_option=1,
            answer_text="Copper is a metal with free electrons, so it conducts electricity. Answer: (b)",
        ),
    ]


CAPTIONS = {
    "num-01": "A circuit diagram with a 5 Ω resistor connected in series to a battery and an ammeter reading 2 A.",
    "num-02": "A circuit diagram with a 4 Ω resistor connected to a battery and an ammeter reading 3 A.",
    "thr-01": "A circuit with a battery, an open switch and a bulb connected by wires.",
    "thr-02": "A bar magnet with a north and south pole next to an iron nail.",
    "con-01": "A ball falling towards the ground with an arrow pointing down.",
    "con-02": "A spoon standing in a glass of water that appears bent at the water surface.",
    "fac-01": "An ammeter with the letter A on its dial.",
    "fac-02": "A multimeter set to the resistance range with the symbol Ω on its dial.",
    "mcq-01": "Four animals: a fish, a frog, a cow and a snake.",
    "mcq-02": "Four objects: a wooden stick, a copper wire, a glass rod and a rubber band.",
}

TRANSLATIONS = {
    CAPTIONS["num-02"]: "एक परिपथ आरेख जिसमें 4 Ω का प्रतिरोधक बैटरी से जुड़ा है और अमीटर 3 A दिखा रहा है।",
    CAPTIONS["thr-02"]: "उत्तर और दक्षिण ध्रुव वाला एक छड़ चुंबक जिसके पास लोहे की कील रखी है।",
    CAPTIONS["con-01"]: "एक गेंद ज़मीन की ओर गिर रही है और एक तीर नीचे की ओर इशारा कर रहा है।",
    CAPTIONS["fac-02"]: "एक मल्टीमीटर जो प्रतिरोध परास पर सेट है और जिसके डायल पर Ω का चिह्न है।",
    CAPTIONS["mcq-01"]: "चार जानवर: एक मछली, एक मेंढक, एक गाय और एक साँप।",
}

OVERRIDES = [
    {
        "record_id": "thr-01",
        "language": "en",
        "text": "A circuit with a battery, a switch that is about to be closed and a bulb connected by wires.",
    }
]


def tiny_png(rgb: tuple[int, int, int], size: int = 4) -> bytes:
    """A solid-colour RGB PNG, built with zlib and struct only."""

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + bytes(rgb) * size for _ in range(size))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0))
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def _colour(record_id: str) -> tuple[int, int, int]:
    d = hashlib.sha256(record_id.encode("utf-8")).digest()
    return d[0], d[1], d[2]


def hashed_embedding(text: str, dim: int = EMBEDDING_DIM) -> list[float]:
    """Signed bag-of-words hashing with a small constant bias so no vector is zero."""
    vec = [0.0] * dim
    vec[0] = 0.1
    for tok in tokenize(text):
        d = hashlib.sha256(tok.encode("utf-8")).digest()
        vec[d[0] % dim] += 1.0 if d[1] & 1 else -1.0
    return vec


def _template_pattern(user: str) -> re.Pattern:
    parts = []
    for literal, name, _, _ in string.Formatter().parse(user):
        parts.append(re.escape(literal))
        if name is not None:
            parts.append(f"(?P<{name}>.*?)")
    return re.compile("".join(parts), re.DOTALL)


def _numbered_items(block: str) -> list[str]:
    return [re.sub(r"^\d+\.\s*", "", line).strip() for line in block.splitlines() if line.strip()]


class ScriptedTransport:
    """Deterministic answers for every packaged chat template, plus hashed embeddings.

    Requests are matched to templates by their system text and user-text
    shape, so the transport sees exactly what a remote model would.
    """

    def __init__(self, captions_by_digest: dict[str, str], translations: dict[str, str], cr_variants: dict[str, list[dict]]):
        self.captions_by_digest = captions_by_digest
        self.translations = translations
        self.cr_variants = cr_variants
        self.patterns = []
        for name in available_templates():
            t = load_template(name)
            if t.system is not None:
                self.patterns.append((name, t.system, _template_pattern(t.user)))

    def _match(self, request: ChatRequest) -> tuple[str, dict[str, str]]:
        for name, system, pattern in self.patterns:
            if request.system_text == system:
                m = pattern.fullmatch(request.user_text)
                if m:
                    return name, m.groupdict()
        raise ValueError(f"scripted transport has no template for {request.user_text[:60]!r}")

    def chat(self, request: ChatRequest) -> str:
        name, f = self._match(request)
        if name == "caption_v1":
            return self.captions_by_digest[request.image_digest]
        if name == "translate_hi_v1":
            return self.translations.get(f["text"], f["text"])
        if name == "augment_cr_v1":
            return json.dumps(self.cr_variants.get(f["question"], [])[: int(f["n"])], ensure_ascii=False)
        if name == "augment_pa_v1":
            lang = "hi" if _DEVANAGARI.search(f["question"]) else "en"
            return json.dumps([f"{p} {f['question']}" for p in PARAPHRASE_PREFIXES[lang][: int(f["n"])]], ensure_ascii=False)
        if name in ("judge_steps_v1", "judge_concepts_v1"):
            items = list(dict.fromkeys(split_sentences(f["answer"])))
            return json.dumps(items if name == "judge_steps_v1" else items[:4], ensure_ascii=False)
        if name == "judge_step_eval_v1":
            pred = {" ".join(tokenize(s)) for s in _numbered_items(f["pred_steps"])}
            return json.dumps([" ".join(tokenize(s)) in pred for s in _numbered_items(f["truth_steps"])])
        if name == "judge_final_answer_v1":
            found = final_numeric(f["answer"])
            return json.dumps({"value": found[0] if found else None, "unit": found[1] if found else ""}, ensure_ascii=False)
        if name == "judge_mcq_v1":
            options = _numbered_options(f["options"])
            choice = parse_mcq_choice(f["answer"], options)
            return "none" if choice is None else OPTION_LETTERS[choice]
        if name == "judge_fact_check_v1":
            return "yes" if score_factual(f["answer"], f["truth"]) else "no"
        raise ValueError(f"no script for template {name!r}")

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]:
        return [hashed_embedding(t) for t in texts]


def _numbered_options(block: str) -> list[str]:
    return [re.sub(r"^\([a-d]\)\s*", "", line).strip() for line in block.splitlines() if line.strip()]


def write_corpus(root: Path) -> tuple[Path, dict[str, str]]:
    """Write corpus.jsonl, the images and overrides.jsonl; returns (corpus path, captions by digest)."""
    records = toy_records()
    by_digest = {}
    for rec in records:
        png = tiny_png(_colour(rec.id))
        path = root / rec.image_ref
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(png)
        by_digest[hashlib.sha256(png).hexdigest()] = CAPTIONS[rec.id]
    corpus = save_manifest(DatasetManifest("toy", tuple(records)), root / "corpus.jsonl")
    with (root / "overrides.jsonl").open("w", encoding="utf-8") as fh:
        for ov in OVERRIDES:
            fh.write(json.dumps(ov, ensure_ascii=False, sort_keys=True) + "\n")
    return corpus, by_digest


def scripted_gateway(captions_by_digest: dict[str, str]) -> Gateway:
    cr = {ohm_question(5, 2): ohm_variants(10)}
    transport = ScriptedTransport(captions_by_digest, TRANSLATIONS, cr)
    return Gateway(profile="record", transport=transport, embedding_dim=EMBEDDING_DIM)


def base_config(root: Path, **overrides: Any) -> PipelineConfig:
    values = dict(
        corpus=str(root / "corpus.jsonl"),
        overrides=str(root / "overrides.jsonl"),
        fixtures=str(root / "fixtures.json"),
        output=str(root / "out"),
        profile="replay",
        embedding_dim=EMBEDDING_DIM,
        model=MODEL_LABEL,
        max_in_flight=4,
    )
    values.update(overrides)
    return PipelineConfig(**values)


def build_workspace(root: str | Path) -> dict[str, Path]:
    """Create the toy workspace under ``root`` and record its replay fixtures.

    Every stage is run for every prompt mode, with and without
    augmentation, so any replayed run of the toy corpus finds its responses.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    corpus, by_digest = write_corpus(root)
    gateway = scripted_gateway(by_digest)
    with tempfile.TemporaryDirectory() as tmp:
        for augment in (False, True):
            out = Path(tmp) / ("augmented" if augment else "plain")
            pipe = Pipeline(base_config(root, output=str(out), fixtures=None, profile="record"), gateway=gateway)
            pipe.ingest()
            pipe.caption()
            pipe.translate()
            if augment:
                pipe.augment()
            for mode in MODES:
                pipe.config.mode = mode
                if mode != "zero_shot":
                    pipe.prompts()
                    pipe.train()
                pipe.infer()
                pipe.evaluate()
    fixtures = gateway.export_fixtures(root / "fixtures.json")
    config = root / "config.json"
    config.write_text(
        json.dumps(
            {
                "corpus": "corpus.jsonl",
                "overrides": "overrides.jsonl",
                "fixtures": "fixtures.json",
                "output": "out",
                "profile": "replay",
                "embedding_dim": EMBEDDING_DIM,
                "model": MODEL_LABEL,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return {"corpus": corpus, "fixtures": fixtures, "config": config, "overrides": root / "overrides.jsonl"}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m vcasft.toy", description="Write the toy workspace and its fixtures.")
    parser.add_argument("directory", type=Path)
    parser.add_argument("--clean", action="store_true", help="remove the directory first")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.clean and args.directory.exists():
        shutil.rmtree(args.directory)
    paths = build_workspace(args.directory)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
