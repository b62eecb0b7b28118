import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcasft.corpus import (
    DatasetManifest,
    ManifestError,
    QARecord,
    RecordError,
    dataset_stats,
    load_manifest,
    resolve_image,
    save_manifest,
    split_dataset,
    train_size,
    validate_record,
)

from conftest import make_record, write_jsonl


def _row(i, **kw):
    row = {
        "id": f"q{i}",
        "language": "en",
        "qtype": "factual",
        "question_text": f"question {i}",
        "answer_text": "answer",
        "image_ref": f"img/{i}.png",
        "split": "train",
    }
    row.update(kw)
    return row


def test_three_line_file_parses(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [_row(i) for i in range(3)])
    manifest = load_manifest(path)
    assert len(manifest) == 3
    assert [r.id for r in manifest] == ["q0", "q1", "q2"]


def test_mcq_without_options_names_the_field(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [_row(0), _row(1, qtype="mcq", correct_option=1)])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    issues = err.value.issues
    assert any(i.field == "options" and i.line == 2 for i in issues)
    assert "options" in str(err.value)


def test_duplicate_ids_reported(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [_row(0), _row(0)])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_all_invalid_lines_collected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(
        json.dumps(_row(0)) + "\n{not json\n" + json.dumps(_row(2, language="fr")) + "\n",
        encoding="utf-8",
    )
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert {i.line for i in err.value.issues} == {2, 3}


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_manifest("/nonexistent/corpus.jsonl")


def test_split_counts_367_213(tmp_path):
    rows = [_row(i, split="train" if i < 367 else "test") for i in range(580)]
    manifest = load_manifest(write_jsonl(tmp_path / "c.jsonl", rows))
    assert manifest.split_counts == {"train": 367, "test": 213}


def test_nfc_applied_on_load(tmp_path):
    decomposed = "क़"  # KA + NUKTA, composes to U+0958
    path = write_jsonl(tmp_path / "c.jsonl", [_row(0, question_text=decomposed, language="hi")])
    rec = load_manifest(path).records[0]
    assert rec.question_text == "क़"


def test_round_trip(tmp_path):
    records = (
        make_record(id="a", qtype="mcq", subject="natural_science", grade_band="lower", topic="circuits"),
        make_record(id="b", qtype="numerical", language="hi", question_text="प्रश्न", answer_text="उत्तर"),
        make_record(id="c", provenance="augmented", parent_id="a", augmentation_method="Pa"),
    )
    manifest = DatasetManifest("rt", records, 1)
    path = save_manifest(manifest, tmp_path / "m.jsonl")
    assert load_manifest(path) == manifest


def test_augmented_parent_must_be_train_original(tmp_path):
    rows = [
        _row(0, split="test"),
        _row(1, provenance="augmented", parent_id="q0", augmentation_method="Pa"),
        _row(2, provenance="augmented", parent_id="missing", augmentation_method="CR"),
    ]
    with pytest.raises(ManifestError) as err:
        load_manifest(write_jsonl(tmp_path / "c.jsonl", rows))
    reasons = " ".join(i.reason for i in err.value.issues)
    assert "not in the train split" in reasons
    assert "unknown parent" in reasons


def test_augmented_record_cannot_be_test():
    problems = validate_record(_row(1, provenance="augmented", parent_id="q0", augmentation_method="Pa", split="test"))
    assert ("split", "augmented records must be in train") in problems


# -- split -------------------------------------------------------------------


def _unsplit(n):
    return DatasetManifest("u", tuple(make_record(id=f"r{i:04d}", split=None) for i in range(n)))


def test_split_580_at_6327():
    out = split_dataset(_unsplit(580), 0.6327, seed=7)
    assert out.split_counts == {"train": 367, "test": 213}
    assert train_size(580, 0.6327) == 367


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_fraction(fraction):
    with pytest.raises(ValueError):
        split_dataset(_unsplit(10), fraction, seed=0)


def test_split_deterministic():
    a = split_dataset(_unsplit(50), 0.6, seed=3)
    b = split_dataset(_unsplit(50), 0.6, seed=3)
    assert a == b
    c = split_dataset(_unsplit(50), 0.6, seed=4)
    assert [r.split for r in a] != [r.split for r in c]


def test_split_keeps_augmented_in_train():
    records = [make_record(id=f"r{i}", split=None) for i in range(10)]
    records.append(make_record(id="aug", provenance="augmented", parent_id="r3", augmentation_method="Pa"))
    out = split_dataset(DatasetManifest("m", tuple(records)), 0.3, seed=1)
    by_id = out.by_id()
    assert by_id["aug"].split == "train"
    assert by_id["r3"].split == "train"
    assert sum(r.split == "train" for r in out if not r.is_augmented) == 3


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), fraction=st.floats(0.01, 0.99), seed=st.integers(0, 2**31))
def test_split_is_partition(n, fraction, seed):
    manifest = _unsplit(n)
    out = split_dataset(manifest, fraction, seed)
    train = {r.id for r in out if r.split == "train"}
    test = {r.id for r in out if r.split == "test"}
    assert train | test == {r.id for r in manifest}
    assert not train & test
    assert len(train) == math.floor(n * fraction + 0.5)


# -- stats -------------------------------------------------------------------


def test_stats_empty_manifest_all_zero():
    rows = dataset_stats(DatasetManifest("e"))
    assert rows and all(count == 0 for _, _, count in rows)


def test_stats_counts():
    recs = [make_record(id=f"m{i}", qtype="mcq") for i in range(3)] + [
        make_record(id=f"f{i}", qtype="factual", split="test") for i in range(2)
    ]
    rows = {(d, v): c for d, v, c in dataset_stats(DatasetManifest("s", tuple(recs)))}
    assert rows[("qtype", "mcq")] == 3
    assert rows[("qtype", "factual")] == 2
    assert rows[("qtype_split", "factual/test")] == 2
    assert rows[("total", "all")] == 5
    assert sum(c for (d, _), c in rows.items() if d == "qtype") == 5


def test_stats_train_total_2043():
    recs = tuple(make_record(id=f"r{i}") for i in range(2043))
    rows = {(d, v): c for d, v, c in dataset_stats(DatasetManifest("s", recs))}
    assert rows[("split", "train")] == 2043


def test_resolve_image(tmp_path):
    rec = make_record(image_ref="img/x.png")
    with pytest.raises(FileNotFoundError):
        resolve_image(rec, tmp_path)
    (tmp_path / "img").mkdir()
    (tmp_path / "img" / "x.png").write_bytes(b"png")
    assert resolve_image(rec, tmp_path) == tmp_path / "img" / "x.png"


# -- validation property -----------------------------------------------------

_TEXT = st.text(min_size=0, max_size=5)


@st.composite
def record_dicts(draw):
    obj = {
        "id": draw(st.one_of(st.just("x"), st.just(""), st.none())),
        "language": draw(st.sampled_from(["en", "hi", "fr"])),
        "qtype": draw(st.sampled_from(["numerical", "theoretical", "conceptual", "factual", "mcq", "essay"])),
        "question_text": draw(st.one_of(st.just("Q?"), st.just("  "))),
        "answer_text": "A",
        "image_ref": draw(st.one_of(st.just("i.png"), st.just(""))),
        "split": draw(st.sampled_from(["train", "test", None])),
    }
    if draw(st.booleans()):
        obj["options"] = draw(st.one_of(st.lists(st.sampled_from(["o1", "o2", ""]), min_size=3, max_size=5)))
    if draw(st.booleans()):
        obj["correct_option"] = draw(st.integers(-1, 4))
    if draw(st.booleans()):
        obj["final_numeric"] = {"value": draw(st.one_of(st.floats(allow_nan=True), st.integers(-5, 5))), "unit": "V"}
    if draw(st.booleans()):
        obj["provenance"] = draw(st.sampled_from(["original", "augmented"]))
    if draw(st.booleans()):
        obj["parent_id"] = "p"
    if draw(st.booleans()):
        obj["augmentation_method"] = draw(st.sampled_from(["CR", "Pa"]))
    return {k: v for k, v in obj.items() if v is not None}


def _oracle_valid(o):
    """Independent statement of the record invariants."""
    if not o.get("id") or not o.get("image_ref") or not o.get("question_text", "").strip():
        return False
    if o["language"] not in ("en", "hi"):
        return False
    if o["qtype"] not in ("numerical", "theoretical", "conceptual", "factual", "mcq"):
        return False
    is_mcq = o["qtype"] == "mcq"
    if is_mcq != ("options" in o) or is_mcq != ("correct_option" in o):
        return False
    if "options" in o and (len(o["options"]) != 4 or not all(o["options"])):
        return False
    if "correct_option" in o and not 0 <= o["correct_option"] <= 3:
        return False
    if (o["qtype"] == "numerical") != ("final_numeric" in o):
        return False
    if "final_numeric" in o and not math.isfinite(o["final_numeric"]["value"]):
        return False
    augmented = o.get("provenance") == "augmented"
    if augmented:
        if "parent_id" not in o or "augmentation_method" not in o or o.get("split") == "test":
            return False
    elif "parent_id" in o or "augmentation_method" in o:
        return False
    return True


@settings(max_examples=500, deadline=None)
@given(record_dicts())
def test_validation_matches_oracle(obj):
    assert (validate_record(obj) == []) == _oracle_valid(obj)
    if _oracle_valid(obj):
        QARecord.from_dict(obj)
    else:
        with pytest.raises(RecordError):
            QARecord.from_dict(obj)
