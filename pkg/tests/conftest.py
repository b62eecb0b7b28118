from __future__ import annotations

import json
from pathlib import Path

import pytest

from vcasft.corpus import DatasetManifest, FinalNumeric, QARecord
from vcasft.gateway import Gateway
from vcasft.toy import build_workspace


def make_record(**kw) -> QARecord:
    """A valid record; keyword arguments override the defaults."""
    qtype = kw.get("qtype", "factual")
    base = dict(
        id="r1",
        language="en",
        qtype=qtype,
        question_text="What is the SI unit of resistance?",
        answer_text="ohm",
        image_ref="images/r1.png",
        split="train",
    )
    if qtype == "mcq":
        base.update(options=("a1", "a2", "a3", "a4"), correct_option=0)
    if qtype == "numerical":
        base.update(final_numeric=FinalNumeric(10.0, "V"))
    base.update(kw)
    return QARecord(**base)


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def fixture_gateway(chat=None, embeddings=None, **kw) -> Gateway:
    return Gateway(profile="replay", fixtures={"chat": chat or {}, "embeddings": embeddings or {}}, **kw)


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory) -> dict[str, Path]:
    """The toy corpus plus recorded fixtures, built once per session."""
    return build_workspace(tmp_path_factory.mktemp("toy"))


@pytest.fixture
def small_manifest() -> DatasetManifest:
    return DatasetManifest(
        "small",
        (
            make_record(id="a", split="train"),
            make_record(id="b", split="train", qtype="mcq"),
            make_record(id="c", split="test", qtype="numerical"),
        ),
    )


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    _, outcomes = _ACCEPTANCE.setdefault(number, (title, []))
    outcomes.append("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcomes = _ACCEPTANCE[number]
        verdict = "PASS" if outcomes and all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number}: {title}")
