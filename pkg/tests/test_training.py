import json
import sys
import textwrap

import pytest

from vcasft.captioning import Caption
from vcasft.corpus import DatasetManifest
from vcasft.prompting import build_prompt, build_training_set
from vcasft.training import (
    FineTuneConfig,
    InferenceError,
    Prediction,
    RunManifest,
    SubprocessBackend,
    ToyBackend,
    TrainingError,
    get_backend,
    read_predictions,
    run_inference,
    run_training,
    write_predictions,
)

from conftest import make_record


def test_default_config_is_reference_setup():
    cfg = FineTuneConfig()
    assert (cfg.method, cfg.lora_rank, cfg.lora_alpha, cfg.batch_size, cfg.epochs) == ("lora", 64, 128, 8, 3)
    assert cfg.learning_rate == 2e-5
    assert cfg.optimizer_name == "adam"


def test_config_round_trip_and_unknown_keys():
    cfg = FineTuneConfig(lora_rank=16, epochs=1)
    assert FineTuneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="dropout"):
        FineTuneConfig.from_dict({"dropout": 0.1})


@pytest.mark.parametrize("kw", [{"lora_rank": 0}, {"epochs": 0}, {"learning_rate": 0}, {"batch_size": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FineTuneConfig(**kw)


def _manifest():
    recs = [make_record(id=f"tr{i}", question_text=f"train question {i}", answer_text=f"ans {i}") for i in range(4)]
    recs += [make_record(id=f"te{i}", split="test", question_text=f"test question {i}") for i in range(3)]
    return DatasetManifest("m", tuple(recs))


def _captions(manifest):
    return [Caption(r.id, r.language, f"caption {r.id}", "generated") for r in manifest]


def test_empty_bundles_refused(tmp_path):
    with pytest.raises(TrainingError, match="no training bundles"):
        run_training([], FineTuneConfig(), tmp_path)


def test_mixed_modes_refused(tmp_path):
    m = _manifest()
    sft, _ = build_training_set(m, [], "sft")
    vca, _ = build_training_set(m, _captions(m), "vcasft")
    with pytest.raises(TrainingError, match="mix"):
        run_training(sft[:2] + vca[:2], FineTuneConfig(), tmp_path)


def test_training_records_manifest_and_is_deterministic(tmp_path):
    m = _manifest()
    bundles, _ = build_training_set(m, _captions(m), "vcasft")
    clock = iter(["2026-01-01T00:00:00Z", "2026-01-01T00:00:01Z"] * 2).__next__
    a = run_training(bundles, FineTuneConfig(), tmp_path / "a", ToyBackend(), clock=clock)
    b = run_training(bundles, FineTuneConfig(), tmp_path / "b", ToyBackend(), clock=clock)
    assert a.epochs == 3 and len(a.loss_trace) == 3
    assert a.loss_trace == b.loss_trace
    assert a.dataset_fingerprint == b.dataset_fingerprint
    assert a.prompt_mode == "vcasft" and a.n_bundles == 4
    assert RunManifest.load(tmp_path / "a" / "run_manifest.json") == a


def test_epochs_override_recorded(tmp_path):
    m = _manifest()
    bundles, _ = build_training_set(m, [], "sft")
    run = run_training(bundles, FineTuneConfig(), tmp_path, get_backend("toy-echo-1epoch"))
    assert run.epochs == 1 and len(run.loss_trace) == 1


def test_fingerprint_changes_with_data(tmp_path):
    m = _manifest()
    bundles, _ = build_training_set(m, [], "sft")
    a = run_training(bundles, FineTuneConfig(), tmp_path / "a", ToyBackend())
    b = run_training(bundles[:-1], FineTuneConfig(), tmp_path / "b", ToyBackend())
    assert a.dataset_fingerprint != b.dataset_fingerprint


def test_echo_predictions_equal_rendered_prompts():
    m = _manifest()
    caps = _captions(m)
    backend = ToyBackend()
    preds, failures = run_inference(m, caps, "zero_shot", backend)
    assert not failures
    by_id = m.by_id()
    for p in preds:
        assert p.text == build_prompt(by_id[p.record_id], None, "zero_shot").rendered_text


def test_trained_toy_answers_seen_prompts(tmp_path):
    train = make_record(id="a", question_text="seen")
    test = make_record(id="b", split="test", question_text="seen", answer_text="x")
    m = DatasetManifest("m", (train, test))
    bundles, _ = build_training_set(m, [], "sft")
    run = run_training(bundles, FineTuneConfig(), tmp_path, ToyBackend())
    preds, _ = run_inference(m, [], "sft", ToyBackend(), run.checkpoint)
    assert preds[0].text == train.answer_text


def test_non_zero_shot_needs_checkpoint():
    with pytest.raises(TrainingError):
        run_inference(_manifest(), [], "sft", ToyBackend())


def test_ablation_sends_no_image(tmp_path):
    m = DatasetManifest(
        "m", tuple(make_record(id=f"te{i}", split="test", image_ref="x.png") for i in range(2))
    )
    (tmp_path / "x.png").write_bytes(b"png")
    caps = _captions(m)
    ckpt = tmp_path / "ck.json"
    ckpt.write_text("{}", encoding="utf-8")

    backend = ToyBackend()
    run_inference(m, caps, "ablation_no_image", backend, str(ckpt), tmp_path)
    assert backend.calls and not any(with_image for _, with_image in backend.calls)

    backend = ToyBackend()
    run_inference(m, caps, "vcasft", backend, str(ckpt), tmp_path)
    assert all(with_image for _, with_image in backend.calls)


def test_partial_failures_collected(tmp_path):
    m = _manifest()
    caps = [c for c in _captions(m) if c.record_id != "te1"]
    ckpt = tmp_path / "ck.json"
    ckpt.write_text("{}", encoding="utf-8")
    preds, failures = run_inference(m, caps, "ablation_no_image", ToyBackend(), str(ckpt))
    assert set(failures) == {"te1"}
    assert [p.record_id for p in preds] == ["te0", "te2"]


def test_all_failures_raise():
    m = _manifest()
    with pytest.raises(InferenceError):
        run_inference(m, [], "vcasft", ToyBackend(), "ck")


def test_predictions_file_single_mode(tmp_path):
    preds = [Prediction("a", "sft", "x"), Prediction("b", "sft", "ऊर्जा")]
    assert read_predictions(write_predictions(tmp_path / "p.jsonl", preds)) == preds
    with pytest.raises(ValueError):
        write_predictions(tmp_path / "q.jsonl", preds + [Prediction("c", "vcasft", "y")])


def test_unknown_backend():
    with pytest.raises(TrainingError):
        get_backend("gpu-magic")


def test_subprocess_backend_contract(tmp_path):
    script = tmp_path / "fake_trainer.py"
    script.write_text(
        textwrap.dedent(
            """
            import argparse, json, pathlib
            p = argparse.ArgumentParser()
            p.add_argument("mode")
            p.add_argument("--bundles"); p.add_argument("--config"); p.add_argument("--output")
            p.add_argument("--checkpoint")
            a = p.parse_args()
            rows = [json.loads(l) for l in open(a.bundles, encoding="utf-8") if l.strip()]
            if a.mode == "train":
                cfg = json.load(open(a.config))
                print(json.dumps({"checkpoint": a.output + "/ck", "loss_trace": [1.0] * cfg["epochs"]}))
            else:
                with open(a.output, "w", encoding="utf-8") as fh:
                    for r in rows:
                        fh.write(json.dumps({"record_id": r["record_id"], "text": "img" if "image_path" in r else "noimg"}) + "\\n")
            """
        ),
        encoding="utf-8",
    )
    backend = SubprocessBackend(
        [sys.executable, str(script), "train"], [sys.executable, str(script), "infer"], workdir=tmp_path / "w"
    )
    m = _manifest()
    bundles, _ = build_training_set(m, [], "sft")
    run = run_training(bundles, FineTuneConfig(epochs=2), tmp_path / "run", backend)
    assert run.loss_trace == [1.0, 1.0]
    test = DatasetManifest("t", tuple(make_record(id=f"te{i}", split="test", image_ref="x.png") for i in range(2)))
    (tmp_path / "x.png").write_bytes(b"png")
    preds, failures = run_inference(test, [], "sft", backend, run.checkpoint, tmp_path)
    assert not failures and [p.text for p in preds] == ["img", "img"]


def test_subprocess_failure_is_training_error(tmp_path):
    backend = SubprocessBackend([sys.executable, "-c", "import sys; sys.exit(3)"], ["true"])
    bundles, _ = build_training_set(_manifest(), [], "sft")
    with pytest.raises(TrainingError, match="exited 3"):
        run_training(bundles, FineTuneConfig(), tmp_path, backend)
