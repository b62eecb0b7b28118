"""Stage runner behind the command line.

Every stage reads the artifacts of earlier stages from the output root and
writes its own under stable names. A stage stamp records the configuration
and content hashes of inputs and outputs; re-running a stage whose inputs and
outputs are unchanged does nothing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable

from . import __version__
from .augmentation import (
    DEFAULT_AUGMENT_MODEL,
    DEFAULT_MAX_COSINE,
    MAX_CANDIDATES,
    apply_review,
    augment_record,
    inject_candidates,
    mean_diversity,
    write_candidates,
)
from .captioning import (
    DEFAULT_CAPTION_MODEL,
    DEFAULT_TRANSLATION_MODEL,
    apply_overrides,
    caption_corpus,
    check_translation_links,
    lint_captions,
    read_captions,
    translate_corpus,
    write_captions,
)
from .corpus import DatasetManifest, dataset_stats, load_manifest, resolve_image, save_manifest, split_dataset
from .gateway import Gateway, RetryPolicy
from .metrics.judge import DEFAULT_JUDGE_MODEL, Judge
from .metrics.report import SCORE_FIELDS, TEXT_FIELDS, MetricReport, evaluate_run
from .prompting import CAPTION_MODES, MODES, build_training_set, read_bundles, write_bundles
from .training import (
    FineTuneConfig,
    RunManifest,
    get_backend,
    read_predictions,
    run_inference,
    run_training,
    write_predictions,
)
from . import reporting

logger = logging.getLogger(__name__)

STAGES = ("ingest", "caption", "translate", "augment", "prompts", "train", "infer", "evaluate", "report")
_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_PATH_FIELDS = ("corpus", "assets", "overrides", "fixtures", "cache", "output", "review")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage could not complete; the message is the user-facing diagnostic."""


@dataclass
class PipelineConfig:
    """Everything a pipeline run depends on. Paths are resolved at load time."""

    output: str = "out"
    corpus: str | None = None
    assets: str | None = None
    overrides: str | None = None
    fixtures: str | None = None
    cache: str | None = None
    review: str | None = None
    profile: str = "replay"
    mode: str = "vcasft"
    language: str | None = None
    judge_profile: str = "llm"
    model: str = "model"
    template: str = "v1"
    seed: int = 0
    train_fraction: float | None = None
    rel_tol: float = 0.02
    caption_model: str = DEFAULT_CAPTION_MODEL
    translation_model: str = DEFAULT_TRANSLATION_MODEL
    judge_model: str = DEFAULT_JUDGE_MODEL
    augment_model: str = DEFAULT_AUGMENT_MODEL
    embedding_model: str = "sbert"
    embedding_dim: int | None = None
    max_in_flight: int = 4
    max_retries: int = 3
    finetune: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.language not in (None, "en", "hi"):
            raise ConfigError(f"language must be en or hi, got {self.language!r}")
        if self.judge_profile not in ("llm", "local"):
            raise ConfigError(f"judge_profile must be llm or local, got {self.judge_profile!r}")
        if not 0.02 <= self.rel_tol <= 0.03:
            raise ConfigError(f"rel_tol must lie in [0.02, 0.03], got {self.rel_tol}")
        unknown = set(self.augmentation) - {"methods", "n", "max_cosine"}
        if unknown:
            raise ConfigError(f"unknown augmentation settings {sorted(unknown)}")
        self.finetune_config()

    def finetune_config(self) -> FineTuneConfig:
        try:
            return FineTuneConfig.from_dict({"seed": self.seed, **self.finetune})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"finetune: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def interpolate_env(value: Any, environ: dict[str, str] | None = None) -> Any:
    """Replace ``${VAR}`` references in every string of a JSON value."""
    env = os.environ if environ is None else environ
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            if m.group(1) not in env:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return env[m.group(1)]

        return _ENV_REF.sub(sub, value)
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    return value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Read a JSON config file and apply flag overrides (``None`` values are ignored).

    Relative paths in the file are taken relative to the file's directory.
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = interpolate_env(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for key in _PATH_FIELDS:
            if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
                data[key] = str((path.parent / data[key]).resolve())
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return PipelineConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def file_digest(path: Path) -> str | None:
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    """Runs stages against one output root.

    A gateway or training backend may be injected; otherwise they are built
    from the config on first use.
    """

    def __init__(self, config: PipelineConfig, gateway: Gateway | None = None, backend=None, force: bool = False):
        self.config = config
        self.root = Path(config.output)
        self._gateway = gateway
        self._backend = backend
        self.force = force

    # -- artifact paths --------------------------------------------------

    @property
    def corpus_path(self) -> Path:
        return self.root / "corpus.jsonl"

    @property
    def augmented_path(self) -> Path:
        return self.root / "corpus.augmented.jsonl"

    @property
    def captions_path(self) -> Path:
        return self.root / "captions.jsonl"

    @property
    def translations_path(self) -> Path:
        return self.root / "translations.jsonl"

    @property
    def candidates_path(self) -> Path:
        return self.root / "candidates.jsonl"

    def bundles_path(self, mode: str | None = None) -> Path:
        return self.root / "bundles" / f"{mode or self.config.mode}.train.jsonl"

    def run_dir(self, mode: str | None = None) -> Path:
        return self.root / "runs" / (mode or self.config.mode)

    def predictions_path(self, mode: str | None = None) -> Path:
        return self.root / "predictions" / f"{mode or self.config.mode}.jsonl"

    def report_path(self, mode: str | None = None) -> Path:
        return self.root / "reports" / f"{mode or self.config.mode}.json"

    def stamp_path(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"

    # -- shared resources ------------------------------------------------

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            cfg = self.config
            self._gateway = Gateway.from_settings(
                profile=cfg.profile,
                cache_dir=cfg.cache or self.root / "cache",
                fixtures_path=cfg.fixtures,
                embedding_model=cfg.embedding_model,
                embedding_dim=cfg.embedding_dim,
                retry=RetryPolicy(max_retries=cfg.max_retries),
                max_in_flight=cfg.max_in_flight,
            )
        return self._gateway

    @property
    def backend(self):
        if self._backend is None:
            ft = self.config.finetune_config()
            self._backend = get_backend(ft.backend_id, **self.config.backend)
        return self._backend

    @property
    def assets_root(self) -> Path:
        if self.config.assets:
            return Path(self.config.assets)
        if self.config.corpus:
            return Path(self.config.corpus).parent
        raise StageError("no assets root: set assets or corpus")

    def _originals(self) -> DatasetManifest:
        if not self.corpus_path.is_file():
            raise StageError(f"{self.corpus_path} not found; run `ingest` first")
        return load_manifest(self.corpus_path)

    def manifest(self) -> DatasetManifest:
        """The working corpus: the augmented one when it exists."""
        path = self.augmented_path if self.augmented_path.is_file() else self.corpus_path
        if not path.is_file():
            raise StageError(f"{path} not found; run `ingest` first")
        return load_manifest(path)

    def captions(self, manifest: DatasetManifest | None = None) -> list:
        """Generated plus translated captions, with augmented records inheriting their parent's.

        Each stage owns one caption file, so rerunning a later stage never
        invalidates an earlier one.
        """
        captions = read_captions(self.captions_path)
        if self.translations_path.is_file():
            captions += read_captions(self.translations_path)
        if manifest is None and self.augmented_path.is_file():
            manifest = load_manifest(self.augmented_path)
        if manifest is not None:
            # children share the parent's image, so they share its captions
            by_parent: dict[str, list] = {}
            for cap in captions:
                by_parent.setdefault(cap.record_id, []).append(cap)
            captions += [
                replace(cap, record_id=rec.id)
                for rec in manifest.records
                if rec.is_augmented
                for cap in by_parent.get(rec.parent_id, [])
            ]
        return captions

    # -- stage guard -----------------------------------------------------

    def _guarded(
        self,
        stage: str,
        params: dict[str, Any],
        inputs: Iterable[Path],
        outputs: Callable[[], list[Path]],
        body: Callable[[], dict[str, Any] | None],
    ) -> dict[str, Any]:
        inputs = sorted({Path(p) for p in inputs if p is not None})
        input_hashes = {str(p): file_digest(p) for p in inputs}
        stamp_path = self.stamp_path(stage)
        if not self.force and stamp_path.is_file():
            stamp = json.loads(stamp_path.read_text(encoding="utf-8"))
            unchanged = stamp.get("params") == params and stamp.get("inputs") == input_hashes
            outputs_ok = all(file_digest(Path(p)) == h for p, h in stamp.get("outputs", {}).items())
            if unchanged and outputs_ok and stamp.get("outputs"):
                logger.info("%s: inputs unchanged, skipping", stage)
                return {"stage": stage, "skipped": True, **stamp.get("summary", {})}
        summary = body() or {}
        stamp = {
            "stage": stage,
            "version": __version__,
            "config": self.config.to_dict(),
            "params": params,
            "inputs": input_hashes,
            "outputs": {str(p): file_digest(p) for p in sorted(outputs())},
            "summary": summary,
        }
        stamp_path.parent.mkdir(parents=True, exist_ok=True)
        stamp_path.write_text(json.dumps(stamp, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return {"stage": stage, "skipped": False, **summary}

    def _gateway_inputs(self) -> list[Path]:
        return [Path(self.config.fixtures)] if self.config.fixtures else []

    # -- stages ----------------------------------------------------------

    def ingest(self) -> dict[str, Any]:
        cfg = self.config
        if not cfg.corpus:
            raise StageError("ingest needs a corpus path")
        corpus = Path(cfg.corpus)
        params = {"language": cfg.language, "train_fraction": cfg.train_fraction, "seed": cfg.seed}
        stats_path = self.root / "stats.csv"

        def body():
            manifest = load_manifest(corpus)
            if cfg.language:
                manifest = DatasetManifest(manifest.name, tuple(r for r in manifest.records if r.language == cfg.language))
            if cfg.train_fraction is not None:
                manifest = split_dataset(manifest, cfg.train_fraction, cfg.seed)
            unsplit = [r.id for r in manifest.records if r.split is None]
            if unsplit:
                raise StageError(f"{len(unsplit)} record(s) have no split, e.g. {unsplit[:3]}; pass --train-fraction")
            missing = []
            for rec in manifest.records:
                try:
                    resolve_image(rec, self.assets_root)
                except FileNotFoundError:
                    missing.append(rec.id)
            if missing:
                raise StageError(f"images missing for {len(missing)} record(s), e.g. {missing[:3]}")
            save_manifest(manifest, self.corpus_path)
            # a fresh corpus invalidates any earlier augmentation
            self.augmented_path.unlink(missing_ok=True)
            with stats_path.open("w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["dimension", "value", "count"])
                w.writerows(dataset_stats(manifest))
            return {"records": len(manifest.records), **manifest.split_counts}

        return self._guarded("ingest", params, [corpus], lambda: [self.corpus_path, stats_path], body)

    def caption(self) -> dict[str, Any]:
        cfg = self.config
        params = {"model": cfg.caption_model, "overrides": cfg.overrides}
        inputs = [self.corpus_path, *self._gateway_inputs()] + ([Path(cfg.overrides)] if cfg.overrides else [])

        def body():
            manifest = self._originals()
            generated = caption_corpus(manifest, self.gateway, self.assets_root, model_id=cfg.caption_model)
            captions = list(generated)
            if cfg.overrides:
                captions = apply_overrides(captions, cfg.overrides, known_ids=[r.id for r in manifest.records])
            write_captions(self.captions_path, captions)
            return {"generated": len(generated)}

        return self._guarded("caption", params, inputs, lambda: [self.captions_path], body)

    def translate(self) -> dict[str, Any]:
        cfg = self.config
        params = {"model": cfg.translation_model, "overrides": cfg.overrides}
        inputs = [self.corpus_path, self.captions_path, *self._gateway_inputs()]

        def body():
            manifest = self._originals()
            existing = read_captions(self.captions_path) if self.captions_path.is_file() else []
            if not existing:
                raise StageError(f"{self.captions_path} is empty; run `caption` first")
            translated = translate_corpus(manifest, existing, self.gateway, model_id=cfg.translation_model)
            broken = check_translation_links(existing + translated)
            if broken:
                raise StageError(f"translated captions without an English source: {broken}")
            write_captions(self.translations_path, translated)
            return {"translated": len(translated)}

        return self._guarded("translate", params, inputs, lambda: [self.translations_path], body)

    def augment(self) -> dict[str, Any]:
        cfg = self.config
        aug = cfg.augmentation
        methods = tuple(aug.get("methods", ("CR", "Pa")))
        n = int(aug.get("n", MAX_CANDIDATES))
        max_cosine = float(aug.get("max_cosine", DEFAULT_MAX_COSINE))
        params = {"methods": list(methods), "n": n, "max_cosine": max_cosine, "model": cfg.augment_model, "review": cfg.review}
        inputs = [self.corpus_path, *self._gateway_inputs()] + ([Path(cfg.review)] if cfg.review else [])

        def body():
            if not self.corpus_path.is_file():
                raise StageError(f"{self.corpus_path} not found; run `ingest` first")
            manifest = load_manifest(self.corpus_path)
            parents = [r for r in manifest.in_split("train") if not r.is_augmented]
            candidates = []
            for parent in sorted(parents, key=lambda r: r.id):
                candidates.extend(
                    augment_record(parent, methods, self.gateway, n=n, max_cosine=max_cosine, model_id=cfg.augment_model)
                )
            if cfg.review:
                candidates = apply_review(candidates, cfg.review, parents={p.id: p for p in parents})
            write_candidates(self.candidates_path, candidates)
            augmented = inject_candidates(manifest, candidates)
            save_manifest(augmented, self.augmented_path)
            accepted = sum(c.accepted for c in candidates)
            return {
                "candidates": len(candidates),
                "accepted": accepted,
                "needs_review": sum(bool(c.violations) for c in candidates),
                "mean_diversity": mean_diversity(candidates),
                "train_records": augmented.split_counts["train"],
            }

        return self._guarded(
            "augment", params, inputs, lambda: [self.candidates_path, self.augmented_path], body
        )

    def _working_corpus_inputs(self) -> list[Path]:
        return [self.corpus_path, self.augmented_path, self.captions_path, self.translations_path]

    def prompts(self) -> dict[str, Any]:
        cfg = self.config
        mode = cfg.mode
        if mode == "zero_shot":
            raise StageError("zero_shot runs have no training prompts")
        out = self.bundles_path(mode)
        params = {"mode": mode, "template": cfg.template}

        def body():
            manifest = self.manifest()
            captions = self.captions()
            if mode in CAPTION_MODES:
                missing = lint_captions(manifest, captions)
                if missing:
                    raise StageError(f"caption lint failed: no effective caption for {missing}")
            bundles, errors = build_training_set(manifest, captions, mode, cfg.template)
            if errors:
                raise StageError("prompt errors: " + "; ".join(f"{k}: {v}" for k, v in sorted(errors.items())))
            write_bundles(out, bundles)
            return {"bundles": len(bundles)}

        return self._guarded("prompts." + mode, params, self._working_corpus_inputs(), lambda: [out], body)

    def train(self) -> dict[str, Any]:
        cfg = self.config
        mode = cfg.mode
        if mode == "zero_shot":
            raise StageError("zero_shot runs use the base model; nothing to train")
        bundles_path = self.bundles_path(mode)
        manifest_path = self.run_dir(mode) / "run_manifest.json"
        ft = cfg.finetune_config()
        params = {"mode": mode, "finetune": ft.to_dict(), "backend": cfg.backend}

        def body():
            if not bundles_path.is_file():
                raise StageError(f"{bundles_path} not found; run `prompts` first")
            run = run_training(read_bundles(bundles_path), ft, self.run_dir(mode), backend=self.backend)
            return {"run_id": run.run_id, "epochs": run.epochs, "checkpoint": run.checkpoint}

        return self._guarded("train." + mode, params, [bundles_path], lambda: [manifest_path], body)

    def infer(self) -> dict[str, Any]:
        cfg = self.config
        mode = cfg.mode
        out = self.predictions_path(mode)
        failures_path = out.with_suffix(".failures.json")
        manifest_path = self.run_dir(mode) / "run_manifest.json"
        params = {"mode": mode, "template": cfg.template, "backend": cfg.backend}
        inputs = self._working_corpus_inputs() + ([] if mode == "zero_shot" else [manifest_path])

        def body():
            checkpoint = None
            if mode != "zero_shot":
                if not manifest_path.is_file():
                    raise StageError(f"{manifest_path} not found; run `train` first")
                checkpoint = RunManifest.load(manifest_path).checkpoint
            preds, failures = run_inference(
                self.manifest(), self.captions(), mode, self.backend, checkpoint, self.assets_root, cfg.template
            )
            write_predictions(out, preds)
            failures_path.write_text(json.dumps(failures, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            return {"predictions": len(preds), "failures": len(failures)}

        return self._guarded("infer." + mode, params, inputs, lambda: [out, failures_path], body)

    def evaluate(self) -> dict[str, Any]:
        cfg = self.config
        mode = cfg.mode
        preds_path = self.predictions_path(mode)
        out = self.report_path(mode)
        rows_csv = out.with_suffix(".rows.csv")
        params = {"mode": mode, "judge": cfg.judge_profile, "judge_model": cfg.judge_model, "rel_tol": cfg.rel_tol, "model": cfg.model}
        inputs = self._working_corpus_inputs() + [preds_path, *self._gateway_inputs()]

        def body():
            if not preds_path.is_file():
                raise StageError(f"{preds_path} not found; run `infer` first")
            judge = Judge(self.gateway, cfg.judge_profile, cfg.judge_model)
            report = evaluate_run(
                read_predictions(preds_path),
                self.manifest(),
                self.captions(),
                judge,
                rel_tol=cfg.rel_tol,
                model=cfg.model,
                max_workers=cfg.max_in_flight,
            )
            report.save(out)
            write_rows_csv(report, rows_csv)
            return {"records": len(report.rows), "overall": report.aggregates["overall"]["score"]}

        return self._guarded("evaluate." + mode, params, inputs, lambda: [out, rows_csv], body)

    def report(
        self,
        runs: dict[tuple[str, str], Path] | None = None,
        qtype_rows: Iterable[Path] = (),
        scienceqa: Iterable[Path] = (),
        baseline: str = "sft",
    ) -> dict[str, Any]:
        """Render tables and figures from evaluated runs and/or external result rows.

        Without explicit ``runs`` every report under ``reports/`` is used,
        labelled with the configured model name and the report's mode.
        """
        if runs is None:
            runs = {}
            for path in sorted((self.root / "reports").glob("*.json")):
                report = MetricReport.load(path)
                runs[(report.metadata.get("model") or self.config.model, report.metadata["mode"])] = path
        reports = {key: MetricReport.load(path) for key, path in runs.items()}
        rows = reporting.qtype_rows_from_reports(reports)
        for path in qtype_rows:
            rows.extend(reporting.read_qtype_csv(path))
        sqa_rows = reporting.scienceqa_rows_from_reports(reports)
        for path in scienceqa:
            sqa_rows.extend(reporting.scienceqa_rows(reporting.read_correctness_csv(path)))
        if not rows and not sqa_rows:
            raise StageError("nothing to report: no evaluated runs and no result rows given")

        out = self.root / "report"
        written = []
        if rows:
            rows = reporting.sort_rows(rows)
            written.append(reporting.write_qtype_csv(rows, out / "qtype_scores.csv"))
            written.append(_write_text(out / "qtype_scores.md", reporting.qtype_markdown(rows)))
            comparison = reporting.comparison_rows(rows, baseline)
            written.append(reporting.write_comparison_csv(comparison, out / "comparison.csv"))
            written.append(_write_text(out / "comparison.md", reporting.comparison_markdown(comparison)))
            written.append(reporting.plot_qtype_comparison(rows, out / "qtype_comparison.png"))
        if sqa_rows:
            written.append(reporting.write_scienceqa_csv(sqa_rows, out / "scienceqa.csv"))
            written.append(_write_text(out / "scienceqa.md", reporting.scienceqa_markdown(sqa_rows)))
            written.append(reporting.plot_scienceqa(sqa_rows, out / "scienceqa.png"))
        return {"stage": "report", "skipped": False, "files": [str(p) for p in written]}

    def run(self, stage: str, **kwargs: Any) -> dict[str, Any]:
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        return getattr(self, stage)(**kwargs)


def write_rows_csv(report: MetricReport, path: str | Path) -> Path:
    """Per-record scores, one row per test record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["record_id", "qtype", "language", "subject", "grade_band", *SCORE_FIELDS, *TEXT_FIELDS, "flags"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in report.rows:
            data = asdict(row)
            data["flags"] = ";".join(row.flags)
            w.writerow(["" if data[c] is None else (f"{data[c]:.6f}" if isinstance(data[c], float) else data[c]) for c in cols])
    return path


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
