"""Fine-tuning and inference orchestration over pluggable VLM backends.

The toolkit never runs a deep-learning runtime itself. Real models sit
behind :class:`SubprocessBackend`, which hands bundle JSONL to an external
command; :class:`ToyBackend` is a deterministic stand-in for tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import shlex
import subprocess
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .captioning import Caption
from .corpus import DatasetManifest, resolve_image
from .prompting import MODES, PromptBundle, build_prompts, write_bundles

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class InferenceError(RuntimeError):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        super().__init__(f"inference failed for all {len(failures)} record(s)")


@dataclass
class FineTuneConfig:
    """Hyperparameters handed to the backend; defaults are the reference LoRA setup."""

    method: str = "lora"
    lora_rank: int = 64
    lora_alpha: int = 128
    batch_size: int = 8
    epochs: int = 3
    learning_rate: float = 2e-5
    optimizer_name: str = "adam"
    backend_id: str = "toy-echo"
    seed: int = 0

    def __post_init__(self):
        if self.lora_rank <= 0:
            raise ValueError("lora_rank must be > 0")
        if self.lora_alpha <= 0:
            raise ValueError("lora_alpha must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FineTuneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Capabilities:
    supports_images: bool = True
    max_context: int = 4096


@dataclass
class TrainResult:
    checkpoint: str
    loss_trace: list[float]


class TrainableBackend(ABC):
    """A vision-language model that can be fine-tuned on bundles and queried.

    Image encoding happens entirely inside the backend.
    """

    backend_id: str = "abstract"
    capabilities: Capabilities = Capabilities()
    # some model families converge in a single epoch
    epochs_override: int | None = None

    @abstractmethod
    def train(self, bundles: Sequence[PromptBundle], config: FineTuneConfig, workdir: Path) -> TrainResult: ...

    @abstractmethod
    def predict(self, bundle: PromptBundle, image: bytes | None, checkpoint: str | None) -> str: ...

    def predict_many(
        self,
        items: Sequence[tuple[PromptBundle, bytes | None]],
        checkpoint: str | None,
    ) -> list[str | Exception]:
        out: list[str | Exception] = []
        for bundle, image in items:
            try:
                out.append(self.predict(bundle, image, checkpoint))
            except Exception as exc:  # per-record failures are collected by the caller
                out.append(exc)
        return out


class ToyBackend(TrainableBackend):
    """Memorizes (prompt, target) pairs; answers seen prompts and echoes the rest."""

    def __init__(self, backend_id: str = "toy-echo", epochs_override: int | None = None):
        self.backend_id = backend_id
        self.epochs_override = epochs_override
        self.capabilities = Capabilities(supports_images=True, max_context=1 << 16)
        self.calls: list[tuple[str, bool]] = []

    def train(self, bundles, config, workdir):
        memory = {b.rendered_text: b.target_answer for b in bundles}
        rng = random.Random(config.seed)
        epochs = self.epochs_override or config.epochs
        trace = []
        loss = 2.0
        for _ in range(epochs):
            loss = loss * 0.5 + rng.random() * 0.01
            trace.append(round(loss, 6))
        workdir.mkdir(parents=True, exist_ok=True)
        path = workdir / "toy_checkpoint.json"
        path.write_text(json.dumps(memory, ensure_ascii=False, sort_keys=True), encoding="utf-8")
        return TrainResult(checkpoint=str(path), loss_trace=trace)

    def _memory(self, checkpoint: str | None) -> dict[str, str]:
        if checkpoint is None:
            return {}
        return json.loads(Path(checkpoint).read_text(encoding="utf-8"))

    def predict(self, bundle, image, checkpoint):
        self.calls.append((bundle.record_id, image is not None and bundle.includes_image))
        return self._memory(checkpoint).get(bundle.rendered_text, bundle.rendered_text)


class SubprocessBackend(TrainableBackend):
    """Adapter for an external trainer driven over a file-based contract.

    Training runs ``<train_command> --bundles B --config C --output DIR`` and
    expects the last stdout line to be JSON ``{"checkpoint": str,
    "loss_trace": [float, ...]}``. Inference runs ``<infer_command>
    --bundles B --checkpoint K --output P`` and reads predictions JSONL
    ``{"record_id", "text"}`` from ``P``. Bundle lines carry ``image_path``
    when an image is attached.
    """

    def __init__(
        self,
        train_command: str | Sequence[str],
        infer_command: str | Sequence[str],
        backend_id: str = "subprocess",
        workdir: str | Path | None = None,
        epochs_override: int | None = None,
        capabilities: Capabilities | None = None,
    ):
        self.train_command = shlex.split(train_command) if isinstance(train_command, str) else list(train_command)
        self.infer_command = shlex.split(infer_command) if isinstance(infer_command, str) else list(infer_command)
        self.backend_id = backend_id
        self.workdir = Path(workdir) if workdir else None
        self.epochs_override = epochs_override
        self.capabilities = capabilities or Capabilities()

    def _run(self, cmd: list[str]) -> str:
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise TrainingError(f"{cmd[0]} exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
        return proc.stdout

    def train(self, bundles, config, workdir):
        workdir.mkdir(parents=True, exist_ok=True)
        bundle_path = write_bundles(workdir / "train_bundles.jsonl", bundles)
        config_path = workdir / "finetune_config.json"
        cfg = config.to_dict()
        if self.epochs_override:
            cfg["epochs"] = self.epochs_override
        config_path.write_text(json.dumps(cfg, sort_keys=True), encoding="utf-8")
        out = self._run(
            self.train_command
            + ["--bundles", str(bundle_path), "--config", str(config_path), "--output", str(workdir)]
        )
        lines = [ln for ln in out.splitlines() if ln.strip()]
        if not lines:
            raise TrainingError("trainer printed no result line")
        result = json.loads(lines[-1])
        return TrainResult(checkpoint=str(result["checkpoint"]), loss_trace=[float(x) for x in result.get("loss_trace", [])])

    def predict(self, bundle, image, checkpoint):
        result = self.predict_many([(bundle, image)], checkpoint)[0]
        if isinstance(result, Exception):
            raise result
        return result

    def predict_many(self, items, checkpoint):
        workdir = self.workdir or Path.cwd() / ".vcasft-infer"
        workdir.mkdir(parents=True, exist_ok=True)
        bundle_path = workdir / "infer_bundles.jsonl"
        with bundle_path.open("w", encoding="utf-8") as fh:
            for i, (bundle, image) in enumerate(items):
                row = bundle.to_dict()
                if image is not None and bundle.includes_image:
                    img_path = workdir / f"image_{i:05d}.bin"
                    img_path.write_bytes(image)
                    row["image_path"] = str(img_path)
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        out_path = workdir / "infer_predictions.jsonl"
        cmd = self.infer_command + ["--bundles", str(bundle_path), "--output", str(out_path)]
        if checkpoint is not None:
            cmd += ["--checkpoint", checkpoint]
        try:
            self._run(cmd)
        except TrainingError as exc:
            return [exc for _ in items]
        with out_path.open(encoding="utf-8") as fh:
            answers = {row["record_id"]: row["text"] for row in map(json.loads, filter(str.strip, fh))}
        return [
            answers.get(b.record_id, TrainingError(f"no prediction for {b.record_id!r}")) for b, _ in items
        ]


def get_backend(backend_id: str, **options) -> TrainableBackend:
    if backend_id == "toy-echo":
        return ToyBackend(backend_id)
    if backend_id == "toy-echo-1epoch":
        return ToyBackend(backend_id, epochs_override=1)
    if backend_id == "subprocess":
        return SubprocessBackend(
            options["train_command"],
            options["infer_command"],
            workdir=options.get("workdir"),
            epochs_override=options.get("epochs_override"),
        )
    raise TrainingError(f"unknown backend {backend_id!r}")


@dataclass
class RunManifest:
    run_id: str
    config: dict
    dataset_fingerprint: str
    prompt_mode: str
    backend_id: str
    epochs: int
    n_bundles: int
    started_at: str
    finished_at: str
    checkpoint: str
    loss_trace: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def fingerprint(bundles: Iterable[PromptBundle], config: FineTuneConfig | None = None) -> str:
    h = hashlib.sha256()
    for b in bundles:
        h.update(json.dumps(b.to_dict(), ensure_ascii=False, sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    if config is not None:
        h.update(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def run_training(
    bundles: Sequence[PromptBundle],
    config: FineTuneConfig,
    output_dir: str | Path,
    backend: TrainableBackend | None = None,
    clock: Callable[[], str] = _utcnow,
) -> RunManifest:
    """Train ``backend`` on ``bundles`` and persist a run manifest under ``output_dir``."""
    bundles = list(bundles)
    if not bundles:
        raise TrainingError("no training bundles")
    missing = [b.record_id for b in bundles if b.target_answer is None]
    if missing:
        raise TrainingError(f"bundles without target_answer: {missing[:5]}")
    modes = {b.mode for b in bundles}
    if len(modes) != 1:
        raise TrainingError(f"bundles mix prompt modes {sorted(modes)}")
    backend = backend or get_backend(config.backend_id)
    output_dir = Path(output_dir)
    started = clock()
    fp = fingerprint(bundles, config)
    result = backend.train(bundles, config, output_dir / "checkpoint")
    manifest = RunManifest(
        run_id=f"{fp[:12]}-{started.replace(':', '').replace('-', '')}",
        config=config.to_dict(),
        dataset_fingerprint=fp,
        prompt_mode=modes.pop(),
        backend_id=backend.backend_id,
        epochs=backend.epochs_override or config.epochs,
        n_bundles=len(bundles),
        started_at=started,
        finished_at=clock(),
        checkpoint=result.checkpoint,
        loss_trace=list(result.loss_trace),
    )
    manifest.save(output_dir / "run_manifest.json")
    logger.info("run %s: %d bundles, %d epoch(s)", manifest.run_id, len(bundles), manifest.epochs)
    return manifest


@dataclass(frozen=True)
class Prediction:
    record_id: str
    mode: str
    text: str


def run_inference(
    manifest: DatasetManifest,
    captions: Iterable[Caption],
    mode: str,
    backend: TrainableBackend,
    checkpoint: str | None = None,
    assets_root: str | Path | None = None,
    template_id: str = "v1",
) -> tuple[list[Prediction], dict[str, str]]:
    """Predict every test record; returns ``(predictions, failures)``.

    Zero-shot runs use the base model (``checkpoint=None``); all other modes
    need a checkpoint. Raises only if every record fails.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if checkpoint is None and mode != "zero_shot":
        raise TrainingError(f"mode {mode!r} needs a fine-tuned checkpoint")
    test = manifest.in_split("test")
    if not test:
        raise TrainingError("test split is empty")
    bundles, failures = build_prompts(test, captions, mode, template_id)
    by_id = manifest.by_id()
    items = []
    for b in bundles:
        image = None
        if b.includes_image and assets_root is not None:
            try:
                image = resolve_image(by_id[b.record_id], assets_root).read_bytes()
            except FileNotFoundError as exc:
                failures[b.record_id] = str(exc)
                continue
        items.append((b, image))
    results = backend.predict_many(items, checkpoint)
    predictions = []
    for (bundle, _), result in zip(items, results):
        if isinstance(result, Exception):
            failures[bundle.record_id] = str(result)
        else:
            predictions.append(Prediction(bundle.record_id, mode, result))
    if not predictions:
        raise InferenceError(failures)
    for rid, msg in sorted(failures.items()):
        logger.warning("no prediction for %s: %s", rid, msg)
    return predictions, failures


def write_predictions(path: str | Path, predictions: Iterable[Prediction]) -> Path:
    predictions = list(predictions)
    modes = {p.mode for p in predictions}
    if len(modes) > 1:
        raise ValueError(f"refusing to mix prompt modes {sorted(modes)} in one file")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(asdict(p), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    with Path(path).open(encoding="utf-8") as fh:
        preds = [Prediction(**json.loads(line)) for line in fh if line.strip()]
    modes = {p.mode for p in preds}
    if len(modes) > 1:
        raise ValueError(f"{path} mixes prompt modes {sorted(modes)}")
    return preds
