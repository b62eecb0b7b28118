"""Chat-completion and embedding client with caching, retries and replay fixtures.

Three profiles are supported:

* ``live``: calls the remote service; responses are cached in memory only.
* ``record``: calls the remote service and persists every response to the
  on-disk cache so a later ``replay`` run can reproduce it.
* ``replay``: never touches the network; responses come from the on-disk
  cache or a fixtures file, and anything else raises :class:`ReplayMiss`.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

logger = logging.getLogger(__name__)

PROFILES = ("live", "record", "replay")


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """A single remote call failed; may be retried."""


class RetriesExhausted(GatewayError):
    def __init__(self, attempts: int, last: Exception):
        self.attempts = attempts
        self.last = last
        super().__init__(f"giving up after {attempts} attempt(s): {last}")


class ReplayMiss(GatewayError):
    """A request had no recorded response while in replay mode.

    In practice this means the pipeline issued a request that differs from
    the recorded session, i.e. something upstream is nondeterministic.
    """

    def __init__(self, key: str, what: str):
        self.key = key
        super().__init__(f"replay miss for {what} (key {key[:16]}...)")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    user_text: str
    system_text: str | None = None
    image: bytes | None = None
    media_type: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.user_text or not self.user_text.strip():
            raise ValueError("user_text must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.image is not None and not self.media_type:
            raise ValueError("media_type is required with an image payload")

    @property
    def image_digest(self) -> str | None:
        return sha256_hex(self.image) if self.image is not None else None


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_id: str
    cached: bool = False


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError("embedding must be non-empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding entries must be finite")

    def __len__(self) -> int:
        return len(self.values)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def chat_cache_key(request: ChatRequest) -> str:
    return sha256_hex(
        _canonical(
            {
                "kind": "chat",
                "model_id": request.model_id,
                "system_text": request.system_text,
                "user_text": request.user_text,
                "image_digest": request.image_digest,
                "temperature": request.temperature,
            }
        )
    )


def embedding_cache_key(model_id: str, text: str) -> str:
    return sha256_hex(_canonical({"kind": "embedding", "model_id": model_id, "text": text}))


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding."""
    va = a.values if isinstance(a, EmbeddingVector) else tuple(a)
    vb = b.values if isinstance(b, EmbeddingVector) else tuple(b)
    if len(va) != len(vb):
        raise ValueError(f"length mismatch: {len(va)} != {len(vb)}")
    na = math.sqrt(math.fsum(x * x for x in va))
    nb = math.sqrt(math.fsum(x * x for x in vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero-norm vector")
    dot = math.fsum(x * y for x, y in zip(va, vb))
    return max(-1.0, min(1.0, dot / (na * nb)))


class Transport(Protocol):
    def chat(self, request: ChatRequest) -> str: ...

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]: ...


class OpenAICompatibleTransport:
    """HTTP transport for services that speak the OpenAI chat/embeddings API.

    Credentials come from ``VCASFT_API_KEY`` and the endpoint from
    ``VCASFT_API_BASE`` unless passed explicitly.
    """

    def __init__(self, api_key: str | None = None, base_url: str | None = None, timeout: float = 120.0):
        import httpx

        self.api_key = api_key or os.environ.get("VCASFT_API_KEY")
        if not self.api_key:
            raise GatewayError("no credentials: set VCASFT_API_KEY")
        self.base_url = (base_url or os.environ.get("VCASFT_API_BASE", "https://api.openai.com/v1")).rstrip("/")
        self._client = httpx.Client(timeout=timeout, headers={"Authorization": f"Bearer {self.api_key}"})
        self._httpx = httpx

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(f"{self.base_url}{path}", json=payload)
        except self._httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def chat(self, request: ChatRequest) -> str:
        content: Any = request.user_text
        if request.image is not None:
            b64 = base64.b64encode(request.image).decode("ascii")
            content = [
                {"type": "text", "text": request.user_text},
                {"type": "image_url", "image_url": {"url": f"data:{request.media_type};base64,{b64}"}},
            ]
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": content})
        data = self._post(
            "/chat/completions",
            {
                "model": request.model_id,
                "messages": messages,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            },
        )
        text = data["choices"][0]["message"].get("content")
        if text is None:
            raise TransportError("response carried no text")
        return text

    def embed(self, model_id: str, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model_id, "input": texts})
        rows = sorted(data["data"], key=lambda d: d["index"])
        return [row["embedding"] for row in rows]


@dataclass
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 1.0
    max_delay: float = 30.0

    def delays(self) -> list[float]:
        """Backoff delays before each retry; nondecreasing, capped at ``max_delay``."""
        return [min(self.base_delay * 2**i, self.max_delay) for i in range(self.max_retries)]


def load_fixtures(path: str | Path) -> dict[str, Any]:
    """Read a fixtures file: ``{"chat": {key: text}, "embeddings": {key: [floats]}}``.

    A plain ``{key: text}`` map is accepted as chat-only fixtures.
    """
    with Path(path).open(encoding="utf-8") as fh:
        data = json.load(fh)
    if "chat" not in data and "embeddings" not in data:
        data = {"chat": data}
    return {"chat": dict(data.get("chat", {})), "embeddings": dict(data.get("embeddings", {}))}


@dataclass
class Gateway:
    """Uniform access point for every external model call in the pipeline.

    Chat fixtures are looked up by full cache key first, then by image
    digest (for image requests), then by the exact user text. Embedding
    fixtures are looked up by cache key, then by the text itself.
    """

    profile: str = "replay"
    cache_dir: Path | None = None
    fixtures: dict[str, Any] = field(default_factory=lambda: {"chat": {}, "embeddings": {}})
    transport: Transport | None = None
    embedding_model: str = "sbert"
    embedding_dim: int | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    max_in_flight: int = 4
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
        self._memory: dict[str, Any] = {}
        self._lock = threading.Lock()
        self.calls = 0
        self.attempts = 0

    @classmethod
    def from_settings(
        cls,
        profile: str = "replay",
        cache_dir: str | Path | None = None,
        fixtures_path: str | Path | None = None,
        **kwargs: Any,
    ) -> "Gateway":
        fixtures = load_fixtures(fixtures_path) if fixtures_path else {"chat": {}, "embeddings": {}}
        if profile != "replay" and kwargs.get("transport") is None:
            kwargs["transport"] = OpenAICompatibleTransport()
        return cls(profile=profile, cache_dir=cache_dir, fixtures=fixtures, **kwargs)

    # -- cache -----------------------------------------------------------

    def _cache_path(self, key: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _cache_get(self, key: str) -> Any:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.cache_dir is not None:
            path = self._cache_path(key)
            if path.is_file():
                value = json.loads(path.read_text(encoding="utf-8"))["response"]
                with self._lock:
                    self._memory[key] = value
                return value
        return None

    def _cache_put(self, key: str, value: Any, meta: dict[str, Any]) -> None:
        with self._lock:
            self._memory[key] = value
        if self.profile != "record" or self.cache_dir is None:
            return
        path = self._cache_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = _canonical({"key": key, "meta": meta, "response": value})
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)

    def cached_entries(self) -> dict[str, Any]:
        with self._lock:
            return dict(self._memory)

    def export_fixtures(self, path: str | Path) -> Path:
        """Write every response seen so far as a replay fixtures file."""
        chat, embeddings = {}, {}
        for key, value in sorted(self.cached_entries().items()):
            (embeddings if isinstance(value, list) else chat)[key] = value
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps({"chat": chat, "embeddings": embeddings}, ensure_ascii=False, sort_keys=True, indent=1),
            encoding="utf-8",
        )
        return path

    # -- remote calls ----------------------------------------------------

    def _with_retries(self, fn: Callable[[], Any]) -> Any:
        delays = self.retry.delays()
        last: Exception | None = None
        for attempt in range(len(delays) + 1):
            if attempt:
                self.sleep(delays[attempt - 1])
            self.attempts += 1
            try:
                return fn()
            except TransportError as exc:
                last = exc
                logger.warning("transport failure (attempt %d): %s", attempt + 1, exc)
        assert last is not None
        raise RetriesExhausted(len(delays) + 1, last)

    def _require_transport(self) -> Transport:
        if self.transport is None:
            raise GatewayError(f"profile {self.profile!r} needs a transport")
        return self.transport

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = chat_cache_key(request)
        hit = self._cache_get(key)
        if hit is not None:
            return ChatResponse(text=hit, model_id=request.model_id, cached=True)
        if self.profile == "replay":
            text = self._chat_fixture(key, request)
        else:
            transport = self._require_transport()
            text = self._with_retries(lambda: transport.chat(request))
            self.calls += 1
        self._cache_put(
            key,
            text,
            {"kind": "chat", "model_id": request.model_id, "image_digest": request.image_digest},
        )
        return ChatResponse(text=text, model_id=request.model_id, cached=False)

    def _chat_fixture(self, key: str, request: ChatRequest) -> str:
        table = self.fixtures.get("chat", {})
        for candidate in (key, request.image_digest, request.user_text):
            if candidate is not None and candidate in table:
                return table[candidate]
        raise ReplayMiss(key, f"chat request to {request.model_id}")

    def complete_many(self, requests: Iterable[ChatRequest]) -> list[ChatResponse]:
        """Run requests with at most ``max_in_flight`` in parallel, preserving order."""
        requests = list(requests)
        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            return list(pool.map(self.complete, requests))

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts:
            raise ValueError("embed() needs at least one text")
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValueError("embed() texts must be non-empty strings")
        keys = [embedding_cache_key(self.embedding_model, t) for t in texts]
        found: dict[str, list[float]] = {}
        missing: list[tuple[str, str]] = []
        for key, text in zip(keys, texts):
            hit = self._cache_get(key)
            if hit is not None:
                found[key] = hit
            elif key not in dict(missing):
                missing.append((key, text))
        if missing:
            if self.profile == "replay":
                table = self.fixtures.get("embeddings", {})
                fetched = []
                for key, text in missing:
                    value = table.get(key, table.get(text))
                    if value is None:
                        raise ReplayMiss(key, f"embedding of {text[:40]!r}")
                    fetched.append(value)
            else:
                transport = self._require_transport()
                batch = [t for _, t in missing]
                fetched = self._with_retries(lambda: transport.embed(self.embedding_model, batch))
                self.calls += 1
            for (key, _), value in zip(missing, fetched):
                value = [float(v) for v in value]
                self._cache_put(key, value, {"kind": "embedding", "model_id": self.embedding_model})
                found[key] = value
        vectors = [EmbeddingVector(tuple(found[k]), self.embedding_model) for k in keys]
        if self.embedding_dim is not None:
            for v in vectors:
                if len(v) != self.embedding_dim:
                    raise GatewayError(f"embedding has dimension {len(v)}, expected {self.embedding_dim}")
        return vectors
