import json
import math
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcasft.gateway import (
    ChatRequest,
    EmbeddingVector,
    Gateway,
    GatewayError,
    ReplayMiss,
    RetriesExhausted,
    RetryPolicy,
    TransportError,
    chat_cache_key,
    cosine,
    load_fixtures,
)

from conftest import fixture_gateway


class CountingTransport:
    def __init__(self, fail_times=0, reply="pong"):
        self.fail_times = fail_times
        self.reply = reply
        self.chat_calls = 0
        self.embed_calls = 0
        self.lock = threading.Lock()

    def chat(self, request):
        with self.lock:
            self.chat_calls += 1
            if self.chat_calls <= self.fail_times:
                raise TransportError("503")
        return f"{self.reply}:{request.user_text}"

    def embed(self, model_id, texts):
        self.embed_calls += 1
        return [[float(len(t)), 1.0] for t in texts]


def test_fixture_echo_by_user_text():
    gw = fixture_gateway(chat={"ping": "pong"})
    resp = gw.complete(ChatRequest(model_id="m", user_text="ping"))
    assert resp.text == "pong"
    assert resp.cached is False


def test_replay_miss_on_unseen_request():
    gw = fixture_gateway(chat={"ping": "pong"})
    with pytest.raises(ReplayMiss):
        gw.complete(ChatRequest(model_id="m", user_text="something else"))


def test_second_identical_request_is_cached():
    gw = fixture_gateway(chat={"ping": "pong"})
    req = ChatRequest(model_id="m", user_text="ping")
    first = gw.complete(req)
    second = gw.complete(req)
    assert second.cached is True
    assert second.text.encode() == first.text.encode()


def test_record_persists_and_replay_serves_identical_bytes(tmp_path):
    transport = CountingTransport(reply="réponse ऊर्जा")
    rec = Gateway(profile="record", cache_dir=tmp_path, transport=transport)
    req = ChatRequest(model_id="m", user_text="q", system_text="s")
    original = rec.complete(req).text
    files = list(tmp_path.rglob("*.json"))
    assert len(files) == 1 and files[0].stem == chat_cache_key(req)

    replay = Gateway(profile="replay", cache_dir=tmp_path)
    resp = replay.complete(req)
    assert resp.cached is True
    assert resp.text.encode("utf-8") == original.encode("utf-8")


def test_replay_does_not_write_cache(tmp_path):
    gw = Gateway(profile="replay", cache_dir=tmp_path, fixtures={"chat": {"ping": "pong"}, "embeddings": {}})
    gw.complete(ChatRequest(model_id="m", user_text="ping"))
    assert not list(tmp_path.rglob("*.json"))


def test_live_keeps_cache_in_memory(tmp_path):
    transport = CountingTransport()
    gw = Gateway(profile="live", cache_dir=tmp_path, transport=transport)
    req = ChatRequest(model_id="m", user_text="x")
    gw.complete(req)
    gw.complete(req)
    assert transport.chat_calls == 1
    assert not list(tmp_path.rglob("*.json"))


def test_cache_key_depends_on_image_digest():
    a = ChatRequest(model_id="m", user_text="caption", image=b"one", media_type="image/png")
    b = ChatRequest(model_id="m", user_text="caption", image=b"two", media_type="image/png")
    assert chat_cache_key(a) != chat_cache_key(b)
    assert chat_cache_key(a) == chat_cache_key(ChatRequest(model_id="m", user_text="caption", image=b"one", media_type="image/png"))


def test_fixture_lookup_by_image_digest():
    req = ChatRequest(model_id="m", user_text="caption", image=b"pixels", media_type="image/png")
    gw = fixture_gateway(chat={req.image_digest: "A series circuit"})
    assert gw.complete(req).text == "A series circuit"


@pytest.mark.parametrize("max_retries", [0, 1, 3, 5])
def test_retry_count_bounded(max_retries):
    transport = CountingTransport(fail_times=100)
    sleeps = []
    gw = Gateway(profile="live", transport=transport, retry=RetryPolicy(max_retries, 0.5, 4.0), sleep=sleeps.append)
    with pytest.raises(RetriesExhausted) as err:
        gw.complete(ChatRequest(model_id="m", user_text="x"))
    assert transport.chat_calls == max_retries + 1
    assert err.value.attempts == max_retries + 1
    assert len(sleeps) == max_retries
    assert sleeps == sorted(sleeps)
    assert all(s <= 4.0 for s in sleeps)


def test_retry_recovers():
    transport = CountingTransport(fail_times=2)
    gw = Gateway(profile="live", transport=transport, retry=RetryPolicy(3, 0.1, 1.0), sleep=lambda s: None)
    assert gw.complete(ChatRequest(model_id="m", user_text="x")).text == "pong:x"
    assert transport.chat_calls == 3


@given(st.integers(0, 12), st.floats(0.01, 5), st.floats(0.01, 60))
def test_backoff_nondecreasing_and_capped(n, base, cap):
    delays = RetryPolicy(n, base, cap).delays()
    assert len(delays) == n
    assert all(a <= b for a, b in zip(delays, delays[1:]))
    assert all(d <= cap for d in delays)


def test_non_transient_errors_not_retried():
    class Broken:
        calls = 0

        def chat(self, request):
            Broken.calls += 1
            raise GatewayError("HTTP 401")

    gw = Gateway(profile="live", transport=Broken(), sleep=lambda s: None)
    with pytest.raises(GatewayError):
        gw.complete(ChatRequest(model_id="m", user_text="x"))
    assert Broken.calls == 1


def test_complete_many_preserves_order_and_bounds_parallelism():
    active = 0
    peak = 0
    lock = threading.Lock()

    class Slow:
        def chat(self, request):
            nonlocal active, peak
            with lock:
                active += 1
                peak = max(peak, active)
            time.sleep(0.01)
            with lock:
                active -= 1
            return request.user_text.upper()

    gw = Gateway(profile="live", transport=Slow(), max_in_flight=3)
    texts = [f"t{i}" for i in range(12)]
    out = gw.complete_many([ChatRequest(model_id="m", user_text=t) for t in texts])
    assert [r.text for r in out] == [t.upper() for t in texts]
    assert peak <= 3


# -- requests ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"user_text": ""},
        {"user_text": "   "},
        {"user_text": "x", "temperature": -0.1},
        {"user_text": "x", "max_tokens": 0},
        {"user_text": "x", "image": b"img"},
    ],
)
def test_request_validation(kwargs):
    with pytest.raises(ValueError):
        ChatRequest(model_id="m", **kwargs)


# -- embeddings --------------------------------------------------------------


def test_embed_identical_texts():
    gw = fixture_gateway(embeddings={"a": [1.0, 2.0]})
    va, vb = gw.embed(["a", "a"])
    assert va == vb


def test_embed_empty_list_rejected():
    with pytest.raises(ValueError):
        fixture_gateway().embed([])


def test_embed_blank_text_rejected():
    with pytest.raises(ValueError):
        fixture_gateway(embeddings={"a": [1.0]}).embed(["a", "  "])


def test_orthogonal_fixture_vectors():
    gw = fixture_gateway(embeddings={"x": [1, 0, 0, 0], "y": [0, 1, 0, 0]}, embedding_dim=4)
    a, b = gw.embed(["x", "y"])
    assert cosine(a, b) == 0.0


def test_embedding_dimension_enforced():
    gw = fixture_gateway(embeddings={"x": [1, 0, 0]}, embedding_dim=4)
    with pytest.raises(GatewayError, match="dimension"):
        gw.embed(["x"])


def test_embedding_replay_miss():
    with pytest.raises(ReplayMiss):
        fixture_gateway(embeddings={"x": [1.0]}).embed(["y"])


def test_embedding_cached_per_text():
    transport = CountingTransport()
    gw = Gateway(profile="live", transport=transport)
    gw.embed(["ab", "c"])
    gw.embed(["c", "ab"])
    assert transport.embed_calls == 1


def test_embedding_vector_must_be_finite():
    with pytest.raises(ValueError):
        EmbeddingVector((1.0, math.inf), "m")


# -- cosine ------------------------------------------------------------------


def test_cosine_examples():
    assert cosine([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)
    assert abs(cosine([1, 1], [1, 0]) - 0.7071) < 1e-4


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine([1, 0], [1, 0, 0])


_vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-3
)


@settings(max_examples=300)
@given(_vec, _vec)
def test_cosine_symmetry_and_bounds(a, b):
    assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-12)
    assert -1.0 <= cosine(a, b) <= 1.0
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)


# -- fixtures files ----------------------------------------------------------


def test_export_then_load_fixtures(tmp_path):
    gw = Gateway(profile="live", transport=CountingTransport())
    gw.complete(ChatRequest(model_id="m", user_text="q"))
    gw.embed(["hello"])
    path = gw.export_fixtures(tmp_path / "fx.json")
    fixtures = load_fixtures(path)
    replay = Gateway(profile="replay", fixtures=fixtures)
    assert replay.complete(ChatRequest(model_id="m", user_text="q")).text == "pong:q"
    assert replay.embed(["hello"])[0].values == (5.0, 1.0)


def test_plain_map_fixture_file(tmp_path):
    path = tmp_path / "fx.json"
    path.write_text(json.dumps({"ping": "pong"}), encoding="utf-8")
    assert load_fixtures(path) == {"chat": {"ping": "pong"}, "embeddings": {}}


def test_live_without_credentials(monkeypatch):
    monkeypatch.delenv("VCASFT_API_KEY", raising=False)
    with pytest.raises(GatewayError, match="VCASFT_API_KEY"):
        Gateway.from_settings(profile="live")
