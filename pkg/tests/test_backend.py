import json
import threading
import time

import httpx
import pytest

from massrag.backend import (
    NO_SCRIPT,
    CacheError,
    CachingBackend,
    ChatRequest,
    ChatResponse,
    EmptyOutputError,
    EndpointError,
    HttpBackend,
    MockBackend,
    MockScriptError,
    TransportError,
    cache_key,
    mock_script_load,
    prompt_digest,
)
from massrag.core import DecodeParams


def req(user="Who?", **kw):
    return ChatRequest(system_prompt=kw.pop("system", "sys"), user_prompt=user, **kw)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


class TestCacheKey:
    def test_identical_inputs_same_key(self):
        assert cache_key(req()) == cache_key(req())

    def test_temperature_changes_key(self):
        a = req(decode=DecodeParams(temperature=0.0))
        b = req(decode=DecodeParams(temperature=0.7))
        assert cache_key(a) != cache_key(b)

    @pytest.mark.parametrize(
        "change",
        [
            {"user": "Where?"},
            {"system": "other"},
            {"model_name": "m2"},
            {"decode": DecodeParams(top_p=0.9)},
            {"decode": DecodeParams(max_tokens=7)},
        ],
    )
    def test_any_field_changes_key(self, change):
        assert cache_key(req(**change)) != cache_key(req())

    def test_routing_tags_do_not_change_key(self):
        assert cache_key(req(role="summarizer", query_id="q1")) == cache_key(req())


class TestMock:
    def test_prompt_digest_lookup(self, tmp_path):
        r = req("What is the capital of France?")
        path = write_lines(tmp_path / "s.jsonl", [{"prompt_digest": prompt_digest(r), "response": "Paris"}])
        assert mock_script_load(path).complete(r).text == "Paris"

    def test_role_query_lookup(self, tmp_path):
        path = write_lines(tmp_path / "s.jsonl", [{"role": "summarizer", "query_id": "q1", "response": "Sum1"}])
        mock = mock_script_load(path)
        assert mock.complete(req(role="summarizer", query_id="q1")).text == "Sum1"
        assert mock.complete(req(role="summarizer", query_id="q2")).text == NO_SCRIPT
        assert mock.calls == [("summarizer", "q1", ""), ("summarizer", "q2", "")]

    def test_view_specific_entry_wins(self, tmp_path):
        path = write_lines(
            tmp_path / "s.jsonl",
            [
                {"role": "answer", "query_id": "q1", "response": "generic"},
                {"role": "answer", "query_id": "q1", "view": "summary", "response": "from summary"},
            ],
        )
        mock = mock_script_load(path)
        assert mock.complete(req(role="answer", query_id="q1", view="summary")).text == "from summary"
        assert mock.complete(req(role="answer", query_id="q1", view="reasoning")).text == "generic"

    def test_unscripted_returns_sentinel(self):
        assert MockBackend().complete(req()).text == "NO-SCRIPT"

    def test_duplicate_key_is_parse_error_with_line(self, tmp_path):
        path = write_lines(
            tmp_path / "s.jsonl",
            [
                {"role": "summarizer", "query_id": "q1", "response": "a"},
                {"role": "summarizer", "query_id": "q1", "response": "b"},
            ],
        )
        with pytest.raises(MockScriptError, match=":2:") as info:
            mock_script_load(path)
        assert info.value.line == 2

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text('{"role": "a", "query_id": "q", "response": "x"}\n\n{broken\n')
        with pytest.raises(MockScriptError) as info:
            mock_script_load(path)
        assert info.value.line == 3

    def test_missing_response_field(self, tmp_path):
        path = write_lines(tmp_path / "s.jsonl", [{"role": "a", "query_id": "q"}])
        with pytest.raises(MockScriptError, match="response"):
            mock_script_load(path)

    def test_scripted_errors(self, tmp_path):
        path = write_lines(
            tmp_path / "s.jsonl",
            [
                {"role": "a", "query_id": "t", "error": "transport"},
                {"role": "a", "query_id": "h", "error": "http_503"},
                {"role": "a", "query_id": "e", "response": ""},
            ],
        )
        mock = mock_script_load(path)
        with pytest.raises(TransportError):
            mock.complete(req(role="a", query_id="t"))
        with pytest.raises(EndpointError) as info:
            mock.complete(req(role="a", query_id="h"))
        assert info.value.status == 503
        with pytest.raises(EmptyOutputError):
            mock.complete(req(role="a", query_id="e"))

    def test_repeated_calls_are_identical(self, odqa_mock):
        r = req(role="summarizer", query_id="q01")
        assert odqa_mock.complete(r) == odqa_mock.complete(r)

    def test_fingerprint_tracks_script_content(self, tmp_path):
        a = write_lines(tmp_path / "a.jsonl", [{"role": "r", "query_id": "q", "response": "x"}])
        b = write_lines(tmp_path / "b.jsonl", [{"role": "r", "query_id": "q", "response": "y"}])
        assert mock_script_load(a).fingerprint != mock_script_load(b).fingerprint


class SlowCounter:
    fingerprint = "slow"

    def __init__(self, delay=0.0, text="out"):
        self.delay = delay
        self.text = text
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.calls += 1
        time.sleep(self.delay)
        return ChatResponse(text=f"{self.text}:{request.user_prompt}")


class TestCache:
    def test_miss_then_hit(self, tmp_path):
        inner = SlowCounter()
        cache = CachingBackend(inner, tmp_path / "c.jsonl")
        first = cache.complete(req())
        second = cache.complete(req())
        assert (first.from_cache, second.from_cache) == (False, True)
        assert first.text == second.text
        assert inner.calls == 1
        assert cache.stats.to_dict() == {"hits": 1, "misses": 1, "upstream_calls": 1}

    def test_hit_after_restart(self, tmp_path):
        path = tmp_path / "c.jsonl"
        CachingBackend(SlowCounter(), path).complete(req())
        inner = SlowCounter()
        resp = CachingBackend(inner, path).complete(req())
        assert resp.from_cache and inner.calls == 0

    def test_one_record_per_key(self, tmp_path):
        path = tmp_path / "c.jsonl"
        cache = CachingBackend(SlowCounter(), path)
        for _ in range(3):
            cache.complete(req())
        cache.complete(req("other"))
        keys = [json.loads(l)["key"] for l in path.read_text().splitlines()]
        assert len(keys) == len(set(keys)) == 2

    def test_corrupt_store_raises_cache_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"key": "k", "text": "x"}\nnot json\n')
        with pytest.raises(CacheError, match="line 2"):
            CachingBackend(SlowCounter(), path)

    def test_concurrent_identical_requests_single_flight(self):
        inner = SlowCounter(delay=0.05)
        cache = CachingBackend(inner)
        barrier = threading.Barrier(8)
        out = []

        def worker():
            barrier.wait()
            out.append(cache.complete(req()))

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert inner.calls == 1
        assert len({r.text for r in out}) == 1
        assert sum(not r.from_cache for r in out) == 1

    def test_leader_error_propagates_and_is_not_cached(self):
        class Failing:
            fingerprint = "f"
            calls = 0

            def complete(self, request):
                Failing.calls += 1
                raise TransportError("down")

        cache = CachingBackend(Failing())
        with pytest.raises(TransportError):
            cache.complete(req())
        with pytest.raises(TransportError):
            cache.complete(req())
        assert Failing.calls == 2
        assert len(cache) == 0


def _transport(handler):
    return httpx.MockTransport(handler)


def _ok(text="Paris"):
    return httpx.Response(
        200, json={"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 5, "completion_tokens": 1}}
    )


class TestHttp:
    def test_wire_format(self, monkeypatch):
        monkeypatch.setenv("MASSRAG_API_KEY", "secret")
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return _ok()

        backend = HttpBackend("http://llm.local/v1/", transport=_transport(handler))
        r = req("Q?", model_name="m", decode=DecodeParams(temperature=0, top_p=1.0, max_tokens=64))
        resp = backend.complete(r)
        assert resp.text == "Paris" and resp.prompt_tokens == 5 and resp.completion_tokens == 1
        assert seen["url"] == "http://llm.local/v1/chat/completions"
        assert seen["auth"] == "Bearer secret"
        assert seen["body"] == {
            "model": "m",
            "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "Q?"}],
            "temperature": 0,
            "top_p": 1.0,
            "max_tokens": 64,
        }

    def test_base_url_from_env(self, monkeypatch):
        monkeypatch.setenv("MASSRAG_BASE_URL", "http://env.local/v1")
        assert HttpBackend(transport=_transport(lambda r: _ok())).base_url == "http://env.local/v1"

    def test_missing_base_url(self, monkeypatch):
        monkeypatch.delenv("MASSRAG_BASE_URL", raising=False)
        with pytest.raises(ValueError):
            HttpBackend()

    def test_retries_5xx_then_succeeds_with_backoff(self):
        statuses = iter([503, 429, 200])
        sleeps = []

        def handler(request):
            status = next(statuses)
            return _ok() if status == 200 else httpx.Response(status, text="busy")

        backend = HttpBackend("http://x/v1", transport=_transport(handler), sleep=sleeps.append)
        assert backend.complete(req()).text == "Paris"
        assert sleeps == [1.0, 2.0]

    def test_transport_errors_exhaust_attempts(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("refused")

        backend = HttpBackend("http://x/v1", transport=_transport(handler), sleep=lambda s: None)
        with pytest.raises(TransportError):
            backend.complete(req())
        assert len(calls) == 3

    def test_4xx_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, text="bad request body")

        backend = HttpBackend("http://x/v1", transport=_transport(handler), sleep=lambda s: None)
        with pytest.raises(EndpointError) as info:
            backend.complete(req())
        assert info.value.status == 400 and "bad request" in str(info.value)
        assert len(calls) == 1

    def test_empty_completion(self):
        backend = HttpBackend("http://x/v1", transport=_transport(lambda r: _ok("  ")))
        with pytest.raises(EmptyOutputError):
            backend.complete(req())
