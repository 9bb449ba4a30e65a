import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sessionlab.embeddings import (EmbeddingCache, EmbeddingMatrix, HttpEmbeddingProvider,
                                   SyntheticTextProvider, fetch_embeddings, normalize,
                                   provider_from_env, synthetic_embeddings)
from sessionlab.exceptions import EmbeddingError


class Recorder:
    """Transport answering with deterministic vectors and logging every request."""

    def __init__(self, dim=4, fail=0, status=200):
        self.requests = []
        self.dim = dim
        self.fail = fail
        self.status = status

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append(body)
        if self.fail > 0:
            self.fail -= 1
            return httpx.Response(503, json={"error": "busy"})
        data = [{"index": n, "embedding": [float(len(t) + k) for k in range(self.dim)]}
                for n, t in enumerate(body["input"])]
        return httpx.Response(self.status, json={"data": data[::-1]})

    def provider(self, batch_size=2, **kw):
        return HttpEmbeddingProvider("http://embed.test/v1/embeddings", "m1", "key", batch_size,
                                     transport=httpx.MockTransport(self), sleep=lambda s: None, **kw)


TEXTS = {"a": "alpha", "b": "bee", "c": "charlie"}


def test_cold_cache_batches(tmp_path):
    rec = Recorder()
    m = fetch_embeddings(TEXTS, rec.provider(batch_size=2), tmp_path / "c.jsonl")
    assert len(rec.requests) == 2
    assert rec.requests[0] == {"model": "m1", "input": ["alpha", "bee"]}
    assert m.item_ids == ("a", "b", "c")
    np.testing.assert_array_equal(m.vectors[1], [3, 4, 5, 6])


def test_warm_cache_makes_no_calls(tmp_path):
    fetch_embeddings(TEXTS, Recorder().provider(), tmp_path / "c.jsonl")
    rec = Recorder()
    fetch_embeddings(TEXTS, rec.provider(), tmp_path / "c.jsonl")
    assert rec.requests == []


def test_rerun_is_byte_identical(tmp_path):
    a = fetch_embeddings(TEXTS, Recorder().provider(), tmp_path / "c.jsonl")
    b = fetch_embeddings(TEXTS, Recorder().provider(), tmp_path / "c.jsonl")
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_text_change_invalidates(tmp_path):
    fetch_embeddings(TEXTS, Recorder().provider(), tmp_path / "c.jsonl")
    rec = Recorder()
    fetch_embeddings({**TEXTS, "a": "alpha with keywords"}, rec.provider(), tmp_path / "c.jsonl")
    assert rec.requests == [{"model": "m1", "input": ["alpha with keywords"]}]


def test_retries_then_succeeds(tmp_path):
    rec = Recorder(fail=2)
    sleeps = []
    p = HttpEmbeddingProvider("http://x", "m1", batch_size=5, transport=httpx.MockTransport(rec),
                              sleep=sleeps.append, backoff=0.5)
    fetch_embeddings(TEXTS, p, tmp_path / "c.jsonl")
    assert len(rec.requests) == 3
    assert sleeps == [0.5, 1.0]


def test_failure_names_items_and_keeps_partial(tmp_path):
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] > 1:
            return httpx.Response(500)
        body = json.loads(request.content)
        return httpx.Response(200, json={"data": [{"index": n, "embedding": [1.0, 2.0]}
                                                  for n in range(len(body["input"]))]})

    p = HttpEmbeddingProvider("http://x", "m1", batch_size=2, transport=httpx.MockTransport(handler),
                              sleep=lambda s: None)
    with pytest.raises(EmbeddingError, match="'c'"):
        fetch_embeddings(TEXTS, p, tmp_path / "c.jsonl")
    assert calls["n"] == 4  # one success, three attempts for the second batch
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    assert cache.get("m1", "alpha") is not None and cache.get("m1", "charlie") is None


def test_google_shape(tmp_path):
    def handler(request):
        body = json.loads(request.content)
        return httpx.Response(200, json={"predictions": [{"embeddings": {"values": [0.5, 0.5]}}
                                                         for _ in body["instances"]]})

    p = provider_from_env("google", env={"EMBEDDING_API_URL": "http://g"},
                          transport=httpx.MockTransport(handler))
    m = fetch_embeddings(TEXTS, p, tmp_path / "c.jsonl")
    assert m.vectors.shape == (3, 2)


def test_env_url_required():
    with pytest.raises(EmbeddingError, match="EMBEDDING_API_URL"):
        provider_from_env("openai", env={})


def test_cache_round_trip_bit_exact_and_torn_line(tmp_path):
    path = tmp_path / "c.jsonl"
    vec = np.random.default_rng(0).standard_normal(7).astype(np.float32)
    EmbeddingCache(path).append("m", [("a", "text a", vec)])
    with open(path, "a") as fh:
        fh.write('{"key": "trunc')
    back = EmbeddingCache(path).get("m", "text a")
    assert back.tobytes() == vec.tobytes()


def test_cache_dimension_mismatch(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = EmbeddingCache(path)
    cache.append("m", [("a", "x", [1.0, 2.0])])
    cache.append("m", [("b", "y", [1.0, 2.0, 3.0])])
    with pytest.raises(EmbeddingError, match="dimension mismatch"):
        EmbeddingCache(path)


def test_cache_compaction(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = EmbeddingCache(path)
    cache.append("m", [("a", "x", [1.0, 2.0])])
    cache.append("m", [("a", "x", [3.0, 4.0])])
    assert cache.compact() == 1
    np.testing.assert_array_equal(EmbeddingCache(path).get("m", "x"), [3.0, 4.0])


# ---------------------------------------------------------------------------
# synthetic


def test_synthetic_same_seed_identical():
    items = [f"i{k}" for k in range(12)]
    a = synthetic_embeddings(items, 16, seed=3)
    b = synthetic_embeddings(items, 16, seed=3)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_synthetic_seeds_differ():
    items = [f"i{k}" for k in range(12)]
    a = normalize(synthetic_embeddings(items, 16, seed=1)).vectors
    b = normalize(synthetic_embeddings(items, 16, seed=2)).vectors
    assert np.max(np.sum(a * b, axis=1)) < 0.99


def test_synthetic_semantic_cooccurrence():
    items = ["a", "b", "c", "d", "e", "f"]
    sessions = [["a", "b"], ["a", "b", "c"], ["a", "b"], ["d", "e"], ["e", "f"], ["d", "f", "c"]]
    m = normalize(synthetic_embeddings(items, 32, seed=0, sessions=sessions))
    v = dict(zip(m.item_ids, m.vectors))
    assert v["a"] @ v["b"] > v["a"] @ v["d"]
    assert v["a"] @ v["b"] > v["a"] @ v["f"]


def test_synthetic_dim_check():
    with pytest.raises(ValueError):
        synthetic_embeddings(["a"], 1)


def test_synthetic_text_provider_deterministic():
    p = SyntheticTextProvider(dim=8, seed=1)
    assert p.embed(["hello"]) == p.embed(["hello"])
    assert p.embed(["hello"]) != p.embed(["world"])


# ---------------------------------------------------------------------------
# matrix and normalization


def test_normalize_examples():
    m = normalize(EmbeddingMatrix(("a",), np.array([[3.0, 4.0]])))
    np.testing.assert_allclose(m.vectors, [[0.6, 0.8]], atol=1e-15)
    assert m.normalized
    again = normalize(m)
    np.testing.assert_allclose(again.vectors, m.vectors, atol=1e-12)


def test_normalize_zero_row_lists_items():
    with pytest.raises(EmbeddingError, match="'z'"):
        normalize(EmbeddingMatrix(("a", "z"), np.array([[1.0, 0.0], [0.0, 0.0]])))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-50, 50, allow_nan=False)))
def test_normalize_unit_rows_and_cosine_equals_dot(x):
    if np.any(np.linalg.norm(x, axis=1) < 1e-6):
        return
    m = normalize(EmbeddingMatrix(tuple(f"i{k}" for k in range(6)), x))
    np.testing.assert_allclose(np.sum(m.vectors ** 2, axis=1), 1.0, atol=1e-9)
    cos = (x @ x.T) / np.outer(np.linalg.norm(x, axis=1), np.linalg.norm(x, axis=1))
    np.testing.assert_allclose(m.vectors @ m.vectors.T, cos, atol=1e-9)


@pytest.mark.parametrize("ids, vectors", [
    (("a", "b"), np.zeros((3, 2))),
    (("a",), np.array([[np.nan, 1.0]])),
    (("a", "a"), np.ones((2, 2))),
])
def test_matrix_validation(ids, vectors):
    with pytest.raises(EmbeddingError):
        EmbeddingMatrix(ids, vectors)


def test_matrix_save_load(tmp_path):
    m = synthetic_embeddings(["x", "y"], 4, seed=9)
    m.save(tmp_path / "e.npz")
    back = EmbeddingMatrix.load(tmp_path / "e.npz")
    assert back.item_ids == m.item_ids and back.vectors.tobytes() == m.vectors.tobytes()


def test_rows_missing_item():
    m = synthetic_embeddings(["x", "y"], 4)
    with pytest.raises(EmbeddingError, match="'q'"):
        m.rows(["q"])
