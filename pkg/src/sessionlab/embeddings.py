"""Item embeddings: HTTP providers, a JSONL cache, and a synthetic offline provider."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .exceptions import EmbeddingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Item-aligned dense vectors, one row per item id."""

    item_ids: tuple[str, ...]
    vectors: np.ndarray
    provider: str = "unknown"
    normalized: bool = False

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.item_ids):
            raise EmbeddingError(
                f"expected {len(self.item_ids)} rows, got array of shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise EmbeddingError("embedding dimension must be positive")
        if not np.all(np.isfinite(vectors)):
            raise EmbeddingError("embedding matrix contains NaN or Inf")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise EmbeddingError("duplicate item ids in embedding matrix")
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids)}

    def rows(self, items: Sequence[str]) -> np.ndarray:
        idx = self.index()
        missing = [i for i in items if i not in idx]
        if missing:
            raise EmbeddingError(f"no embedding for items {missing}")
        return self.vectors[[idx[i] for i in items]]

    def subset(self, items: Sequence[str]) -> "EmbeddingMatrix":
        return replace(self, item_ids=tuple(items), vectors=self.rows(items))

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, item_ids=np.array(self.item_ids, dtype=str), vectors=self.vectors,
                 provider=np.array(self.provider), normalized=np.array(self.normalized))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingMatrix":
        with np.load(path, allow_pickle=False) as z:
            return cls(tuple(str(i) for i in z["item_ids"]), z["vectors"],
                       str(z["provider"]), bool(z["normalized"]))


def normalize(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm."""
    norms = np.linalg.norm(matrix.vectors, axis=1)
    zero = [matrix.item_ids[i] for i in np.flatnonzero(norms == 0)]
    if zero:
        raise EmbeddingError(f"cannot normalize all-zero rows for items {zero}")
    return replace(matrix, vectors=matrix.vectors / norms[:, None], normalized=True)


# ---------------------------------------------------------------------------
# providers


class EmbeddingProvider(Protocol):
    name: str
    model: str
    batch_size: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


def _dig(obj, path: Sequence[str | int]):
    for key in path:
        obj = obj[key]
    return obj


@dataclass
class HttpEmbeddingProvider:
    """Batch text-embedding client for OpenAI-compatible (or configured) JSON APIs.

    ``transport`` accepts any ``httpx`` transport, which is how tests record calls.
    Field paths are configurable for services with a different response shape.
    """

    url: str
    model: str
    api_key: str | None = None
    batch_size: int = 100
    name: str = "openai"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    data_path: tuple = ("data",)
    vector_path: tuple = ("embedding",)
    index_field: str | None = "index"
    request_builder: Callable[[str, Sequence[str]], dict] | None = None
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep

    def _payload(self, texts: Sequence[str]) -> dict:
        if self.request_builder is not None:
            return self.request_builder(self.model, texts)
        return {"model": self.model, "input": list(texts)}

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_exc: Exception | None = None
        with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
            for attempt in range(self.max_retries):
                try:
                    resp = client.post(self.url, json=self._payload(texts), headers=headers)
                    resp.raise_for_status()
                    data = _dig(resp.json(), self.data_path)
                    if self.index_field:
                        data = sorted(data, key=lambda d: d[self.index_field])
                    vectors = [list(map(float, _dig(d, self.vector_path))) for d in data]
                    if len(vectors) != len(texts):
                        raise EmbeddingError(
                            f"requested {len(texts)} embeddings, received {len(vectors)}")
                    return vectors
                except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                    last_exc = exc
                    logger.warning("embedding request failed (attempt %d/%d): %s",
                                   attempt + 1, self.max_retries, exc)
                    if attempt + 1 < self.max_retries:
                        self.sleep(self.backoff * 2 ** attempt)
        raise EmbeddingError(f"embedding request failed after {self.max_retries} attempts: {last_exc}")


def _vertex_request(model: str, texts: Sequence[str]) -> dict:
    return {"instances": [{"content": t} for t in texts]}


def provider_from_env(name: str, model: str | None = None, batch_size: int = 100,
                      env: Mapping[str, str] | None = None, **kwargs) -> HttpEmbeddingProvider:
    """Build an HTTP provider from ``EMBEDDING_API_URL`` / ``EMBEDDING_API_KEY``."""
    env = os.environ if env is None else env
    url = env.get("EMBEDDING_API_URL")
    if not url:
        raise EmbeddingError("EMBEDDING_API_URL is not set")
    key = env.get("EMBEDDING_API_KEY")
    if name == "openai":
        return HttpEmbeddingProvider(url, model or "text-embedding-ada-002", key, batch_size,
                                     name="openai", **kwargs)
    if name == "google":
        return HttpEmbeddingProvider(url, model or "textembedding-gecko@002", key, batch_size,
                                     name="google", data_path=("predictions",),
                                     vector_path=("embeddings", "values"), index_field=None,
                                     request_builder=_vertex_request, **kwargs)
    raise EmbeddingError(f"unknown provider {name!r}")


@dataclass
class SyntheticTextProvider:
    """Deterministic hash-seeded Gaussian vectors for arbitrary text, usable offline."""

    dim: int = 64
    seed: int = 0
    batch_size: int = 64
    name: str = "synthetic"
    model: str = "synthetic"

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [_hash_gaussian(f"text:{t}", self.seed, self.dim).tolist() for t in texts]


def _hash_seed(key: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}\x00{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _hash_gaussian(key: str, seed: int, dim: int) -> np.ndarray:
    return np.random.default_rng(_hash_seed(key, seed)).standard_normal(dim)


# ---------------------------------------------------------------------------
# cache


def cache_key(model: str, text: str) -> str:
    return hashlib.sha256(f"{model}\x00{text}".encode()).hexdigest()


@dataclass
class EmbeddingCache:
    """Append-only JSONL cache keyed on (model, exact input text).

    Vectors are stored as float32 values; reading them back is bit-exact.
    """

    path: Path
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.path = Path(self.path)
        if self.path.exists():
            dims = set()
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except ValueError:
                        # a torn final line from an interrupted append
                        logger.warning("skipping unreadable cache line %d in %s", lineno, self.path)
                        continue
                    vec = np.asarray(rec["vector"], dtype=np.float32)
                    if vec.shape[0] != rec["dim"]:
                        raise EmbeddingError(f"cache line {lineno}: dim field disagrees with vector")
                    dims.add((rec["model"], rec["dim"]))
                    self.entries[rec["key"]] = vec
            models = {}
            for model, dim in dims:
                if models.setdefault(model, dim) != dim:
                    raise EmbeddingError(f"dimension mismatch across cache entries for model {model}")

    def get(self, model: str, text: str) -> np.ndarray | None:
        return self.entries.get(cache_key(model, text))

    def append(self, model: str, records: Iterable[tuple[str, str, Sequence[float]]]) -> None:
        """Persist ``(item_id, text, vector)`` records in one write."""
        lines = []
        for item_id, text, vector in records:
            vec = np.asarray(vector, dtype=np.float32)
            key = cache_key(model, text)
            self.entries[key] = vec
            lines.append(json.dumps({"key": key, "item_id": item_id, "model": model,
                                     "dim": int(vec.shape[0]), "vector": [float(v) for v in vec]},
                                    separators=(",", ":")) + "\n")
        if not lines:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write("".join(lines))
            fh.flush()
            os.fsync(fh.fileno())

    def compact(self) -> int:
        """Rewrite the file keeping the last record per key. Returns the record count."""
        if not self.path.exists():
            return 0
        latest: dict[str, str] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    latest[json.loads(line)["key"]] = line if line.endswith("\n") else line + "\n"
                except ValueError:
                    continue
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.writelines(latest.values())
        os.replace(tmp, self.path)
        return len(latest)


def fetch_embeddings(texts: Mapping[str, str], provider: EmbeddingProvider,
                     cache_path: str | os.PathLike) -> EmbeddingMatrix:
    """Embed ``item_id -> text`` cache-first; only misses reach the provider.

    Each successful batch is persisted before the next request, so a failure
    part-way never repeats paid calls. Rows follow the mapping's order.
    """
    cache = EmbeddingCache(Path(cache_path))
    missing = [(item, text) for item, text in texts.items() if cache.get(provider.model, text) is None]
    failed: list[str] = []
    for start in range(0, len(missing), provider.batch_size):
        batch = missing[start:start + provider.batch_size]
        try:
            vectors = provider.embed([t for _, t in batch])
        except EmbeddingError as exc:
            failed.extend(item for item, _ in missing[start:])
            raise EmbeddingError(f"failed to embed items {failed}: {exc}") from exc
        cache.append(provider.model, ((item, text, v) for (item, text), v in zip(batch, vectors)))
    rows = [cache.get(provider.model, text) for text in texts.values()]
    if len({r.shape[0] for r in rows}) > 1:
        raise EmbeddingError("cached vectors have inconsistent dimensions")
    vectors = np.vstack(rows).astype(np.float64) if rows else np.zeros((0, 1))
    return EmbeddingMatrix(tuple(texts), vectors, provider=provider.name)


# ---------------------------------------------------------------------------
# synthetic item embeddings


def synthetic_embeddings(item_ids: Sequence[str], dim: int, seed: int = 0,
                         sessions: Iterable[Sequence[str]] | None = None,
                         semantic_weight: float = 3.0) -> EmbeddingMatrix:
    """Seeded per-item Gaussian vectors, optionally pulled toward co-occurrence structure.

    With ``sessions`` given, each item also receives a random projection of its
    normalized co-occurrence profile, so items that appear in the same sessions end
    up close in cosine terms.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    item_ids = tuple(item_ids)
    noise = np.vstack([_hash_gaussian(f"item:{i}", seed, dim) for i in item_ids]) / np.sqrt(dim)
    if sessions is None:
        return EmbeddingMatrix(item_ids, noise, provider="synthetic")
    index = {item: n for n, item in enumerate(item_ids)}
    cooc = np.zeros((len(item_ids), len(item_ids)))
    for session in sessions:
        members = sorted({index[i] for i in session if i in index})
        for a in members:
            cooc[a, members] += 1.0
    norms = np.linalg.norm(cooc, axis=1, keepdims=True)
    profile = np.divide(cooc, norms, out=np.zeros_like(cooc), where=norms > 0)
    proj = np.random.default_rng(_hash_seed("semantic-projection", seed)).standard_normal(
        (len(item_ids), dim)) / np.sqrt(dim)
    latent = profile @ proj
    lnorm = np.linalg.norm(latent, axis=1, keepdims=True)
    latent = np.divide(latent, lnorm, out=np.zeros_like(latent), where=lnorm > 0)
    return EmbeddingMatrix(item_ids, noise + semantic_weight * latent, provider="synthetic")
