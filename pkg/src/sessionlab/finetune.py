"""Prompt/completion corpora for LLM fine-tuning and post-processing of generations.

Four task variants are supported: next-item generation (``genitem``), list
generation (``genlist``), classification over clustered category items
(``class``) and re-ranking of a candidate slate (``rank``).
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .dataset import Dataset, ItemInfo
from .embeddings import EmbeddingCache, EmbeddingMatrix, EmbeddingProvider, normalize
from .exceptions import EmbeddingError
from .recommenders import RecommendationList

logger = logging.getLogger(__name__)

TASKS = ("genitem", "genlist", "class", "rank")


@dataclass(frozen=True)
class PromptTemplate:
    item_separator: str = "\n"
    terminator: str = "\n\n###\n\n"
    categories_header: str = "\n\nCategories:\n"
    options_header: str = "\n\nOptions:\n"


@dataclass(frozen=True)
class PromptPair:
    prompt: str
    completion: str
    task: str
    session_id: str


def _texts(items: Sequence[str], catalog: Mapping[str, ItemInfo]) -> list[str]:
    out = []
    for i in items:
        info = catalog.get(i)
        if info is None or not info.text:
            raise ValueError(f"item {i!r} has no text")
        out.append(info.text)
    return out


def _session_body(items: Sequence[str], catalog, template: PromptTemplate) -> str:
    return template.item_separator.join(_texts(items, catalog))


def _check_sessions(train: Dataset) -> None:
    short = [s.session_id for s in train.sessions if len(s) < 2]
    if short:
        raise ValueError(f"sessions shorter than two items: {short[:10]}")


def build_genitem_pairs(train: Dataset, template: PromptTemplate = PromptTemplate()) -> list[PromptPair]:
    _check_sessions(train)
    pairs = []
    for s in train.sessions:
        body = _session_body(s.items[:-1], train.catalog, template)
        completion = _texts([s.items[-1]], train.catalog)[0]
        pairs.append(PromptPair(body + template.terminator, completion, "genitem", s.session_id))
    return pairs


def force_head(items: Sequence[str], truth: str, k: int | None = None) -> list[str]:
    """Put ``truth`` first, drop duplicates, keep at most ``k`` items."""
    out = [truth]
    for i in items:
        if i not in out:
            out.append(i)
    return out if k is None else out[:k]


def build_genlist_pairs(train: Dataset, teacher, k: int = 20,
                        template: PromptTemplate = PromptTemplate()) -> list[PromptPair]:
    _check_sessions(train)
    pairs = []
    for s in train.sessions:
        prompt_items, truth = s.items[:-1], s.items[-1]
        try:
            teacher_items = teacher.recommend(prompt_items, k).items
        except Exception as exc:
            logger.warning("teacher failed on session %s, skipped: %s", s.session_id, exc)
            continue
        ranked = force_head(teacher_items, truth, k)
        body = _session_body(prompt_items, train.catalog, template)
        completion = template.item_separator.join(_texts(ranked, train.catalog))
        pairs.append(PromptPair(body + template.terminator, completion, "genlist", s.session_id))
    return pairs


def build_rank_pairs(train: Dataset, teacher, k: int = 20, seed: int = 0,
                     template: PromptTemplate = PromptTemplate()) -> list[PromptPair]:
    """Prompt lists a shuffled slate (teacher top-k plus the truth); completion is
    the teacher order with the truth first."""
    _check_sessions(train)
    rng = np.random.default_rng(seed)
    pairs = []
    for s in train.sessions:
        prompt_items, truth = s.items[:-1], s.items[-1]
        try:
            teacher_items = teacher.recommend(prompt_items, k).items
        except Exception as exc:
            logger.warning("teacher failed on session %s, skipped: %s", s.session_id, exc)
            continue
        ranked = force_head(teacher_items, truth)
        options = [ranked[i] for i in rng.permutation(len(ranked))]
        prompt = (_session_body(prompt_items, train.catalog, template) + template.options_header
                  + template.item_separator.join(_texts(options, train.catalog)) + template.terminator)
        completion = template.item_separator.join(_texts(ranked, train.catalog))
        pairs.append(PromptPair(prompt, completion, "rank", s.session_id))
    return pairs


# ---------------------------------------------------------------------------
# clustering for the classification task


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: tuple[float, ...]
    n_iter: int
    representatives: tuple[str, ...] = ()


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing.

    An empty cluster is re-seeded with the point farthest from its centroid.
    ``inertia_history`` holds the objective after every assignment step.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    C = X[centers].copy()
    labels = None
    history = []
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        new_labels = D.argmin(axis=1)
        history.append(float(D[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        point_d = D[np.arange(n), labels]
        taken: set[int] = set()
        for c in range(k):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
            else:
                order = np.argsort(-point_d, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                C[c] = X[far]
                point_d[far] = 0.0
    return ClusterModel(C, labels, tuple(history), it)


def cluster_representatives(model: ClusterModel, item_ids: Sequence[str],
                            popularity: Mapping[str, int]) -> tuple[str, ...]:
    """Most popular member per non-empty cluster (ties by item id)."""
    reps = []
    for c in range(len(model.centroids)):
        members = [item_ids[i] for i in np.flatnonzero(model.labels == c)]
        if members:
            reps.append(min(members, key=lambda i: (-popularity.get(i, 0), i)))
    return tuple(reps)


def build_class_pairs(train: Dataset, embeddings: EmbeddingMatrix, k_clusters: int = 200,
                      top_c: int = 20, seed: int = 0,
                      template: PromptTemplate = PromptTemplate()) -> tuple[list[PromptPair], ClusterModel]:
    """Cluster the catalog, elevate each cluster's most popular item to a category,
    and label every training session with the categories closest to its last item."""
    _check_sessions(train)
    item_ids = sorted(train.catalog)
    X = embeddings.rows(item_ids)
    model = kmeans(X, k_clusters, seed)
    reps = cluster_representatives(model, item_ids, train.item_counts())
    model = ClusterModel(model.centroids, model.labels, model.inertia_history, model.n_iter, reps)
    categories = sorted(reps)
    cat_vecs = embeddings.rows(categories)
    cat_vecs = cat_vecs / np.linalg.norm(cat_vecs, axis=1, keepdims=True)
    header = (template.categories_header
              + template.item_separator.join(_texts(categories, train.catalog)))
    pairs = []
    for s in train.sessions:
        prompt_items, truth = s.items[:-1], s.items[-1]
        t = embeddings.rows([truth])[0]
        sims = cat_vecs @ (t / np.linalg.norm(t))
        order = np.lexsort((np.arange(len(categories)), -np.round(sims, 12)))[:top_c]
        chosen = [categories[i] for i in order]
        prompt = _session_body(prompt_items, train.catalog, template) + header + template.terminator
        completion = template.item_separator.join(_texts(chosen, train.catalog))
        pairs.append(PromptPair(prompt, completion, "class", s.session_id))
    return pairs, model


def write_pairs_jsonl(pairs: Sequence[PromptPair], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps({"prompt": p.prompt, "completion": p.completion},
                                ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# post-processing of generations


@dataclass(frozen=True)
class Resolution:
    raw_text: str
    item_id: str | None
    similarity: float | None
    was_hallucination: bool
    skipped: bool = False

    def to_dict(self) -> dict:
        return {"raw_text": self.raw_text, "item_id": self.item_id, "similarity": self.similarity,
                "was_hallucination": self.was_hallucination, "skipped": self.skipped}


def cached_text_embedder(provider: EmbeddingProvider,
                         cache_path: str | os.PathLike) -> Callable[[Sequence[str]], np.ndarray]:
    """Embed free text cache-first through ``provider``."""
    cache = EmbeddingCache(Path(cache_path))

    def embed(texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if cache.get(provider.model, t) is None]
        for start in range(0, len(missing), provider.batch_size):
            batch = missing[start:start + provider.batch_size]
            vectors = provider.embed(batch)
            cache.append(provider.model, ((f"text:{t}", t, v) for t, v in zip(batch, vectors)))
        return np.vstack([cache.get(provider.model, t) for t in texts]).astype(np.float64)

    return embed


def resolve_hallucinations(texts: Sequence[str], catalog: Mapping[str, ItemInfo],
                           embeddings: EmbeddingMatrix,
                           embed_text: Callable[[Sequence[str]], np.ndarray]) -> list[Resolution]:
    """Map generated item names to catalog items.

    Exact text matches resolve to themselves; anything else goes to the catalog
    row with the largest dot product against the text's normalized embedding.
    """
    if not embeddings.normalized:
        embeddings = normalize(embeddings)
    order = np.argsort(np.array(embeddings.item_ids))
    ids = [embeddings.item_ids[i] for i in order]
    M = embeddings.vectors[order]
    index = {item: n for n, item in enumerate(ids)}
    by_text: dict[str, str] = {}
    for item in sorted(catalog):
        by_text.setdefault(catalog[item].text, item)
    out = []
    for raw in texts:
        text = (raw or "").strip()
        if not text:
            out.append(Resolution(raw or "", None, None, False, skipped=True))
            continue
        if text in by_text and by_text[text] in index:
            v = M[index[by_text[text]]]
            out.append(Resolution(raw, by_text[text], float(v @ v), False))
            continue
        try:
            v = np.asarray(embed_text([text]), dtype=np.float64)[0]
        except Exception as exc:
            raise EmbeddingError(f"could not embed generated text {text!r}: {exc}") from exc
        norm = np.linalg.norm(v)
        if norm == 0:
            raise EmbeddingError(f"generated text {text!r} has a zero embedding")
        sims = M @ (v / norm)
        best = int(np.lexsort((np.arange(len(ids)), -np.round(sims, 12)))[0])
        out.append(Resolution(raw, ids[best], float(sims[best]), True))
    return out


def resolution_summary(resolutions: Sequence[Resolution]) -> dict:
    used = [r for r in resolutions if not r.skipped]
    if not used:
        return {"n": 0, "hallucination_rate": None, "mean_similarity": None}
    return {"n": len(used),
            "hallucination_rate": sum(r.was_hallucination for r in used) / len(used),
            "mean_similarity": float(np.mean([r.similarity for r in used]))}


def aggregate_single_generations(responses: Sequence[str | None], k: int = 20) -> RecommendationList:
    """Rank distinct responses by frequency, ties by first appearance."""
    responses = [r for r in responses if r]
    counts = Counter(responses)
    first = {}
    for pos, r in enumerate(responses):
        first.setdefault(r, pos)
    ranked = sorted(counts, key=lambda r: (-counts[r], first[r]))[:k]
    return RecommendationList(tuple(ranked), tuple(float(counts[r]) for r in ranked))


# ---------------------------------------------------------------------------
# completion providers


class CompletionProvider(Protocol):
    def complete(self, prompt: str, temperature: float = 1.0) -> str: ...


@dataclass
class HttpCompletionProvider:
    """Client for an OpenAI-style ``/completions`` endpoint."""

    url: str
    model: str
    api_key: str | None = None
    max_tokens: int = 256
    stop: str | None = None
    transport: httpx.BaseTransport | None = None
    timeout: float = 60.0

    def complete(self, prompt: str, temperature: float = 1.0) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.model, "prompt": prompt, "temperature": temperature,
                   "max_tokens": self.max_tokens}
        if self.stop:
            payload["stop"] = self.stop
        with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
            resp = client.post(self.url, json=payload, headers=headers)
            resp.raise_for_status()
            return resp.json()["choices"][0]["text"]


class ReplayCompletionProvider:
    """Serves recorded completions strictly in order."""

    def __init__(self, responses: Sequence[str] | str | os.PathLike):
        if isinstance(responses, (str, os.PathLike)):
            with open(responses, encoding="utf-8") as fh:
                responses = [json.loads(line)["completion"] for line in fh if line.strip()]
        self._responses = list(responses)
        self._pos = 0

    def complete(self, prompt: str, temperature: float = 1.0) -> str:
        if self._pos >= len(self._responses):
            raise IndexError("replay exhausted")
        out = self._responses[self._pos]
        self._pos += 1
        return out


class RecordingCompletionProvider:
    """Wraps a provider and appends every exchange to a JSONL file for later replay."""

    def __init__(self, inner: CompletionProvider, path: str | os.PathLike):
        self.inner = inner
        self.path = Path(path)

    def complete(self, prompt: str, temperature: float = 1.0) -> str:
        out = self.inner.complete(prompt, temperature)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"prompt": prompt, "temperature": temperature,
                                 "completion": out}, ensure_ascii=False) + "\n")
        return out


def generate_single_items(provider: CompletionProvider, prompt: str, repeats: int = 20,
                          temperature: float = 1.0) -> list[str]:
    return [provider.complete(prompt, temperature).strip() for _ in range(repeats)]
