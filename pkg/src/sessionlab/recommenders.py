"""Non-neural recommenders: LLMSeqSim, SKNN, SKNNEmb and MostPopular.

All of them follow the same contract: ``fit(train_dataset)`` then
``recommend(prompt_items, k)`` returning a :class:`RecommendationList`.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset
from .embeddings import EmbeddingMatrix
from .exceptions import EmbeddingError
from .pooling import PoolingStrategy, pool_session
from .reduction import make_reducer

logger = logging.getLogger(__name__)

# scores closer than this are treated as ties so that rounding noise cannot reorder them
_TIE_DECIMALS = 12


@dataclass(frozen=True)
class RecommendationList:
    items: tuple[str, ...]
    scores: tuple[float, ...]
    short: bool = False

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(zip(self.items, self.scores))


def rank_items(item_ids: np.ndarray, scores: np.ndarray, k: int,
               popularity: np.ndarray | None = None,
               exclude: set[str] | None = None) -> RecommendationList:
    """Top-k by score desc, then popularity desc, then item id asc.

    ``item_ids`` must be sorted ascending so that position encodes id order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keys = [np.arange(len(item_ids))]
    if popularity is not None:
        keys.append(-popularity)
    keys.append(-np.round(scores, _TIE_DECIMALS))
    order = np.lexsort(keys)
    chosen = []
    for idx in order:
        if exclude and item_ids[idx] in exclude:
            continue
        chosen.append(idx)
        if len(chosen) == k:
            break
    return RecommendationList(tuple(str(item_ids[i]) for i in chosen),
                              tuple(float(scores[i]) for i in chosen))


class Recommender(BaseEstimator):
    """Shared plumbing: popularity counts and the sorted training vocabulary."""

    def _fit_popularity(self, train: Dataset) -> None:
        counts = train.item_counts()
        self.item_ids_ = np.array(sorted(counts))
        self.item_index_ = {item: i for i, item in enumerate(self.item_ids_)}
        self.popularity_ = np.array([counts[i] for i in self.item_ids_], dtype=np.float64)

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        raise NotImplementedError

    def recommend_many(self, prompts: Sequence[Sequence[str]], k: int = 20) -> list[RecommendationList]:
        return [self.recommend(p, k) for p in prompts]


class MostPopular(Recommender):
    """Static list of the most interacted-with training items."""

    def fit(self, train: Dataset):
        if not train.sessions:
            raise ValueError("training set is empty")
        self._fit_popularity(train)
        return self

    def recommend(self, prompt: Sequence[str] = (), k: int = 20) -> RecommendationList:
        check_is_fitted(self, "popularity_")
        return rank_items(self.item_ids_, self.popularity_, k)


class _NeighborhoodMixin:
    """Neighbor selection shared by SKNN and SKNNEmb."""

    def _fit_sessions(self, train: Dataset) -> None:
        self._fit_popularity(train)
        sessions = train.sessions
        rows, cols = [], []
        for r, s in enumerate(sessions):
            for item in set(s.items):
                rows.append(r)
                cols.append(self.item_index_[item])
        self.session_items_ = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(len(sessions), len(self.item_ids_)))
        self.session_ids_ = np.array([s.session_id for s in sessions])
        self.session_start_ = np.array([s.start_ts for s in sessions], dtype=np.int64)
        # rank of each session in the tie-break order: most recent first, then id
        order = np.lexsort((self.session_ids_, -self.session_start_))
        self.session_tiebreak_ = np.empty(len(sessions), dtype=np.int64)
        self.session_tiebreak_[order] = np.arange(len(sessions))

    def _neighbors(self, sims: np.ndarray) -> np.ndarray:
        candidates = np.flatnonzero(sims > 0)
        if len(candidates) == 0:
            return candidates
        order = np.lexsort((self.session_tiebreak_[candidates],
                            -np.round(sims[candidates], _TIE_DECIMALS)))
        return candidates[order[: self.k_neighbors]]

    def _scores_from_neighbors(self, sims: np.ndarray) -> dict[str, float]:
        neighbors = self._neighbors(sims)
        if len(neighbors) == 0:
            return {}
        scores = self.session_items_[neighbors].T @ sims[neighbors]
        return dict(zip(self.item_ids_.tolist(), np.asarray(scores).ravel().tolist()))

    def _recommend_from_scores(self, scores: dict[str, float], prompt: Sequence[str],
                               k: int) -> RecommendationList:
        if not scores:
            logger.debug("no neighbor shares an item with the prompt; falling back to popularity")
            if not self.fallback_popular:
                return RecommendationList((), ())
            values = self.popularity_
            exclude = None if self.allow_repeats else set(prompt)
            return rank_items(self.item_ids_, values * 0.0, k, self.popularity_, exclude)
        values = np.array([scores[i] for i in self.item_ids_.tolist()])
        exclude = set() if self.allow_repeats else set(prompt)
        exclude |= {i for i, v in zip(self.item_ids_.tolist(), values) if v <= 0}
        return rank_items(self.item_ids_, values, k, self.popularity_, exclude)


class SKNN(_NeighborhoodMixin, Recommender):
    """Session kNN over binary item vectors with cosine similarity."""

    def __init__(self, k_neighbors: int = 100, allow_repeats: bool = True,
                 fallback_popular: bool = True):
        self.k_neighbors = k_neighbors
        self.allow_repeats = allow_repeats
        self.fallback_popular = fallback_popular

    def fit(self, train: Dataset):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not train.sessions:
            raise ValueError("training set is empty")
        self._fit_sessions(train)
        self.session_sizes_ = np.asarray(self.session_items_.sum(axis=1)).ravel()
        return self

    def similarities(self, prompt: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "session_items_")
        distinct = set(prompt)
        known = [self.item_index_[i] for i in distinct if i in self.item_index_]
        if not distinct or not known:
            return np.zeros(len(self.session_ids_))
        overlap = np.asarray(self.session_items_[:, known].sum(axis=1)).ravel()
        return overlap / np.sqrt(self.session_sizes_ * len(distinct))

    def score_items(self, prompt: Sequence[str]) -> dict[str, float]:
        return self._scores_from_neighbors(self.similarities(prompt))

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        return self._recommend_from_scores(self.score_items(prompt), prompt, k)


class SKNNEmb(_NeighborhoodMixin, Recommender):
    """Session kNN where session similarity is the cosine of pooled item embeddings.

    Training sessions and the prompt may use different pooling strategies.
    """

    def __init__(self, embeddings: EmbeddingMatrix | None = None, k_neighbors: int = 100,
                 train_pooling: str = "mean", prompt_pooling: str = "mean",
                 allow_repeats: bool = True, fallback_popular: bool = True):
        self.embeddings = embeddings
        self.k_neighbors = k_neighbors
        self.train_pooling = train_pooling
        self.prompt_pooling = prompt_pooling
        self.allow_repeats = allow_repeats
        self.fallback_popular = fallback_popular

    def fit(self, train: Dataset):
        if self.embeddings is None:
            raise ValueError("SKNNEmb requires item embeddings")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not train.sessions:
            raise ValueError("training set is empty")
        self._fit_sessions(train)
        self.emb_index_ = self.embeddings.index()
        strategy = PoolingStrategy.parse(self.train_pooling)
        pooled = np.vstack([pool_session(self._item_rows(s.items), strategy)
                            for s in train.sessions])
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        self.session_embeddings_ = np.divide(pooled, norms, out=np.zeros_like(pooled),
                                             where=norms > 0)
        return self

    def _item_rows(self, items: Sequence[str]) -> np.ndarray:
        try:
            return self.embeddings.vectors[[self.emb_index_[i] for i in items]]
        except KeyError as exc:
            raise EmbeddingError(f"no embedding for item {exc.args[0]!r}") from None

    def prompt_embedding(self, prompt: Sequence[str]) -> np.ndarray:
        if not prompt:
            raise ValueError("empty prompt")
        return pool_session(self._item_rows(prompt), PoolingStrategy.parse(self.prompt_pooling))

    def similarities(self, prompt: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "session_embeddings_")
        e = self.prompt_embedding(prompt)
        norm = np.linalg.norm(e)
        if norm == 0:
            return np.zeros(len(self.session_ids_))
        return self.session_embeddings_ @ (e / norm)

    def neighbors(self, prompt: Sequence[str]) -> list[str]:
        return self.session_ids_[self._neighbors(self.similarities(prompt))].tolist()

    def score_items(self, prompt: Sequence[str]) -> dict[str, float]:
        return self._scores_from_neighbors(self.similarities(prompt))

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        return self._recommend_from_scores(self.score_items(prompt), prompt, k)


class LLMSeqSim(Recommender):
    """Recommend the catalog items closest to the pooled prompt embedding.

    Ignores training interactions entirely; ``fit`` only prepares the
    (optionally reduced) catalog embeddings. Ties break on item id.
    """

    def __init__(self, embeddings: EmbeddingMatrix | None = None, pooling: str = "mean",
                 similarity: str = "cosine", allow_repeats: bool = True,
                 reduction: str = "identity", n_components: int | None = None,
                 renormalize: bool = True, seed: int = 0):
        self.embeddings = embeddings
        self.pooling = pooling
        self.similarity = similarity
        self.allow_repeats = allow_repeats
        self.reduction = reduction
        self.n_components = n_components
        self.renormalize = renormalize
        self.seed = seed

    def fit(self, train: Dataset | None = None, labels: Sequence | None = None):
        if self.embeddings is None:
            raise ValueError("LLMSeqSim requires item embeddings")
        if self.similarity not in ("cosine", "dot", "euclidean"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        order = np.argsort(np.array(self.embeddings.item_ids))
        self.item_ids_ = np.array(self.embeddings.item_ids)[order]
        X = self.embeddings.vectors[order]
        reducer = make_reducer(self.reduction, self.n_components, self.seed)
        if self.reduction == "lda":
            reducer.fit(X, np.asarray(labels)[order])
        else:
            reducer.fit(X)
        X = reducer.transform(X)
        if self.renormalize and self.reduction not in ("identity", "none"):
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
        self.reducer_ = reducer
        self.vectors_ = X
        self.item_index_ = {item: i for i, item in enumerate(self.item_ids_.tolist())}
        norms = np.linalg.norm(X, axis=1)
        self.unit_vectors_ = np.divide(X, norms[:, None], out=np.zeros_like(X),
                                       where=norms[:, None] > 0)
        return self

    def session_embedding(self, prompt: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "vectors_")
        if not prompt:
            raise ValueError("empty prompt")
        missing = [i for i in prompt if i not in self.item_index_]
        if missing:
            raise EmbeddingError(f"no embedding for prompt items {missing}")
        rows = self.vectors_[[self.item_index_[i] for i in prompt]]
        return pool_session(rows, PoolingStrategy.parse(self.pooling))

    def scores(self, prompt: Sequence[str]) -> np.ndarray:
        e = self.session_embedding(prompt)
        if self.similarity == "cosine":
            norm = np.linalg.norm(e)
            return self.unit_vectors_ @ (e / norm) if norm > 0 else np.zeros(len(self.item_ids_))
        if self.similarity == "dot":
            return self.vectors_ @ e
        return -np.linalg.norm(self.vectors_ - e, axis=1)

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        exclude = None if self.allow_repeats else set(prompt)
        return rank_items(self.item_ids_, self.scores(prompt), k, exclude=exclude)


# functional forms mirroring the estimator classes


def fit_sknn(train: Dataset, k_neighbors: int) -> SKNN:
    return SKNN(k_neighbors).fit(train)


def score_sknn(model: SKNN, prompt: Sequence[str]) -> dict[str, float]:
    return model.score_items(prompt)


def fit_sknn_emb(train: Dataset, embeddings: EmbeddingMatrix, train_pooling: str,
                 prompt_pooling: str, k_neighbors: int) -> SKNNEmb:
    return SKNNEmb(embeddings, k_neighbors, train_pooling, prompt_pooling).fit(train)


def score_sknn_emb(model: SKNNEmb, prompt: Sequence[str]) -> dict[str, float]:
    return model.score_items(prompt)


def most_popular(train: Dataset) -> MostPopular:
    return MostPopular().fit(train)


def recommend_llmseqsim(prompt: Sequence[str], embeddings: EmbeddingMatrix,
                        strategy: str = "mean", k: int = 20,
                        allow_repeats: bool = True) -> RecommendationList:
    return LLMSeqSim(embeddings, strategy, allow_repeats=allow_repeats).fit().recommend(prompt, k)


# ---------------------------------------------------------------------------
# persistence: parameters plus training sessions; embeddings are referenced by path


def save_recommender(model: Recommender, train: Dataset, directory: str | os.PathLike,
                     embeddings_path: str | None = None) -> Path:
    from .dataset import save_dataset

    directory = Path(directory)
    params = model.get_params()
    if "embeddings" not in params:
        embeddings_path = None
    params.pop("embeddings", None)
    meta = {"class": type(model).__name__, "params": params, "embeddings_path": embeddings_path}
    save_dataset(train, directory / "train")
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "model.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return directory


def load_recommender(directory: str | os.PathLike) -> Recommender:
    from .dataset import load_dataset

    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    cls = {c.__name__: c for c in (MostPopular, SKNN, SKNNEmb, LLMSeqSim)}[meta["class"]]
    params = dict(meta["params"])
    if meta.get("embeddings_path"):
        params["embeddings"] = EmbeddingMatrix.load(meta["embeddings_path"])
    return cls(**params).fit(load_dataset(directory / "train"))

