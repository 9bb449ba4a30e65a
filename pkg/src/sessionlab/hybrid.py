"""Popularity-aware hybrids around LLMSeqSim, and the popularity/position diagnostics."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset, Session
from .recommenders import LLMSeqSim, RecommendationList, Recommender

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PopularityTable:
    counts: Mapping[str, int]

    @classmethod
    def from_dataset(cls, train: Dataset) -> "PopularityTable":
        return cls(dict(train.item_counts()))

    def count(self, item: str) -> int:
        return self.counts.get(item, 0)

    def quantile(self, q: float) -> float:
        if not 0 <= q <= 1:
            raise ValueError(f"quantile must be in [0, 1], got {q}")
        return float(np.quantile(np.fromiter(self.counts.values(), dtype=np.float64), q))

    def cutoff(self, q: float) -> float:
        """Popularity threshold for a quantile; 0 and 1 map to -inf and +inf."""
        if q <= 0:
            return -np.inf
        if q >= 1:
            return np.inf
        return self.quantile(q)


class SwitchHybrid(BaseEstimator):
    """Route each prompt by the training popularity of its last item.

    If ``count(last) < cutoff`` the unpopular-item model answers, otherwise the
    popular-item model does. ``cutoff_quantile=0`` always routes to the popular
    model and ``cutoff_quantile=1`` always to the unpopular one, unseen items
    included.
    """

    def __init__(self, unpopular_model: Recommender | None = None,
                 popular_model: Recommender | None = None, cutoff_quantile: float = 0.5,
                 fit_inner: bool = False):
        self.unpopular_model = unpopular_model
        self.popular_model = popular_model
        self.cutoff_quantile = cutoff_quantile
        self.fit_inner = fit_inner

    def fit(self, train: Dataset):
        if not 0 <= self.cutoff_quantile <= 1:
            raise ValueError("cutoff_quantile must be in [0, 1]")
        if self.fit_inner:
            self.unpopular_model.fit(train)
            self.popular_model.fit(train)
        self.popularity_ = PopularityTable.from_dataset(train)
        self.threshold_ = self.popularity_.cutoff(self.cutoff_quantile)
        return self

    def route(self, prompt: Sequence[str]) -> str:
        check_is_fitted(self, "popularity_")
        if not prompt:
            raise ValueError("empty prompt")
        return "unpopular" if self.popularity_.count(prompt[-1]) < self.threshold_ else "popular"

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        route = self.route(prompt)
        model = self.unpopular_model if route == "unpopular" else self.popular_model
        try:
            return model.recommend(prompt, k)
        except Exception as exc:
            raise type(exc)(f"{route} model {type(model).__name__}: {exc}") from exc

    def recommend_many(self, prompts, k: int = 20):
        return [self.recommend(p, k) for p in prompts]


class FilteredHybrid(BaseEstimator):
    """LLMSeqSim with a minimum-popularity filter and an optional diversity filter.

    The base ranking is over-fetched ``overfetch * k`` deep, then items below the
    popularity quantile are dropped, then (if ``diversity_threshold`` is set) any
    item whose cosine to an already kept item exceeds the threshold.
    """

    def __init__(self, base: LLMSeqSim | None = None, pop_threshold_quantile: float = 0.0,
                 diversity_threshold: float | None = None, overfetch: int = 5,
                 fit_inner: bool = False):
        self.base = base
        self.pop_threshold_quantile = pop_threshold_quantile
        self.diversity_threshold = diversity_threshold
        self.overfetch = overfetch
        self.fit_inner = fit_inner

    def fit(self, train: Dataset):
        if not 0 <= self.pop_threshold_quantile <= 1:
            raise ValueError("pop_threshold_quantile must be in [0, 1]")
        if self.fit_inner:
            self.base.fit(train)
        check_is_fitted(self.base, "vectors_")
        self.popularity_ = PopularityTable.from_dataset(train)
        q = self.pop_threshold_quantile
        self.threshold_ = -np.inf if q <= 0 else self.popularity_.quantile(q)
        return self

    def candidates(self, prompt: Sequence[str], k: int) -> RecommendationList:
        return self.base.recommend(prompt, self.overfetch * k)

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        check_is_fitted(self, "popularity_")
        ranked = self.candidates(prompt, k)
        kept_items, kept_scores, kept_vecs = [], [], []
        for item, score in ranked:
            if self.popularity_.count(item) < self.threshold_:
                continue
            if self.diversity_threshold is not None:
                vec = self.base.unit_vectors_[self.base.item_index_[item]]
                if kept_vecs and float(np.max(np.vstack(kept_vecs) @ vec)) > self.diversity_threshold:
                    continue
                kept_vecs.append(vec)
            kept_items.append(item)
            kept_scores.append(score)
            if len(kept_items) == k:
                break
        short = len(kept_items) < k
        if short:
            logger.debug("filtered hybrid returned %d < %d items", len(kept_items), k)
        return RecommendationList(tuple(kept_items), tuple(kept_scores), short)

    def recommend_many(self, prompts, k: int = 20):
        return [self.recommend(p, k) for p in prompts]


def recommend_switch(prompt, cutoff_quantile, model_unpopular, model_popular, k, train):
    return SwitchHybrid(model_unpopular, model_popular, cutoff_quantile).fit(train).recommend(prompt, k)


def recommend_filtered(prompt, base, pop_threshold_quantile, diversity_threshold, k, train):
    return FilteredHybrid(base, pop_threshold_quantile, diversity_threshold).fit(train).recommend(prompt, k)


# ---------------------------------------------------------------------------
# diagnostics


def _hit(model, prompt: Sequence[str], truth: str, k: int) -> int:
    return int(truth in model.recommend(prompt, k).items)


def popularity_bucket_hit_rates(model, test: Sequence[tuple[Session, str]],
                                popularity: PopularityTable | Counter | Mapping[str, int],
                                n_buckets: int = 10, k: int = 20) -> list[dict]:
    """HR@k per bucket of last-prompt-item popularity.

    Bucket edges are quantiles of the last-item popularity over the test prompts.
    Buckets nobody falls into report ``hr = None``.
    """
    if not test:
        raise ValueError("empty test set")
    if not isinstance(popularity, PopularityTable):
        popularity = PopularityTable(dict(popularity))
    pops = np.array([popularity.count(p.items[-1]) for p, _ in test], dtype=np.float64)
    edges = np.quantile(pops, np.linspace(0, 1, n_buckets + 1))
    bucket = np.clip(np.searchsorted(edges[1:-1], pops, side="right"), 0, n_buckets - 1)
    hits = np.array([_hit(model, p.items, t, k) for p, t in test])
    report = []
    for b in range(n_buckets):
        mask = bucket == b
        n = int(mask.sum())
        report.append({"bucket": b, "lower": float(edges[b]), "upper": float(edges[b + 1]),
                       "n": n, "hr": float(hits[mask].mean()) if n else None})
    return report


def position_hit_rates(model, test: Sequence[tuple[Session, str]], max_position: int = 10,
                       k: int = 20) -> list[dict]:
    """HR@k when the item ``position`` places from the end is treated as the last one.

    Position 1 is the untouched prompt; position j drops the final j-1 prompt items.
    """
    report = []
    for j in range(1, max_position + 1):
        hits = [_hit(model, p.items[: len(p) - j + 1], t, k) for p, t in test if len(p) >= j]
        report.append({"position": j, "n": len(hits),
                       "hr": float(np.mean(hits)) if hits else None})
    return report
