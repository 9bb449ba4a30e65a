"""Name-based construction of recommenders and their default search spaces."""

from __future__ import annotations

from typing import Any, Mapping

from .dataset import Fold
from .embeddings import EmbeddingMatrix
from .evaluation import evaluate
from .hybrid import FilteredHybrid, SwitchHybrid
from .neural import GRURecommender
from .recommenders import SKNN, LLMSeqSim, MostPopular, SKNNEmb

EMBEDDING_MODELS = {"llmseqsim", "sknn_emb", "gru", "hybrid_filter"}
MODELS = ("most_popular", "sknn", "sknn_emb", "llmseqsim", "gru", "hybrid_switch", "hybrid_filter")

_POOLINGS = ["mean", "last_item", "weighted:constant_linear", "weighted:scaling_linear",
             "weighted:scaling_quadratic", "weighted:scaling_cubic", "weighted:log",
             "weighted:harmonic", "weighted:squared_harmonic"]

DEFAULT_SPACES: dict[str, dict] = {
    "most_popular": {"_": [None]},
    "sknn": {"k_neighbors": {"type": "int", "low": 10, "high": 500, "log": True}},
    "sknn_emb": {"k_neighbors": {"type": "int", "low": 10, "high": 500, "log": True},
                 "train_pooling": _POOLINGS, "prompt_pooling": _POOLINGS},
    "llmseqsim": {"pooling": _POOLINGS, "reduction": ["identity", "pca", "rp"],
                  "n_components": [128, 512]},
    "gru": {"embedding_dim": [16, 32, 64], "learning_rate": {"type": "float", "low": 1e-3,
                                                             "high": 0.3, "log": True},
            "epochs": [5, 10, 20]},
    "hybrid_filter": {"pop_threshold_quantile": [round(0.1 * i, 1) for i in range(11)]},
    "hybrid_switch": {"cutoff_quantile": [round(0.1 * i, 1) for i in range(11)]},
}


def build_model(name: str, params: Mapping[str, Any] | None = None,
                embeddings: EmbeddingMatrix | None = None):
    """Instantiate an unfitted recommender by registry name."""
    params = {k: v for k, v in dict(params or {}).items() if k != "_"}
    if name == "most_popular":
        return MostPopular()
    if name == "sknn":
        return SKNN(**params)
    if name == "sknn_emb":
        return SKNNEmb(embeddings, **params)
    if name == "llmseqsim":
        if params.get("reduction", "identity") in ("identity", "none"):
            params.pop("n_components", None)
        elif embeddings is not None and "n_components" in params:
            params["n_components"] = min(params["n_components"], embeddings.dim,
                                         len(embeddings.item_ids) - 1)
        return LLMSeqSim(embeddings, **params)
    if name == "gru":
        if "embedding_dim" in params and "hidden_dim" not in params:
            params["hidden_dim"] = params["embedding_dim"]
        if embeddings is not None and params.pop("use_embeddings", True):
            params.setdefault("reduction", "pca" if embeddings.dim != params.get("embedding_dim", 64)
                              else "identity")
            return GRURecommender(embeddings=embeddings, **params)
        return GRURecommender(**params)
    if name == "hybrid_switch":
        unpopular = params.pop("unpopular_model", {"name": "llmseqsim"})
        popular = params.pop("popular_model", {"name": "sknn_emb"})
        return SwitchHybrid(build_model(unpopular["name"], unpopular.get("params"), embeddings),
                            build_model(popular["name"], popular.get("params"), embeddings),
                            fit_inner=True, **params)
    if name == "hybrid_filter":
        base = params.pop("base", {})
        return FilteredHybrid(build_model("llmseqsim", base, embeddings), fit_inner=True, **params)
    raise KeyError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")


def fold_objective(name: str, embeddings: EmbeddingMatrix | None = None,
                   base_params: Mapping[str, Any] | None = None, k: int = 20):
    """Objective for :func:`sessionlab.tune.search`: NDCG@k of one fold."""

    def objective(config: dict, fold: Fold) -> float:
        params = {**dict(base_params or {}), **config}
        model = build_model(name, params, embeddings).fit(fold.train)
        report = evaluate(model, (fold.train, fold.test, fold.train.catalog), ks=(k,))
        return report.metrics[k]["ndcg"]

    return objective
