"""sessionlab: sequential recommendation with LLM item embeddings."""

__version__ = "0.1.0"

from .dataset import (Dataset, Fold, Interaction, ItemInfo, Session, SplitSpec, build_lda_classes,
                      ingest, leave_one_out, make_validation_folds, p_core_filter, temporal_split)
from .embeddings import EmbeddingMatrix, fetch_embeddings, normalize, synthetic_embeddings
from .evaluation import MetricsReport, evaluate
from .hybrid import FilteredHybrid, PopularityTable, SwitchHybrid
from .neural import GRURecommender
from .pooling import PoolingStrategy, decay_weights, pool_session
from .recommenders import SKNN, LLMSeqSim, MostPopular, RecommendationList, SKNNEmb
from .reduction import (IdentityReducer, LDAReducer, PCAReducer, RandomProjectionReducer,
                        fit_lda, fit_pca, fit_random_projection)

__all__ = [
    "Dataset", "Fold", "Interaction", "ItemInfo", "Session", "SplitSpec", "build_lda_classes",
    "ingest", "leave_one_out", "make_validation_folds", "p_core_filter", "temporal_split",
    "EmbeddingMatrix", "fetch_embeddings", "normalize", "synthetic_embeddings",
    "MetricsReport", "evaluate", "FilteredHybrid", "PopularityTable", "SwitchHybrid",
    "GRURecommender", "PoolingStrategy", "decay_weights", "pool_session", "SKNN", "LLMSeqSim",
    "MostPopular", "RecommendationList", "SKNNEmb", "IdentityReducer", "LDAReducer",
    "PCAReducer", "RandomProjectionReducer", "fit_lda", "fit_pca", "fit_random_projection",
]
