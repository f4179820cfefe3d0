"""Instance-retrieval evaluation and metric-learning toolkit."""

__version__ = "0.1.0"

from .core import (EmbeddingSet, EvalConfig, ItemRecord, l2_normalize, load_manifest,
                   read_embeddings, save_manifest, write_embeddings)
from .distkernel import DistanceStore, TileSpec, compute_distances, open_store, topk_per_query
from .errors import DivergenceError, RetrievalKitError, StorageError, ValidationError
from .metrics import (MetricsReport, RankedResult, acc_at_k, cross_domain_eval,
                      estimate_reranked_unconstrained, evaluate, mean_ap)
from .rerank import RerankParams, k_reciprocal_neighbors, rerank

__all__ = [
    "EmbeddingSet", "EvalConfig", "ItemRecord", "l2_normalize", "load_manifest",
    "read_embeddings", "save_manifest", "write_embeddings", "DistanceStore", "TileSpec",
    "compute_distances", "open_store", "topk_per_query", "DivergenceError", "RetrievalKitError",
    "StorageError", "ValidationError", "MetricsReport", "RankedResult", "acc_at_k",
    "cross_domain_eval", "estimate_reranked_unconstrained", "evaluate", "mean_ap",
    "RerankParams", "k_reciprocal_neighbors", "rerank",
]
