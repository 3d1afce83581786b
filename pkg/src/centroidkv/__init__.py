"""Centroid-then-token sparse KV retrieval over attention tensors.

A decode step retrieves a small set of offloaded KV entries in two stages
(cosine recall against stored query centroids, then exact rerank), attends
the sparse and static partitions separately, and merges the partials
exactly via online-softmax statistics. Exact flat-scan oracles back every
approximation.
"""

from .errors import (ConfigError, DegenerateQueryWarning, FormatError,
                     InvariantError, ShapeError)
from .index import QueryCentroidIndex
from .oracle import FlatOracle, build_time_comparison, kmeans_ivf_build
from .retrieval import (AttentionPartial, DecodeConfig, DecodeState,
                        RecallResult, RerankResult, acceleration_factor,
                        decode_step, merge, recall, rerank, sparse_attention)
from .session import PrefillParams, prefill, run_decode, summarize_trace
from .store import KvStore
from .tensor_ops import (HeadLayout, cosine, dot_scores, group_max,
                         softmax_rows, top_k)
from .workload import (DriftConfig, apply_rope, generate, read_dump,
                       write_dump)

__version__ = "0.1.0"

__all__ = [
    "AttentionPartial", "ConfigError", "DecodeConfig", "DecodeState",
    "DegenerateQueryWarning", "DriftConfig", "FlatOracle", "FormatError",
    "HeadLayout", "InvariantError", "KvStore", "PrefillParams",
    "QueryCentroidIndex", "RecallResult", "RerankResult", "ShapeError",
    "acceleration_factor", "apply_rope", "build_time_comparison", "cosine",
    "decode_step", "dot_scores", "generate", "group_max", "kmeans_ivf_build",
    "merge", "prefill", "read_dump", "recall", "rerank", "run_decode",
    "softmax_rows", "sparse_attention", "summarize_trace", "top_k",
    "write_dump",
]
