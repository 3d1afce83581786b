"""Query-centroid inverted file: construction, FIFO update, serialization.

The index stores, per batch element, the last C prefill query vectors as
"centroids" (all query heads kept, since recall needs them), and per
(batch, kv_head) one list of rho token IDs per centroid: the offloaded
tokens scoring highest against that centroid. Lists index ONLY the
offloaded region; static tokens are always attended via the resident
partition and listing them would double-count in the merged softmax.

During decoding the oldest centroid slot is overwritten in FIFO order with
the current query and its reranked top tokens, keeping the index aligned
with drifting queries.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .store import KvStore
from .tensor_ops import HeadLayout, dot_scores, group_max, top_k, top_k_rows

MAGIC = b"QIVF"
VERSION = 1

# Peak float64 score-block budget for blocked construction.
_BLOCK_BYTES = 256 * 1024 * 1024

EMPTY_SLOT = -1


class QueryCentroidIndex:
    """C centroid query vectors plus C inverted lists of rho token IDs per
    (batch, kv_head), managed as a FIFO ring."""

    def __init__(self, layout: HeadLayout, capacity: int, rho: int,
                 centroid_queries: np.ndarray, lists: np.ndarray,
                 fifo_head: np.ndarray | None = None):
        b, h, g, d = layout.batch, layout.query_heads, layout.kv_heads, layout.head_dim
        if centroid_queries.shape != (b, h, capacity, d):
            raise ShapeError(
                f"centroid_queries {centroid_queries.shape} != {(b, h, capacity, d)}")
        if lists.shape != (b, g, capacity, rho):
            raise ShapeError(f"lists {lists.shape} != {(b, g, capacity, rho)}")
        if lists.dtype != np.int32:
            raise ShapeError(f"lists must be int32, got {lists.dtype}")
        self.layout = layout
        self.capacity = capacity
        self.rho = rho
        self.centroid_queries = centroid_queries
        self.lists = lists
        self.fifo_head = np.zeros(b, dtype=np.int64) if fifo_head is None else fifo_head

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, queries: np.ndarray, store: KvStore,
              capacity: int, rho: int) -> "QueryCentroidIndex":
        """Build the index from prefill queries [b, h, s, d] and a
        partitioned store.

        The last `capacity` query positions become the centroids; each
        centroid's list holds the top-`rho` offloaded tokens by GQA-grouped
        attention score. Scores are computed centroid-block by centroid-block
        to bound peak memory.
        """
        if queries.ndim != 4:
            raise ShapeError(f"build: queries must be 4-D, got {queries.shape}")
        b, h, s, d = queries.shape
        layout = HeadLayout(batch=b, query_heads=h, kv_heads=store.layout.kv_heads,
                            seq_len=store.layout.seq_len, head_dim=d)
        if store.layout.head_dim != d or store.layout.batch != b:
            raise ShapeError(f"build: queries {queries.shape} do not match store layout")
        if capacity < 1 or capacity > s:
            raise ConfigError(f"build: capacity {capacity} outside [1, {s}]")
        off_ids = store.offloaded_ids()
        if rho < 0 or rho > off_ids.size:
            raise ConfigError(
                f"build: rho {rho} exceeds offloaded token count {off_ids.size}")
        g = layout.kv_heads

        centroids = np.ascontiguousarray(queries[:, :, s - capacity:, :])
        lists = np.full((b, g, capacity, rho), EMPTY_SLOT, dtype=np.int32)
        if rho > 0:
            off_keys = store.keys_view(off_ids)
            n = off_ids.size
            block = max(1, min(capacity, _BLOCK_BYTES // max(1, 8 * h * n)))
            for lo in range(0, capacity, block):
                hi = min(capacity, lo + block)
                scores = dot_scores(centroids[:, :, lo:hi], off_keys)
                grouped = group_max(scores, layout)
                for bi in range(b):
                    for gi in range(g):
                        pos = top_k_rows(grouped[bi, gi], rho)
                        lists[bi, gi, lo:hi] = off_ids[pos].astype(np.int32)
        return cls(layout, capacity, rho, centroids, lists)

    # -- dynamic centroid update --------------------------------------------

    def fifo_update(self, query: np.ndarray,
                    rerank_scores: Sequence[Sequence[np.ndarray]],
                    recalled_ids: Sequence[Sequence[np.ndarray]]) -> None:
        """Overwrite the oldest centroid slot with the current query and, per
        kv_head, the top-min(rho, len(recalled)) recalled IDs by rerank score.

        `query` is [b, h, d] or [b, h, 1, d]; `rerank_scores[b][g]` scores
        `recalled_ids[b][g]` elementwise. Shorter lists pad with -1. The FIFO
        cursor advances per batch element.
        """
        b, h, g, d = (self.layout.batch, self.layout.query_heads,
                      self.layout.kv_heads, self.layout.head_dim)
        query = np.asarray(query, dtype=np.float32)
        if query.ndim == 4:
            query = query[:, :, 0, :]
        if query.shape != (b, h, d):
            raise ShapeError(f"fifo_update: query shape {query.shape} != {(b, h, d)}")
        for bi in range(b):
            slot = int(self.fifo_head[bi] % self.capacity)
            self.centroid_queries[bi, :, slot, :] = query[bi]
            for gi in range(g):
                ids = np.asarray(recalled_ids[bi][gi], dtype=np.int64)
                scores = np.asarray(rerank_scores[bi][gi])
                if ids.shape != scores.shape:
                    raise ShapeError(
                        f"fifo_update: {ids.size} ids vs {scores.size} scores at ({bi},{gi})")
                keep = top_k(scores, min(self.rho, ids.size))
                row = np.full(self.rho, EMPTY_SLOT, dtype=np.int32)
                row[: keep.size] = ids[keep].astype(np.int32)
                self.lists[bi, gi, slot] = row
            self.fifo_head[bi] = slot + 1

    # -- accounting ---------------------------------------------------------

    def size_bytes(self) -> int:
        """Inverted-list footprint: batch * kv_heads * C * rho * 4 exactly."""
        return self.layout.batch * self.layout.kv_heads * self.capacity * self.rho * 4

    def check_lists(self, store: KvStore) -> None:
        """Assert list entries are distinct within each list and reference
        only offloaded token IDs."""
        b, g = self.layout.batch, self.layout.kv_heads
        for bi in range(b):
            for gi in range(g):
                for ci in range(self.capacity):
                    row = self.lists[bi, gi, ci]
                    ids = row[row != EMPTY_SLOT]
                    if np.unique(ids).size != ids.size:
                        raise AssertionError(f"duplicate ids in list ({bi},{gi},{ci})")
                    if ids.size and not store.is_offloaded(ids).all():
                        raise AssertionError(f"non-offloaded id in list ({bi},{gi},{ci})")

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        """Little-endian binary: magic, version, b/h/g/C/rho/d as u32, then
        centroid float32s and list int32s. Round-trips bit-exactly; the FIFO
        cursor is not part of the format and resets on load."""
        header = MAGIC + struct.pack(
            "<7I", VERSION, self.layout.batch, self.layout.query_heads,
            self.layout.kv_heads, self.capacity, self.rho, self.layout.head_dim)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.centroid_queries.astype("<f4", copy=False).tobytes())
            fh.write(self.lists.astype("<i4", copy=False).tobytes())

    @classmethod
    def load(cls, path, seq_len: int | None = None) -> "QueryCentroidIndex":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 4 + 28 or blob[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic (expected {MAGIC!r})")
        version, b, h, g, cap, rho, d = struct.unpack_from("<7I", blob, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        cq_bytes = b * h * cap * d * 4
        li_bytes = b * g * cap * rho * 4
        expected = 32 + cq_bytes + li_bytes
        if len(blob) != expected:
            raise FormatError(
                f"{path}: expected {expected} bytes, found {len(blob)} (offset 32)")
        cq = np.frombuffer(blob, dtype="<f4", count=b * h * cap * d, offset=32)
        li = np.frombuffer(blob, dtype="<i4", count=b * g * cap * rho, offset=32 + cq_bytes)
        layout = HeadLayout(batch=b, query_heads=h, kv_heads=g,
                            seq_len=cap if seq_len is None else seq_len, head_dim=d)
        return cls(layout, cap, rho,
                   cq.reshape(b, h, cap, d).copy(),
                   li.reshape(b, g, cap, rho).astype(np.int32))
