"""Decoding-time retrieval pipeline: Recall, Rerank, partitioned attention
with an exact online-softmax merge, and the per-step driver that also
triggers the FIFO centroid update.

Recall is coarse: pick the C' centroids most cosine-similar to the current
query (per KV head, via GQA group-max) and union their token lists.
Rerank is fine: score the recalled tokens exactly and keep the top rho'.
Attention runs separately over the sparse (offloaded) and static partitions
and the partials merge exactly; the two calls are independent and may run
concurrently. The centroid update happens strictly after the step's
retrieval reads (happens-after ordering within a step).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .index import EMPTY_SLOT, QueryCentroidIndex
from .store import KvStore
from .tensor_ops import cosine_to_rows, group_max, top_k

PerHead = list  # [batch][kv_head] nested lists of ndarrays


@dataclass
class RecallResult:
    """Selected centroid slots plus the deduplicated union of their lists.

    alpha is the dedup coefficient |recalled| / (C' * rho), in (0, 1] when
    anything was recalled.
    """

    selected: np.ndarray          # [b, g, C'] centroid slots
    recalled: PerHead             # [b][g] -> int64 ids, first-occurrence order
    recall_len: np.ndarray        # [b, g]
    alpha: np.ndarray             # [b, g]


@dataclass
class RerankResult:
    sparse_ids: PerHead           # [b][g] -> int64 ids, score-descending
    rerank_len: np.ndarray        # [b, g] = min(rho', recall_len)


@dataclass
class AttentionPartial:
    """Partial attention over one token set: output vector plus the online
    softmax statistics (running row max, running denominator) that make the
    two-partition merge exact."""

    out: np.ndarray               # [b, h, d] float32
    row_max: np.ndarray           # [b, h] float64
    denom: np.ndarray             # [b, h] float64


@dataclass
class DecodeConfig:
    c_prime: int
    rho_prime: int
    use_dcu: bool = True
    use_rerank: bool = True
    keep_sets: bool = False       # retain id arrays on trace rows (bench mode)

    def __post_init__(self):
        if self.c_prime < 1:
            raise ConfigError(f"c_prime must be >= 1, got {self.c_prime}")
        if self.rho_prime < 1:
            raise ConfigError(f"rho_prime must be >= 1, got {self.rho_prime}")


@dataclass
class TraceRow:
    """Per-step record for offline analysis."""

    step: int
    recall_len: int
    alpha: float
    rerank_len: int
    sparse_digest: str
    macs_rerank_qk: int = 0
    macs_sparse_qk: int = 0
    macs_sparse_wv: int = 0
    recall_at_k: float | None = None
    round_index: int | None = None
    recalled: PerHead | None = None
    sparse: PerHead | None = None

    def as_record(self) -> dict:
        rec = {
            "step": self.step,
            "recall_len": self.recall_len,
            "alpha": round(self.alpha, 6),
            "rerank_len": self.rerank_len,
            "sparse_digest": self.sparse_digest,
            "macs_rerank_qk": self.macs_rerank_qk,
            "macs_sparse_qk": self.macs_sparse_qk,
            "macs_sparse_wv": self.macs_sparse_wv,
        }
        if self.recall_at_k is not None:
            rec["recall_at_k"] = round(self.recall_at_k, 6)
        if self.round_index is not None:
            rec["round"] = self.round_index
        return rec


@dataclass
class DecodeState:
    store: KvStore
    index: QueryCentroidIndex
    config: DecodeConfig
    oracle: object | None = None  # needs .topk(query, k, scope) when set
    step: int = 0
    trace: list = field(default_factory=list)


def _as_query_bh(query: np.ndarray, b: int, h: int, d: int) -> np.ndarray:
    query = np.asarray(query, dtype=np.float32)
    if query.ndim == 4:
        if query.shape != (b, h, 1, d):
            raise ShapeError(f"query shape {query.shape} != {(b, h, 1, d)}")
        query = query[:, :, 0, :]
    if query.shape != (b, h, d):
        raise ShapeError(f"query shape {query.shape} != {(b, h, d)}")
    return query


def recall(index: QueryCentroidIndex, query: np.ndarray, c_prime: int) -> RecallResult:
    """Select top-c_prime centroids per KV head by cosine similarity and
    union their lists, dropping empty slots and duplicates (first occurrence
    kept)."""
    if index.capacity == 0:
        raise ConfigError("recall: empty index")
    if c_prime < 1 or c_prime > index.capacity:
        raise ConfigError(f"recall: c_prime {c_prime} outside [1, {index.capacity}]")
    lay = index.layout
    b, h, g = lay.batch, lay.query_heads, lay.kv_heads
    query = _as_query_bh(query, b, h, lay.head_dim)

    cos = cosine_to_rows(query, index.centroid_queries)          # [b, h, C]
    grouped = cos.reshape(b, g, lay.group_size, index.capacity).max(axis=2)

    selected = np.empty((b, g, c_prime), dtype=np.int64)
    recalled: PerHead = []
    recall_len = np.zeros((b, g), dtype=np.int64)
    alpha = np.zeros((b, g), dtype=np.float64)
    for bi in range(b):
        per_g = []
        for gi in range(g):
            slots = top_k(grouped[bi, gi], c_prime)
            selected[bi, gi] = slots
            cat = index.lists[bi, gi, slots].ravel()
            cat = cat[cat != EMPTY_SLOT].astype(np.int64)
            if cat.size:
                _, first = np.unique(cat, return_index=True)
                ids = cat[np.sort(first)]
            else:
                ids = cat
            per_g.append(ids)
            recall_len[bi, gi] = ids.size
            denom = c_prime * index.rho
            alpha[bi, gi] = ids.size / denom if denom else 0.0
        recalled.append(per_g)
    return RecallResult(selected, recalled, recall_len, alpha)


def _scores_over_ids(store: KvStore, query: np.ndarray, ids_bg: PerHead):
    """Per-(batch, kv_head) attention logits of the current query against the
    given token ids: list[b][g] of [group_size, L] float64 plus the GQA
    group-max rows [L]. Returns (per_head_logits, grouped, macs)."""
    lay = store.layout
    gs, d = lay.group_size, lay.head_dim
    scale = 1.0 / math.sqrt(d)
    logits: PerHead = []
    grouped: PerHead = []
    macs = 0
    for bi in range(lay.batch):
        row_l, row_g = [], []
        for gi in range(lay.kv_heads):
            ids = ids_bg[bi][gi]
            keys = store.gather(bi, gi, ids).astype(np.float64)
            qh = query[bi, gi * gs:(gi + 1) * gs].astype(np.float64)
            sc = (qh @ keys.T) * scale
            macs += gs * ids.size * d
            row_l.append(sc)
            row_g.append(sc.max(axis=0) if ids.size else sc.reshape(0))
        logits.append(row_l)
        grouped.append(row_g)
    return logits, grouped, macs


def rerank(store: KvStore, query: np.ndarray, recall_result: RecallResult,
           rho_prime: int) -> tuple[RerankResult, PerHead]:
    """Score recalled tokens exactly and keep the top-rho' per KV head.

    Returns the rerank result and the group-max score rows over the recalled
    ids, which the FIFO centroid update reuses.
    """
    lay = store.layout
    if int(recall_result.recall_len.sum()) == 0:
        raise ConfigError("rerank: empty recall set")
    query = _as_query_bh(query, lay.batch, lay.query_heads, lay.head_dim)
    _, grouped, _ = _scores_over_ids(store, query, recall_result.recalled)
    sparse: PerHead = []
    rerank_len = np.zeros((lay.batch, lay.kv_heads), dtype=np.int64)
    for bi in range(lay.batch):
        per_g = []
        for gi in range(lay.kv_heads):
            ids = recall_result.recalled[bi][gi]
            keep = top_k(grouped[bi][gi], min(rho_prime, ids.size))
            per_g.append(ids[keep])
            rerank_len[bi, gi] = keep.size
        sparse.append(per_g)
    return RerankResult(sparse, rerank_len), grouped


def _partial_over_ids(store: KvStore, query: np.ndarray, ids_bg: PerHead):
    """Attention partial over per-head id sets, plus group-max logits and the
    dot-product MAC counts (qk, wv)."""
    lay = store.layout
    b, h, gs, d = lay.batch, lay.query_heads, lay.group_size, lay.head_dim
    out = np.zeros((b, h, d), dtype=np.float32)
    row_max = np.full((b, h), -np.inf, dtype=np.float64)
    denom = np.zeros((b, h), dtype=np.float64)
    logits, grouped, qk_macs = _scores_over_ids(store, query, ids_bg)
    wv_macs = 0
    for bi in range(b):
        for gi in range(lay.kv_heads):
            ids = ids_bg[bi][gi]
            if ids.size == 0:
                raise ConfigError("attention over an empty id set")
            values = store.gather(bi, gi, ids, "values").astype(np.float64)
            sc = logits[bi][gi]                       # [gs, L]
            m = sc.max(axis=1)
            e = np.exp(sc - m[:, None])
            l = e.sum(axis=1)
            heads = slice(gi * gs, (gi + 1) * gs)
            out[bi, heads] = ((e @ values) / l[:, None]).astype(np.float32)
            wv_macs += gs * ids.size * d
            row_max[bi, heads] = m
            denom[bi, heads] = l
    return AttentionPartial(out, row_max, denom), grouped, qk_macs, wv_macs


def sparse_attention(store: KvStore, query: np.ndarray, ids) -> AttentionPartial:
    """Scaled dot-product attention restricted to `ids`, retaining the
    online-softmax statistics. `ids` is either one id sequence shared by all
    heads or a [batch][kv_head] nested list. Every head's set must be
    nonempty and free of duplicates."""
    lay = store.layout
    query = _as_query_bh(query, lay.batch, lay.query_heads, lay.head_dim)
    ids_bg = _normalize_ids(store, ids)
    for per_g in ids_bg:
        for arr in per_g:
            if arr.size == 0:
                raise ConfigError("sparse_attention: empty id set")
            if np.unique(arr).size != arr.size:
                raise ConfigError("sparse_attention: duplicate ids")
    partial, _, _, _ = _partial_over_ids(store, query, ids_bg)
    return partial


def _normalize_ids(store: KvStore, ids) -> PerHead:
    lay = store.layout
    if isinstance(ids, np.ndarray) or (ids and np.isscalar(ids[0])) or ids == []:
        shared = np.asarray(ids, dtype=np.int64)
        return [[shared for _ in range(lay.kv_heads)] for _ in range(lay.batch)]
    return [[np.asarray(a, dtype=np.int64) for a in per_g] for per_g in ids]


def merge(a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """Exact combination of two attention partials over disjoint token sets
    for the same query. Commutative and associative up to float tolerance."""
    m = np.maximum(a.row_max, b.row_max)
    wa = np.exp(a.row_max - m) * a.denom
    wb = np.exp(b.row_max - m) * b.denom
    denom = wa + wb
    out = (a.out.astype(np.float64) * wa[..., None]
           + b.out.astype(np.float64) * wb[..., None]) / denom[..., None]
    return AttentionPartial(out.astype(np.float32), m, denom)


def acceleration_factor(l_recall: int, l_rerank: int) -> float:
    """Cost of the rerank-then-attend path relative to attending the whole
    recall set: (L_recall + 2 * L_rerank) / (2 * L_recall)."""
    if l_recall <= 0:
        raise ConfigError(f"acceleration_factor: L_recall must be positive, got {l_recall}")
    return (l_recall + 2.0 * l_rerank) / (2.0 * l_recall)


def _digest(ids_bg: PerHead) -> str:
    h = hashlib.sha256()
    for per_g in ids_bg:
        for arr in per_g:
            h.update(np.asarray(arr, dtype=np.int64).tobytes())
            h.update(b"|")
    return h.hexdigest()[:16]


def decode_step(state: DecodeState, query: np.ndarray) -> tuple[np.ndarray, TraceRow]:
    """One decoding step: recall, rerank, sparse + static attention, merge,
    then the FIFO centroid update (strictly after the retrieval reads).

    Returns the merged output [b, h, d] and the step's trace row. When the
    offloaded partition is unreachable (rho == 0 or nothing recalled) the
    static partition alone is the answer.
    """
    store, index, cfg = state.store, state.index, state.config
    lay = store.layout
    query = _as_query_bh(query, lay.batch, lay.query_heads, lay.head_dim)

    rec = recall(index, query, cfg.c_prime)
    total_recall = int(rec.recall_len.sum())

    row = TraceRow(step=state.step, recall_len=total_recall,
                   alpha=float(rec.alpha.mean()), rerank_len=0, sparse_digest="")
    sparse_partial = None
    grouped_scores = None
    sparse_ids: PerHead | None = None

    if total_recall > 0:
        if rec.recall_len.min() == 0:
            raise ConfigError("decode_step: mixed empty/nonempty recall sets")
        if cfg.use_rerank:
            rr, grouped_scores = rerank(store, query, rec, cfg.rho_prime)
            sparse_ids = rr.sparse_ids
            row.rerank_len = int(rr.rerank_len.sum())
            row.macs_rerank_qk = lay.group_size * lay.head_dim * total_recall
            sparse_partial, _, qk, wv = _partial_over_ids(store, query, sparse_ids)
        else:
            sparse_ids = [[ids for ids in per_g] for per_g in rec.recalled]
            row.rerank_len = total_recall
            sparse_partial, grouped_scores, qk, wv = _partial_over_ids(store, query, sparse_ids)
        row.macs_sparse_qk, row.macs_sparse_wv = qk, wv
        row.sparse_digest = _digest(sparse_ids)

    static_ids = store.static_ids()
    if static_ids.size:
        static_bg = [[static_ids for _ in range(lay.kv_heads)] for _ in range(lay.batch)]
        static_partial, _, _, _ = _partial_over_ids(store, query, static_bg)
    else:
        static_partial = None

    if sparse_partial is not None and static_partial is not None:
        merged = merge(sparse_partial, static_partial)
    elif static_partial is not None:
        merged = static_partial
    elif sparse_partial is not None:
        merged = sparse_partial
    else:
        raise ConfigError("decode_step: no attendable tokens in either partition")

    if cfg.use_dcu and total_recall > 0:
        index.fifo_update(query, grouped_scores, rec.recalled)

    if state.oracle is not None and sparse_ids is not None:
        n_off = store.offloaded_ids().size
        k = min(cfg.rho_prime, n_off)
        oracle_bg = state.oracle.topk(query, k, scope="offloaded")
        hits, total = 0, 0
        for bi in range(lay.batch):
            for gi in range(lay.kv_heads):
                truth = oracle_bg[bi][gi]
                hits += np.intersect1d(sparse_ids[bi][gi], truth).size
                total += truth.size
        row.recall_at_k = hits / total if total else 0.0

    if cfg.keep_sets:
        row.recalled = rec.recalled
        row.sparse = sparse_ids

    state.trace.append(row)
    state.step += 1
    return merged.out, row
