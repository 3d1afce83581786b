"""Exact references and build-time baselines.

FlatOracle does linear scans of every stored key: exact top-k by attention
score (the ground truth for recall@k everywhere else) and exact single-pass
attention (the numerical cross-check for the partitioned merge). KmeansIvf
is the classic clustering baseline whose construction cost the centroid
index is compared against.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .store import KvStore
from .tensor_ops import top_k


class FlatOracle:
    """Stateless exact reference over a KvStore."""

    def __init__(self, store: KvStore):
        self.store = store

    def _scope_ids(self, scope: str) -> np.ndarray:
        if scope == "all":
            return np.arange(self.store.total_tokens, dtype=np.int64)
        if scope == "offloaded":
            return self.store.offloaded_ids()
        raise ConfigError(f"unknown scope {scope!r}")

    def topk(self, query: np.ndarray, k: int, scope: str = "all"):
        """Exact top-k token IDs by scaled dot score, per (batch, kv_head)
        with the GQA group-max reduction and the standard tie-break."""
        lay = self.store.layout
        ids = self._scope_ids(scope)
        if ids.size == 0:
            raise ConfigError(f"flat_topk: empty scope {scope!r}")
        if k > ids.size:
            raise ConfigError(f"flat_topk: k={k} exceeds scope size {ids.size}")
        query = np.asarray(query, dtype=np.float32)
        if query.ndim == 4:
            query = query[:, :, 0, :]
        gs = lay.group_size
        scale = 1.0 / math.sqrt(lay.head_dim)
        out = []
        for bi in range(lay.batch):
            per_g = []
            for gi in range(lay.kv_heads):
                keys = self.store.gather(bi, gi, ids).astype(np.float64)
                qh = query[bi, gi * gs:(gi + 1) * gs].astype(np.float64)
                grouped = ((qh @ keys.T) * scale).max(axis=0).astype(np.float32)
                per_g.append(ids[top_k(grouped, k)])
            out.append(per_g)
        return out

    def full_attention(self, query: np.ndarray, scope: str = "all") -> np.ndarray:
        """Exact attention over the scope via a single softmax (no
        partitioning). Returns [b, h, d] float32."""
        lay = self.store.layout
        ids = self._scope_ids(scope)
        if ids.size == 0:
            raise ConfigError(f"full_attention: empty scope {scope!r}")
        query = np.asarray(query, dtype=np.float32)
        if query.ndim == 4:
            query = query[:, :, 0, :]
        gs = lay.group_size
        scale = 1.0 / math.sqrt(lay.head_dim)
        out = np.zeros((lay.batch, lay.query_heads, lay.head_dim), dtype=np.float32)
        for bi in range(lay.batch):
            for gi in range(lay.kv_heads):
                keys = self.store.gather(bi, gi, ids).astype(np.float64)
                values = self.store.gather(bi, gi, ids, "values").astype(np.float64)
                qh = query[bi, gi * gs:(gi + 1) * gs].astype(np.float64)
                logits = (qh @ keys.T) * scale
                logits -= logits.max(axis=1, keepdims=True)
                weights = np.exp(logits)
                weights /= weights.sum(axis=1, keepdims=True)
                out[bi, gi * gs:(gi + 1) * gs] = (weights @ values).astype(np.float32)
        return out


@dataclass
class KmeansIvf:
    """Lloyd's k-means index over one head's key vectors."""

    n_clusters: int
    max_iters: int
    centroids: np.ndarray                 # [n_clusters, d]
    assignments: np.ndarray               # token -> cluster
    iterations: int
    objective: list = field(default_factory=list)
    build_seconds: float = 0.0


def _kmeans_single(points: np.ndarray, n_clusters: int, max_iters: int,
                   rng: np.random.Generator, chunk: int = 8192):
    """Lloyd iterations from k-means++ initialization. Terminates on
    max_iters or an assignment fixpoint; an emptied cluster is re-seeded
    from the point farthest from its current centroid."""
    n, d = points.shape
    x = points.astype(np.float32)
    sq = (x.astype(np.float64) ** 2).sum(axis=1)

    # k-means++ seeding
    centroids = np.empty((n_clusters, d), dtype=np.float32)
    centroids[0] = x[rng.integers(n)]
    best = ((x - centroids[0]) ** 2).sum(axis=1).astype(np.float64)
    for ci in range(1, n_clusters):
        probs = best / best.sum() if best.sum() > 0 else np.full(n, 1.0 / n)
        centroids[ci] = x[rng.choice(n, p=probs)]
        best = np.minimum(best, ((x - centroids[ci]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    objective = []
    iters = 0
    for it in range(max_iters):
        iters = it + 1
        csq = (centroids.astype(np.float64) ** 2).sum(axis=1)
        new_labels = np.empty(n, dtype=np.int64)
        gain = np.empty(n, dtype=np.float64)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            # argmin ||x - c||^2 == argmax (2 x.c - ||c||^2)
            scores = 2.0 * (x[lo:hi] @ centroids.T).astype(np.float64) - csq
            new_labels[lo:hi] = scores.argmax(axis=1)
            gain[lo:hi] = scores.max(axis=1)
        objective.append(float(sq.sum() - gain.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=n_clusters)
        sums = np.zeros((n_clusters, d), dtype=np.float64)
        for j in range(d):
            sums[:, j] = np.bincount(labels, weights=x[:, j], minlength=n_clusters)
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # re-seed each empty cluster from the point farthest from its
            # current centroid (distinct points for distinct clusters)
            resid = ((x - centroids[labels]) ** 2).sum(axis=1)
            for ci in empty:
                far = resid.argmax()
                centroids[ci] = x[far]
                resid[far] = -np.inf
    return centroids, labels, iters, objective


def kmeans_ivf_build(store: KvStore, n_clusters: int, max_iters: int = 300,
                     seed: int = 0):
    """Build the k-means baseline over every (batch, kv_head)'s keys.
    Returns a nested [b][g] list of KmeansIvf with wall time recorded."""
    lay = store.layout
    if n_clusters < 1 or n_clusters > store.total_tokens:
        raise ConfigError(
            f"kmeans: n_clusters {n_clusters} outside [1, {store.total_tokens}]")
    all_ids = np.arange(store.total_tokens, dtype=np.int64)
    out = []
    for bi in range(lay.batch):
        per_g = []
        for gi in range(lay.kv_heads):
            rng = np.random.default_rng(seed + 7919 * (bi * lay.kv_heads + gi))
            points = store.gather(bi, gi, all_ids)
            t0 = time.perf_counter()
            cent, labels, iters, obj = _kmeans_single(points, n_clusters, max_iters, rng)
            dt = time.perf_counter() - t0
            per_g.append(KmeansIvf(n_clusters, max_iters, cent, labels, iters, obj, dt))
        out.append(per_g)
    return out


def build_time_comparison(sizes, head_dim: int = 32, capacity: int | None = None,
                          rho: int = 64, n_clusters: int = 512,
                          kmeans_iters: int = 300, seed: int = 0):
    """Wall-clock comparison of centroid-index construction against the
    300-iteration k-means baseline at each store size (number of keys).

    Returns rows of (method, size, seconds). HNSW is out of scope here and
    reported absent. Uses a single-head layout so `size` is exactly the
    number of key vectors scanned.
    """
    from .index import QueryCentroidIndex

    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError("build_time_comparison: sizes must be ascending")
    rows = []
    for size in sizes:
        rng = np.random.default_rng(seed)
        queries = rng.standard_normal((1, 1, size, head_dim), dtype=np.float32)
        keys = rng.standard_normal((1, 1, size, head_dim), dtype=np.float32)
        values = rng.standard_normal((1, 1, size, head_dim), dtype=np.float32)
        init_len = min(16, size // 8)
        local_len = min(64, size // 8)
        store = KvStore.partition(keys, values, init_len, local_len)
        cap = capacity if capacity is not None else max(1, min(2048, size // 16))
        eff_rho = min(rho, store.offloaded_ids().size)

        t0 = time.perf_counter()
        QueryCentroidIndex.build(queries, store, cap, eff_rho)
        rows.append(("qcivf", size, time.perf_counter() - t0))

        built = kmeans_ivf_build(store, min(n_clusters, size), kmeans_iters, seed)
        rows.append(("kmeans_ivf", size, built[0][0].build_seconds))
    return rows


def write_build_times_csv(rows, path) -> None:
    """CSV columns method,size,seconds with fixed 6-decimal seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "size", "seconds"])
        for method, size, seconds in rows:
            writer.writerow([method, size, f"{seconds:.6f}"])
