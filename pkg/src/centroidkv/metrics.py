"""Retrieval-quality metrics: recall@k, query-similarity structure, and the
deduplication coefficient sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .index import QueryCentroidIndex
from .retrieval import recall
from .store import KvStore
from .tensor_ops import cosine, top_k


def recall_at_k(predicted, oracle) -> float:
    """|predicted intersect oracle| / |oracle|."""
    oracle = np.asarray(oracle, dtype=np.int64)
    if oracle.size == 0:
        raise ConfigError("recall_at_k: oracle set is empty")
    predicted = np.asarray(predicted, dtype=np.int64)
    return float(np.intersect1d(predicted, oracle).size / oracle.size)


@dataclass(frozen=True)
class OverlapSample:
    """One (query similarity, top-k overlap) observation."""

    cos_sim: float
    overlap_ratio: float
    k: int


def overlap_scatter(query_pairs, store: KvStore, k: int,
                    batch: int = 0, kv_head: int = 0) -> list[OverlapSample]:
    """For each (qa, qb) pair: their cosine plus the overlap ratio of the
    exact top-k key sets retrieved by dot score against one head's keys."""
    all_ids = np.arange(store.total_tokens, dtype=np.int64)
    if k > all_ids.size:
        raise ConfigError(f"overlap_scatter: k={k} exceeds token count {all_ids.size}")
    keys = store.gather(batch, kv_head, all_ids).astype(np.float64)
    samples = []
    for qa, qb in query_pairs:
        qa = np.asarray(qa, dtype=np.float64).ravel()
        qb = np.asarray(qb, dtype=np.float64).ravel()
        sa = set(top_k((keys @ qa).astype(np.float32), k).tolist())
        sb = set(top_k((keys @ qb).astype(np.float32), k).tolist())
        samples.append(OverlapSample(cosine(qa, qb), len(sa & sb) / k, k))
    return samples


def least_squares_slope(samples: list[OverlapSample]) -> float:
    """Slope of overlap_ratio against cos_sim (the trend-line check)."""
    x = np.array([s.cos_sim for s in samples])
    y = np.array([s.overlap_ratio for s in samples])
    if x.size < 2 or np.allclose(x, x[0]):
        raise ConfigError("least_squares_slope: need at least two distinct abscissae")
    x = x - x.mean()
    return float((x @ (y - y.mean())) / (x @ x))


def cosine_distance_buckets(queries: np.ndarray, buckets, pairs_per_bucket: int,
                            rng: np.random.Generator):
    """Mean query-pair cosine at each position distance.

    queries is [b, h, n, d]; for each bucket distance the positions are
    sampled uniformly among pairs (p, p + distance) over random (b, h).
    Returns [(distance, mean_cosine), ...] in bucket order.
    """
    b, h, n, d = queries.shape
    out = []
    for dist in buckets:
        if dist >= n:
            raise ConfigError(f"bucket distance {dist} >= stream length {n}")
        ps = rng.integers(0, n - dist, size=pairs_per_bucket)
        bs = rng.integers(0, b, size=pairs_per_bucket)
        hs = rng.integers(0, h, size=pairs_per_bucket)
        a = queries[bs, hs, ps].astype(np.float64)
        c = queries[bs, hs, ps + dist].astype(np.float64)
        dots = np.einsum("nd,nd->n", a, c)
        norms = np.linalg.norm(a, axis=1) * np.linalg.norm(c, axis=1)
        out.append((int(dist), float(np.mean(dots / norms))))
    return out


def dedup_alpha_sweep(queries: np.ndarray, store: KvStore,
                      decode_queries: np.ndarray,
                      rho_list, c_list, cp_list):
    """Mean dedup coefficient over decode queries for each (rho, C, C').

    Rebuilds the index per (C, rho) and reruns recall for each C'; the index
    stays static (no FIFO update) so alpha isolates list overlap. Returns
    rows (rho, C, C', mean_alpha).
    """
    rows = []
    steps = decode_queries.shape[2]
    for cap in c_list:
        for rho in rho_list:
            idx = QueryCentroidIndex.build(queries, store, cap, rho)
            for cp in cp_list:
                if cp > cap:
                    continue
                alphas = []
                for t in range(steps):
                    res = recall(idx, decode_queries[:, :, t], cp)
                    alphas.append(res.alpha.mean())
                rows.append((rho, cap, cp, float(np.mean(alphas))))
    return rows


def write_alpha_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "C", "C_prime", "mean_alpha"])
        for rho, cap, cp, alpha in rows:
            writer.writerow([rho, cap, cp, f"{alpha:.6f}"])
