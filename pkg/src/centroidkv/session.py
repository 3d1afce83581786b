"""End-to-end decode driver: prefill a store and index from tensors, then
step through the decode tail appending each token's K/V before attending.

The driver owns the write ordering the concurrency contract requires:
append and the FIFO centroid update are serialized between steps, while the
per-step sparse/static attention calls are free to run concurrently.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .index import QueryCentroidIndex
from .oracle import FlatOracle
from .retrieval import DecodeConfig, DecodeState, acceleration_factor, decode_step
from .store import KvStore


@dataclass
class PrefillParams:
    init_len: int
    local_len: int
    capacity: int
    rho: int


def prefill(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
            params: PrefillParams) -> tuple[KvStore, QueryCentroidIndex]:
    """Partition prefill K/V and build the centroid index from prefill Q."""
    store = KvStore.partition(keys, values, params.init_len, params.local_len,
                              query_heads=queries.shape[1])
    rho = min(params.rho, store.offloaded_ids().size)
    index = QueryCentroidIndex.build(queries, store, params.capacity, rho)
    return store, index


def run_decode(store: KvStore, index: QueryCentroidIndex, config: DecodeConfig,
               dec_q: np.ndarray, dec_k: np.ndarray, dec_v: np.ndarray,
               with_oracle: bool = False, round_of_step=None):
    """Append-and-attend over the decode tensors.

    dec_q is [b, h, T, d], dec_k/dec_v are [b, g, T, d]. Returns
    (outputs [b, h, T, d], trace rows).
    """
    steps = dec_q.shape[2]
    if dec_k.shape[2] != steps or dec_v.shape[2] != steps:
        raise ConfigError("run_decode: decode tensors disagree on step count")
    lay = store.layout
    state = DecodeState(store, index, config,
                        oracle=FlatOracle(store) if with_oracle else None)
    outputs = np.empty((lay.batch, lay.query_heads, steps, lay.head_dim),
                       dtype=np.float32)
    for t in range(steps):
        store.append(dec_k[:, :, t], dec_v[:, :, t])
        out, row = decode_step(state, dec_q[:, :, t])
        if round_of_step is not None:
            row.round_index = round_of_step(t)
        outputs[:, :, t] = out
    return outputs, state.trace


def summarize_trace(trace) -> dict:
    """Aggregate a decode trace: means, MAC totals, and the measured
    acceleration factor of the rerank path."""
    if not trace:
        return {"steps": 0}
    recalls = [r.recall_at_k for r in trace if r.recall_at_k is not None]
    total_recall = sum(r.recall_len for r in trace)
    total_rerank = sum(r.rerank_len for r in trace)
    summary = {
        "steps": len(trace),
        "mean_alpha": float(np.mean([r.alpha for r in trace])),
        "mean_recall_len": total_recall / len(trace),
        "mean_rerank_len": total_rerank / len(trace),
        "macs_rerank_qk": sum(r.macs_rerank_qk for r in trace),
        "macs_sparse_qk": sum(r.macs_sparse_qk for r in trace),
        "macs_sparse_wv": sum(r.macs_sparse_wv for r in trace),
    }
    if recalls:
        summary["mean_recall_at_k"] = float(np.mean(recalls))
    if total_recall > 0:
        summary["acceleration_factor"] = acceleration_factor(total_recall, total_rerank)
    rounds = sorted({r.round_index for r in trace if r.round_index is not None})
    if rounds:
        per_round = {}
        for rd in rounds:
            rows = [r for r in trace if r.round_index == rd]
            entry = {"steps": len(rows),
                     "mean_alpha": float(np.mean([r.alpha for r in rows]))}
            vals = [r.recall_at_k for r in rows if r.recall_at_k is not None]
            if vals:
                entry["mean_recall_at_k"] = float(np.mean(vals))
            per_round[str(rd)] = entry
        summary["rounds"] = per_round
    return summary


def write_trace_ndjson(trace, path) -> None:
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row.as_record(), sort_keys=True))
            fh.write("\n")


def write_metrics_csv(trace, path) -> None:
    cols = ["step", "round", "recall_len", "alpha", "rerank_len", "recall_at_k",
            "macs_rerank_qk", "macs_sparse_qk", "macs_sparse_wv"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in trace:
            writer.writerow([
                r.step,
                "" if r.round_index is None else r.round_index,
                r.recall_len,
                f"{r.alpha:.6f}",
                r.rerank_len,
                "" if r.recall_at_k is None else f"{r.recall_at_k:.6f}",
                r.macs_rerank_qk, r.macs_sparse_qk, r.macs_sparse_wv,
            ])
