"""Dense attention-math primitives every other module composes.

Conventions used throughout the package:

* Q tensors are shaped [batch, query_heads, rows, head_dim], K/V tensors
  [batch, kv_heads, rows, head_dim], both float32, C-contiguous.
* Accumulation happens in float64, results are stored as float32.
* Attention logits carry the standard 1/sqrt(head_dim) scale; softmax is
  rank-preserving per row, so all top-k selection runs on logits.
* Top-k ties break toward the smaller index, which makes every selection
  deterministic and testable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQueryWarning, ShapeError


@dataclass(frozen=True)
class HeadLayout:
    """Dimensions governing every tensor: batch, query heads, KV heads,
    sequence length, and head dim. Query heads are grouped onto KV heads
    (grouped-query attention), so query_heads must divide evenly."""

    batch: int
    query_heads: int
    kv_heads: int
    seq_len: int
    head_dim: int

    def __post_init__(self):
        if self.batch < 1 or self.query_heads < 1 or self.kv_heads < 1 or self.head_dim < 1:
            raise ShapeError(f"layout dimensions must be positive: {self}")
        if self.seq_len < 0:
            raise ShapeError(f"seq_len must be non-negative: {self}")
        if self.query_heads % self.kv_heads != 0:
            raise ShapeError(
                f"query_heads={self.query_heads} not divisible by kv_heads={self.kv_heads}"
            )

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads

    def q_shape(self, rows: int | None = None) -> tuple[int, int, int, int]:
        return (self.batch, self.query_heads, self.seq_len if rows is None else rows, self.head_dim)

    def kv_shape(self, rows: int | None = None) -> tuple[int, int, int, int]:
        return (self.batch, self.kv_heads, self.seq_len if rows is None else rows, self.head_dim)


def validate_tensor4(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Check the construction invariants of a 4-D float32 tensor: rank 4,
    contiguous float32 data, and no NaN/Inf entries. Returns the array."""
    if not isinstance(arr, np.ndarray) or arr.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D ndarray, got {getattr(arr, 'shape', type(arr))}")
    if arr.dtype != np.float32:
        raise ShapeError(f"{name}: expected float32 data, got {arr.dtype}")
    if not arr.flags.c_contiguous:
        raise ShapeError(f"{name}: expected C-contiguous (row-major) data")
    if arr.size and not np.isfinite(arr).all():
        raise ShapeError(f"{name}: contains NaN or Inf")
    return arr


def dot_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled attention logits between queries and keys.

    q is [b, h, m, d], k is [b, g, n, d] with h divisible by g; query head i
    reads KV head i // (h/g). Returns float32 [b, h, m, n] equal to
    (q . k) / sqrt(d), accumulated in float64.
    """
    if q.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"dot_scores: expected 4-D tensors, got {q.shape} and {k.shape}")
    b, h, m, d = q.shape
    b2, g, n, d2 = k.shape
    if b2 != b or d2 != d:
        raise ShapeError(f"dot_scores: incompatible shapes {q.shape} vs {k.shape}")
    if g < 1 or h % g != 0:
        raise ShapeError(f"dot_scores: {h} query heads not divisible by {g} kv heads")
    group = h // g
    q64 = q.reshape(b, g, group * m, d).astype(np.float64)
    k64 = k.astype(np.float64)
    scores = np.matmul(q64, k64.transpose(0, 1, 3, 2))
    scores *= 1.0 / math.sqrt(d)
    return scores.reshape(b, h, m, n).astype(np.float32)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-subtracted for stability.

    Rows sum to 1 within 1e-5 and the per-row rank order is preserved.
    """
    if scores.shape[-1] == 0:
        raise ShapeError("softmax_rows: empty rows")
    if not np.isfinite(scores).all():
        raise ShapeError("softmax_rows: input contains NaN or Inf")
    s64 = scores.astype(np.float64)
    s64 -= s64.max(axis=-1, keepdims=True)
    np.exp(s64, out=s64)
    s64 /= s64.sum(axis=-1, keepdims=True)
    return s64.astype(np.float32)


def group_max(scores: np.ndarray, layout: HeadLayout) -> np.ndarray:
    """Reduce per-query-head scores [b, h, m, n] to per-KV-head scores
    [b, g, m, n] by taking the max within each GQA group."""
    b, h, m, n = scores.shape
    if b != layout.batch or h != layout.query_heads:
        raise ShapeError(f"group_max: scores {scores.shape} do not match layout {layout}")
    g = layout.kv_heads
    return scores.reshape(b, g, layout.group_size, m, n).max(axis=2)


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, sorted descending by value and
    ascending by index on ties. k > len(values) clamps; k <= 0 is empty."""
    values = np.asarray(values)
    if values.ndim != 1:
        raise ShapeError(f"top_k: expected a 1-D row, got shape {values.shape}")
    n = values.shape[0]
    k = min(int(k), n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k == n:
        return np.argsort(-values, kind="stable").astype(np.int64)
    part = np.argpartition(values, n - k)[n - k:]
    kth = values[part].min()
    # argpartition breaks boundary ties arbitrarily; rebuild the selection
    # so ties at the kth value go to the smallest indices.
    above = np.flatnonzero(values > kth)
    tie_idx = np.flatnonzero(values == kth)[: k - above.size]
    chosen = np.concatenate([above, tie_idx])
    order = np.argsort(-values[chosen], kind="stable")
    return chosen[order].astype(np.int64)


def top_k_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top_k for a 2-D [rows, n] array; returns int64 [rows, k].

    Fast path uses a vectorized argpartition; rows with ties straddling the
    kth value fall back to the exact scalar path so the tie-break contract
    still holds.
    """
    if values.ndim != 2:
        raise ShapeError(f"top_k_rows: expected 2-D, got {values.shape}")
    rows, n = values.shape
    k = min(int(k), n)
    if k <= 0:
        return np.empty((rows, 0), dtype=np.int64)
    if k == n:
        return np.argsort(-values, axis=1, kind="stable").astype(np.int64)
    part = np.argpartition(values, n - k, axis=1)[:, n - k:]
    pv = np.take_along_axis(values, part, axis=1)
    # Sort each selection by (value desc, index asc); lexsort's last key is
    # the primary one.
    order = np.lexsort((part, -pv), axis=1)
    idx = np.take_along_axis(part, order, axis=1).astype(np.int64)
    kth = pv.min(axis=1, keepdims=True)
    ambiguous = np.flatnonzero((values == kth).sum(axis=1) > (pv == kth).sum(axis=1))
    for r in ambiguous:
        idx[r] = top_k(values[r], k)
    return idx


def cosine(qa: np.ndarray, qb: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    A zero-norm input is defined as similarity 0 and raises a
    DegenerateQueryWarning rather than an error.
    """
    qa = np.asarray(qa, dtype=np.float64).ravel()
    qb = np.asarray(qb, dtype=np.float64).ravel()
    if qa.shape != qb.shape:
        raise ShapeError(f"cosine: length mismatch {qa.shape} vs {qb.shape}")
    na = np.linalg.norm(qa)
    nb = np.linalg.norm(qb)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero-norm vector is defined as 0", DegenerateQueryWarning)
        return 0.0
    return float(np.clip(qa @ qb / (na * nb), -1.0, 1.0))


def cosine_to_rows(query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Cosine of one query [..., d] against stacked rows [..., C, d].

    Broadcasts over leading axes; zero-norm entries map to similarity 0
    (with a DegenerateQueryWarning), matching `cosine`.
    """
    q64 = query.astype(np.float64)
    r64 = rows.astype(np.float64)
    dots = np.einsum("...d,...cd->...c", q64, r64)
    qn = np.linalg.norm(q64, axis=-1)[..., None]
    rn = np.linalg.norm(r64, axis=-1)
    denom = qn * rn
    bad = denom == 0.0
    if bad.any():
        warnings.warn("cosine of a zero-norm vector is defined as 0", DegenerateQueryWarning)
        denom = np.where(bad, 1.0, denom)
        dots = np.where(bad, 0.0, dots)
    return np.clip(dots / denom, -1.0, 1.0)
