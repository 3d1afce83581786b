"""Partitioned Key/Value storage with stable global token IDs.

Tokens are split into three regions:

* initial:   the first `init_len` tokens (attention-sink prefix),
* local:     a sliding window over the most recent `local_len` tokens,
* offloaded: everything in between, reachable only through the index.

"GPU"/"CPU" from the source system are partition labels only; nothing here
models device placement. Appends happen at the tail, so each region is a
contiguous ID range and the three ranges partition [0, total_tokens) at all
times. Token IDs are never reassigned.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_ops import HeadLayout, validate_tensor4


class KvStore:
    """Per-(batch, kv_head) token-major key/value arrays plus the partition
    bookkeeping. Rows are indexed by global token ID, which makes `gather`
    a single fancy-index copy.

    Concurrency: any number of readers, or one writer (`append`); the
    decode driver serializes writes between steps.
    """

    GROW = 1024

    def __init__(self, layout: HeadLayout, init_len: int, local_len: int):
        if init_len < 0 or local_len < 0:
            raise ConfigError(f"init_len/local_len must be non-negative: {init_len}, {local_len}")
        self.layout = layout
        self.init_len = init_len
        self.local_len = local_len
        self._total = 0
        cap = max(self.GROW, layout.seq_len)
        shape = (layout.batch, layout.kv_heads, cap, layout.head_dim)
        self._keys = np.zeros(shape, dtype=np.float32)
        self._values = np.zeros(shape, dtype=np.float32)

    # -- construction ------------------------------------------------------

    @classmethod
    def partition(cls, keys: np.ndarray, values: np.ndarray,
                  init_len: int, local_len: int,
                  query_heads: int | None = None) -> "KvStore":
        """Ingest prefill K/V tensors [b, g, s, d] and split them into the
        initial / local / offloaded regions. Requires init_len + local_len <= s.
        `query_heads` records the paired Q tensor's head count (defaults to g)."""
        validate_tensor4(keys, "keys")
        validate_tensor4(values, "values")
        if keys.shape != values.shape:
            raise ShapeError(f"keys {keys.shape} vs values {values.shape}")
        b, g, s, d = keys.shape
        if init_len + local_len > s:
            raise ConfigError(
                f"init_len + local_len = {init_len + local_len} exceeds seq_len {s}"
            )
        h = g if query_heads is None else query_heads
        layout = HeadLayout(batch=b, query_heads=h, kv_heads=g, seq_len=s, head_dim=d)
        store = cls(layout, init_len, local_len)
        store._keys[:, :, :s] = keys
        store._values[:, :, :s] = values
        store._total = s
        return store

    # -- partition views ---------------------------------------------------

    @property
    def total_tokens(self) -> int:
        return self._total

    @property
    def ring_start(self) -> int:
        """First token ID inside the local ring."""
        return max(self.init_len, self._total - self.local_len)

    def initial_ids(self) -> np.ndarray:
        return np.arange(min(self.init_len, self._total), dtype=np.int64)

    def local_ids(self) -> np.ndarray:
        """IDs in the local ring, oldest first. Holds exactly
        min(local_len, total - init_len) most recent tokens."""
        return np.arange(self.ring_start, self._total, dtype=np.int64)

    def offloaded_ids(self) -> np.ndarray:
        return np.arange(min(self.init_len, self._total), self.ring_start, dtype=np.int64)

    def static_ids(self) -> np.ndarray:
        """Initial plus local-ring IDs: the always-attended partition."""
        return np.concatenate([self.initial_ids(), self.local_ids()])

    def is_offloaded(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.init_len) & (ids < self.ring_start)

    def check_partition(self) -> None:
        """Assert the three regions are disjoint and cover [0, total)."""
        parts = [self.initial_ids(), self.offloaded_ids(), self.local_ids()]
        merged = np.concatenate(parts)
        if merged.size != self._total or not np.array_equal(np.sort(merged), np.arange(self._total)):
            raise AssertionError(f"partition broken: sizes {[p.size for p in parts]} vs total {self._total}")
        ring = self.local_ids()
        if ring.size != min(self.local_len, max(self._total - self.init_len, 0)):
            raise AssertionError(f"ring size {ring.size} off for total={self._total}")

    # -- mutation ----------------------------------------------------------

    def append(self, new_keys: np.ndarray, new_values: np.ndarray) -> int:
        """Append one token's K/V vectors, shaped [b, g, d]. The token enters
        the local ring; when the ring is full its oldest token slides into the
        offloaded region. Returns the new global token ID."""
        b, g, d = self.layout.batch, self.layout.kv_heads, self.layout.head_dim
        new_keys = np.asarray(new_keys, dtype=np.float32)
        new_values = np.asarray(new_values, dtype=np.float32)
        if new_keys.shape != (b, g, d) or new_values.shape != (b, g, d):
            raise ShapeError(f"append: expected [b, g, d] = {(b, g, d)}, got {new_keys.shape}")
        if self._total == self._keys.shape[2]:
            self._grow()
        tid = self._total
        self._keys[:, :, tid] = new_keys
        self._values[:, :, tid] = new_values
        self._total += 1
        return tid

    def _grow(self):
        cap = self._keys.shape[2]
        new_cap = cap + max(self.GROW, cap // 2)
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            grown = np.zeros(old.shape[:2] + (new_cap, old.shape[3]), dtype=np.float32)
            grown[:, :, :cap] = old[:, :, :cap]
            setattr(self, name, grown)

    # -- access ------------------------------------------------------------

    def gather(self, batch: int, kv_head: int, ids: np.ndarray,
               which: str = "keys") -> np.ndarray:
        """Rows [len(ids), d] for one (batch, kv_head), in the order of `ids`."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._total):
            raise IndexError(f"gather: token id out of range [0, {self._total})")
        src = self._keys if which == "keys" else self._values
        if which not in ("keys", "values"):
            raise ConfigError(f"gather: which must be 'keys' or 'values', got {which!r}")
        return src[batch, kv_head, ids]

    def keys_view(self, ids: np.ndarray) -> np.ndarray:
        """Keys for all (batch, kv_head) at once: [b, g, len(ids), d]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._total):
            raise IndexError(f"keys_view: token id out of range [0, {self._total})")
        return self._keys[:, :, ids]

    def values_view(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._total):
            raise IndexError(f"values_view: token id out of range [0, {self._total})")
        return self._values[:, :, ids]

    @property
    def static_fraction(self) -> float:
        """Share of tokens held in the always-resident partition."""
        if self._total == 0:
            return 0.0
        return self.static_ids().size / self._total
