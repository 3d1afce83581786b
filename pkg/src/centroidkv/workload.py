"""Synthetic attention-tensor generation plus the binary dump format.

The generator reproduces the observational regime the retrieval scheme
relies on: query directions drift slowly with position, rotary position
embedding is applied on top, and positionally adjacent queries end up
highly similar while distant ones decorrelate. Multi-turn streams re-draw
the base direction at round boundaries, which is what makes the dynamic
centroid update measurable.

Planted "needle" keys give each stream an unambiguous ground truth: a
needle scores highest (by a wide margin over background) for its
designated query position, verified against the flat oracle in tests.

The dump format lets externally captured Q/K/V tensors flow through the
same pipeline; a JSON sidecar carries the generator config and needle
ground truth.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensor_ops import HeadLayout

MAGIC = b"CTKV"
VERSION = 1

ROPE_BASE = 10000.0
NEEDLES_PER_TURN = 2

# Query/key energy decays geometrically toward the high-frequency rotary
# bands (coordinate pair i gets weight SPECTRAL_DECAY^(n_pairs-1-i)). Spread
# evenly, the fast-rotating pairs decohere within a few tokens and adjacent
# queries would look unrelated; concentrating energy in the slow bands is
# what gives positional locality room to matter.
SPECTRAL_DECAY = 0.8

# A turn re-draw keeps this much of the previous turn's direction: topics in
# a conversation shift gradually, so similarity to the prefill queries decays
# geometrically across rounds rather than vanishing at the first boundary.
TURN_CARRYOVER = 0.75


@dataclass(frozen=True)
class DriftConfig:
    """Knobs of the synthetic stream. drift_rate is the deterministic
    rotation magnitude in radians per token; noise_sigma the per-position
    Gaussian perturbation; turns >= 2 re-draws the topic direction at round
    boundaries inside the decode phase."""

    seed: int = 42
    s: int = 32768
    decode_steps: int = 256
    drift_rate: float = 1e-4
    noise_sigma: float = 0.05
    turns: int = 1

    def __post_init__(self):
        if self.drift_rate < 0 or self.noise_sigma < 0:
            raise ConfigError("drift_rate and noise_sigma must be non-negative")
        if self.turns < 1:
            raise ConfigError("turns must be >= 1")
        if self.s < 1 or self.decode_steps < 0:
            raise ConfigError("s must be positive and decode_steps non-negative")

    @property
    def total_len(self) -> int:
        return self.s + self.decode_steps


@dataclass(frozen=True)
class Needle:
    """Ground truth for one planted key."""

    batch: int
    kv_head: int
    token_id: int
    turn: int
    designated_pos: int
    scale: float


def rope_frequencies(head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if head_dim % 2 != 0:
        raise ConfigError(f"rotary embedding requires an even head_dim, got {head_dim}")
    return base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def apply_rope(x: np.ndarray, position, base: float = ROPE_BASE) -> np.ndarray:
    """Rotate consecutive coordinate pairs of x by position-scaled angles.

    x is [..., d] with d even; position is a scalar or an array broadcasting
    against x's leading axes. Norm-preserving; position 0 is the identity.
    """
    x = np.asarray(x)
    freqs = rope_frequencies(x.shape[-1], base)
    pos = np.asarray(position, dtype=np.float64)
    angles = pos[..., None] * freqs
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(x.dtype) if x.dtype == np.float32 else out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def spectral_weights(d: int, decay: float = SPECTRAL_DECAY) -> np.ndarray:
    """Per-coordinate weights concentrating energy in low-frequency rotary
    pairs; normalized so an isotropic draw scaled by them has unit norm in
    expectation."""
    pair_w = decay ** np.arange(d // 2 - 1, -1, -1, dtype=np.float64)
    w = np.repeat(pair_w, 2)
    return w / np.linalg.norm(w) * math.sqrt(d)


def _orthonormal_pair(rng: np.random.Generator, d: int,
                      weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = _unit(weights * rng.standard_normal(d))
    b = weights * rng.standard_normal(d)
    b = _unit(b - (b @ a) * a)
    return a, b


def segments(cfg: DriftConfig) -> list[tuple[int, int, int]]:
    """(start, end, turn_index) spans covering [0, total_len).

    The prefill and the first decode round share turn 0 (the stream
    continues); rounds 2..turns re-draw.
    """
    if cfg.decode_steps == 0 or cfg.turns == 1:
        return [(0, cfg.total_len, 0)]
    bounds = np.linspace(cfg.s, cfg.total_len, cfg.turns + 1).astype(int)
    segs = [(0, int(bounds[1]), 0)]
    segs += [(int(bounds[r]), int(bounds[r + 1]), r) for r in range(1, cfg.turns)]
    return segs


def round_of_step(cfg: DriftConfig, step: int) -> int:
    """Decode round (0-based) of decode step index `step`."""
    if cfg.turns == 1 or cfg.decode_steps == 0:
        return 0
    bounds = np.linspace(cfg.s, cfg.total_len, cfg.turns + 1).astype(int)
    return int(np.searchsorted(bounds, cfg.s + step, side="right") - 1)


def generate(cfg: DriftConfig, layout: HeadLayout):
    """Build (Q, K, V, needles) for the drift regime.

    Q is [b, h, total, d], K/V are [b, g, total, d], all float32 post-RoPE.
    Per (batch, head, turn) a base direction is drawn; the query at position
    p is RoPE(rotate(base, drift_rate * offset) + noise, p). Background keys
    are isotropic with roughly unit norm; needle keys are scaled copies of
    their designated query so they score highest by construction.
    """
    if layout.head_dim % 2 != 0:
        raise ConfigError("generate: head_dim must be even for rotary embedding")
    b, h, g, d = layout.batch, layout.query_heads, layout.kv_heads, layout.head_dim
    total = cfg.total_len
    rng = np.random.default_rng(cfg.seed)
    segs = segments(cfg)

    positions = np.arange(total, dtype=np.float64)
    weights = spectral_weights(d)
    q = np.empty((b, h, total, d), dtype=np.float32)
    for bi in range(b):
        for hi in range(h):
            raw = np.empty((total, d), dtype=np.float64)
            base_dir = None
            for start, end, _turn in segs:
                fresh, ortho = _orthonormal_pair(rng, d, weights)
                if base_dir is None:
                    base_dir = fresh
                else:
                    # partial topic shift at the round boundary
                    fresh = _unit(fresh - (fresh @ base_dir) * base_dir)
                    base_dir = (TURN_CARRYOVER * base_dir
                                + math.sqrt(1.0 - TURN_CARRYOVER ** 2) * fresh)
                    ortho = _unit(ortho - (ortho @ base_dir) * base_dir)
                offs = np.arange(end - start, dtype=np.float64)
                phi = cfg.drift_rate * offs
                raw[start:end] = (np.cos(phi)[:, None] * base_dir
                                  + np.sin(phi)[:, None] * ortho)
            if cfg.noise_sigma > 0:
                noise = weights * rng.standard_normal((total, d))
                raw += cfg.noise_sigma * noise / math.sqrt(d)
            q[bi, hi] = apply_rope(raw, positions).astype(np.float32)

    keys = weights * rng.standard_normal((b, g, total, d)) / math.sqrt(d)
    keys = apply_rope(keys, positions).astype(np.float32)
    values = rng.standard_normal((b, g, total, d)).astype(np.float32)

    lo, hi_pos = int(0.1 * cfg.s), int(0.75 * cfg.s)
    needles: list[Needle] = []
    if hi_pos > lo:
        n_spots = len(segs) * NEEDLES_PER_TURN * b * g
        spots = rng.choice(np.arange(lo, hi_pos), size=min(n_spots, hi_pos - lo),
                           replace=False)
        spot_iter = iter(spots.tolist())
        gs = h // g
        plan = []  # (bi, gi, pos, turn, des); planted after scales are fixed
        for start, end, turn in segs:
            first = cfg.s if turn == 0 and cfg.decode_steps > 0 else (
                start if turn > 0 else cfg.s - 1)
            for bi in range(b):
                for gi in range(g):
                    for j in range(NEEDLES_PER_TURN):
                        try:
                            pos = next(spot_iter)
                        except StopIteration:
                            break
                        des = min(first + 3 * j, end - 1, total - 1)
                        plan.append((bi, gi, pos, turn, des))
        scales = []
        for bi, gi, pos, turn, des in plan:
            heads = q[bi, gi * gs:(gi + 1) * gs, des].astype(np.float64)
            # group-max background scores of the designated query; the
            # needle sits 3 sigma above their maximum so the flat-oracle
            # top-1 is unambiguous
            bg = (heads @ keys[bi, gi].astype(np.float64).T).max(axis=0)
            scales.append(float(bg.max() + 3.0 * bg.std()))
        # needles sharing a (turn, batch, kv_head) share one scale, so each
        # stays top-1 for its own designated query (its cosine there is 1)
        unified = {}
        for (bi, gi, _pos, turn, _des), scale in zip(plan, scales):
            key = (bi, gi, turn)
            unified[key] = max(unified.get(key, 0.0), scale)
        for bi, gi, pos, turn, des in plan:
            scale = unified[(bi, gi, turn)]
            des_query = q[bi, gi * gs, des].astype(np.float64)
            keys[bi, gi, pos] = (scale * _unit(des_query)).astype(np.float32)
            needles.append(Needle(bi, gi, pos, turn, des, scale))
    return q, keys, values, needles


# -- dump format -------------------------------------------------------------

def write_dump(path, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    """Binary layout: magic, version u32, then b/h/g/s/d as u32 (all
    little-endian), followed by Q, K, V as row-major little-endian float32."""
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ConfigError("write_dump: tensors must be 4-D")
    b, h, s, d = q.shape
    g = k.shape[1]
    if k.shape != (b, g, s, d) or v.shape != (b, g, s, d):
        raise ConfigError(f"write_dump: incompatible shapes {q.shape} {k.shape} {v.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<6I", VERSION, b, h, g, s, d))
        for arr in (q, k, v):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dump(path):
    """Read a dump back; bit-exact round trip. Raises FormatError with the
    expected vs actual byte count on truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28:
        raise FormatError(f"{path}: header truncated at {len(blob)} bytes (need 28)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} (expected {MAGIC!r})")
    version, b, h, g, s, d = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    q_count, kv_count = b * h * s * d, b * g * s * d
    expected = 28 + 4 * (q_count + 2 * kv_count)
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(blob)} (at offset 28)")
    off = 28
    out = []
    for count, shape in ((q_count, (b, h, s, d)), (kv_count, (b, g, s, d)),
                         (kv_count, (b, g, s, d))):
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        out.append(arr.reshape(shape).copy())
        off += 4 * count
    layout = HeadLayout(batch=b, query_heads=h, kv_heads=g, seq_len=s, head_dim=d)
    return out[0], out[1], out[2], layout


def write_sidecar(path, cfg: DriftConfig, layout: HeadLayout,
                  needles: list[Needle]) -> None:
    doc = {
        "config": asdict(cfg),
        "layout": asdict(layout),
        "needles": [asdict(n) for n in needles],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path):
    with open(path) as fh:
        doc = json.load(fh)
    cfg = DriftConfig(**doc["config"])
    layout = HeadLayout(**doc["layout"])
    needles = [Needle(**n) for n in doc["needles"]]
    return cfg, layout, needles
