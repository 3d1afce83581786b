"""Command-line entry point tying everything into reproducible experiments.

Subcommands: gen, build, decode, bench, verify. All randomness flows from a
single top-level seed; flags override JSON config; the effective config is
echoed into every output directory. Report paths write CSV next to rendered
PNG figures.

Exit codes: 0 success, 1 assertion/invariant failure, 2 usage/config error,
3 I/O or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvariantError, ShapeError
from .index import QueryCentroidIndex
from .metrics import (cosine_distance_buckets, least_squares_slope,
                      overlap_scatter)
from .oracle import build_time_comparison, write_build_times_csv
from .retrieval import DecodeConfig, acceleration_factor
from .session import (PrefillParams, prefill, run_decode, summarize_trace,
                      write_metrics_csv, write_trace_ndjson)
from .store import KvStore
from .tensor_ops import HeadLayout
from .theory import (check_lemma1, check_lemma2, check_theorem1,
                     render_reports)
from .workload import (DriftConfig, generate, read_dump, read_sidecar,
                       round_of_step, write_dump, write_sidecar)

OBS_BUCKETS = (64, 256, 1024, 4096, 16384)


@dataclass
class RunConfig:
    seed: int = 42
    threads: int = 0                  # 0 = available cores
    out: str = "runs/latest"
    dump: str | None = None
    # layout
    batch: int = 1
    query_heads: int = 8
    kv_heads: int = 2
    head_dim: int = 64
    # workload
    s: int = 32768
    decode_steps: int = 256
    drift_rate: float = 1e-4
    noise_sigma: float = 0.05
    turns: int = 1
    # partition + index
    init_len: int = 128
    local_len: int = 1024
    capacity: int | None = None       # default min(2048, s // 16)
    c_prime: int = 4
    rho: int | None = None            # default round(2.5 * rho_prime)
    rho_prime: int = 512
    # toggles
    oracle: bool = False
    dcu: bool = True
    rerank: bool = True
    # bench / verify sizing
    bench_sizes: tuple = (4096, 8192, 16384)
    kmeans_clusters: int = 512
    kmeans_iters: int = 300
    lemma1_nmax: int = 6
    lemma1_sampled_n: int = 8
    lemma1_sampled_pairs: int = 100_000
    lemma2_trials: int = 1_000_000
    theorem1_instances: int = 1000
    overlap_pairs: int = 128
    figures: bool = True

    def effective_capacity(self) -> int:
        if self.capacity is not None:
            return self.capacity
        return max(1, min(2048, self.s // 16))

    def effective_rho(self) -> int:
        if self.rho is not None:
            return self.rho
        return int(round(2.5 * self.rho_prime))

    def layout(self, seq_len: int = 0) -> HeadLayout:
        return HeadLayout(batch=self.batch, query_heads=self.query_heads,
                          kv_heads=self.kv_heads, seq_len=seq_len,
                          head_dim=self.head_dim)

    def drift(self) -> DriftConfig:
        return DriftConfig(seed=self.seed, s=self.s, decode_steps=self.decode_steps,
                           drift_rate=self.drift_rate, noise_sigma=self.noise_sigma,
                           turns=self.turns)

    def worker_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


def _load_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = flag
    if getattr(args, "no_dcu", False):
        values["dcu"] = False
    if getattr(args, "no_rerank", False):
        values["rerank"] = False
    if getattr(args, "oracle_flag", False):
        values["oracle"] = True
    if "bench_sizes" in values:
        values["bench_sizes"] = tuple(values["bench_sizes"])
    return RunConfig(**values)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    doc = dataclasses.asdict(cfg)
    doc["bench_sizes"] = list(cfg.bench_sizes)
    with open(out / "config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _dump_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dump) if cfg.dump else out / "workload.ctkv"


# -- subcommands ---------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    drift = cfg.drift()
    layout = cfg.layout(drift.total_len)
    t0 = time.perf_counter()
    q, k, v, needles = generate(drift, layout)
    path = _dump_path(cfg, out)
    write_dump(path, q, k, v)
    write_sidecar(path.with_suffix(".json"), drift, layout, needles)
    print(f"gen: wrote {path} ({path.stat().st_size} bytes, "
          f"{len(needles)} needles, {time.perf_counter() - t0:.2f}s)")

    rng = np.random.default_rng(cfg.seed + 1)
    buckets = [d for d in OBS_BUCKETS if d < drift.total_len]
    bucket_means = cosine_distance_buckets(q, buckets, 256, rng)
    with open(out / "obs_buckets.csv", "w") as fh:
        fh.write("distance,mean_cosine\n")
        for dist, mean in bucket_means:
            fh.write(f"{dist},{mean:.6f}\n")

    store = KvStore.partition(k, v, cfg.init_len, min(cfg.local_len, max(0, drift.total_len - cfg.init_len)),
                              query_heads=layout.query_heads)
    pairs = []
    span = drift.total_len
    for _ in range(cfg.overlap_pairs):
        i = int(rng.integers(0, span))
        j = int(rng.integers(0, span))
        pairs.append((q[0, 0, i], q[0, 0, j]))
    k_top = min(256, store.total_tokens)
    samples = overlap_scatter(pairs, store, k_top)
    slope = least_squares_slope(samples)
    with open(out / "obs_overlap.csv", "w") as fh:
        fh.write("cos_sim,overlap_ratio,k\n")
        for smp in samples:
            fh.write(f"{smp.cos_sim:.6f},{smp.overlap_ratio:.6f},{smp.k}\n")
    print(f"gen: overlap trend slope {slope:.4f} over {len(samples)} pairs")

    if cfg.figures:
        from . import plots
        plots.save_cosine_buckets(bucket_means, out / "figures" / "obs_cosine.png")
        plots.save_overlap_scatter(samples, slope, out / "figures" / "obs_overlap.png")
    return 0


def _load_workload(cfg: RunConfig, out: Path):
    path = _dump_path(cfg, out)
    q, k, v, layout = read_dump(path)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        drift, _, needles = read_sidecar(sidecar)
    else:
        if cfg.s + cfg.decode_steps != layout.seq_len:
            raise ConfigError(
                f"no sidecar for {path}; config s+decode_steps="
                f"{cfg.s + cfg.decode_steps} must equal dump length {layout.seq_len}")
        drift = cfg.drift()
        needles = []
    return q, k, v, layout, drift, needles


def cmd_build(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    q, k, v, layout, drift, _ = _load_workload(cfg, out)
    s = drift.s
    t0 = time.perf_counter()
    store, index = prefill(q[:, :, :s], np.ascontiguousarray(k[:, :, :s]),
                           np.ascontiguousarray(v[:, :, :s]),
                           PrefillParams(cfg.init_len, cfg.local_len,
                                         cfg.effective_capacity(), cfg.effective_rho()))
    build_seconds = time.perf_counter() - t0
    index_path = out / "index.qivf"
    index.save(index_path)
    report = {
        "build_seconds": round(build_seconds, 6),
        "capacity": index.capacity,
        "rho": index.rho,
        "size_bytes": index.size_bytes(),
        "offloaded_tokens": int(store.offloaded_ids().size),
        "static_fraction": round(store.static_fraction, 6),
        "index_file": str(index_path),
    }
    with open(out / "build.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"build: C={index.capacity} rho={index.rho} "
          f"size={index.size_bytes()}B in {build_seconds:.2f}s -> {index_path}")
    return 0


def cmd_decode(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    q, k, v, layout, drift, _ = _load_workload(cfg, out)
    s, steps = drift.s, drift.total_len - drift.s
    if steps <= 0:
        raise ConfigError("decode: workload has no decode tail")
    store, index = prefill(q[:, :, :s], np.ascontiguousarray(k[:, :, :s]),
                           np.ascontiguousarray(v[:, :, :s]),
                           PrefillParams(cfg.init_len, cfg.local_len,
                                         cfg.effective_capacity(), cfg.effective_rho()))
    dconf = DecodeConfig(c_prime=cfg.c_prime, rho_prime=cfg.rho_prime,
                         use_dcu=cfg.dcu, use_rerank=cfg.rerank)
    _, trace = run_decode(store, index, dconf,
                          q[:, :, s:], k[:, :, s:], v[:, :, s:],
                          with_oracle=cfg.oracle,
                          round_of_step=lambda t: round_of_step(drift, t))
    index.check_lists(store)
    store.check_partition()
    write_trace_ndjson(trace, out / "trace.ndjson")
    write_metrics_csv(trace, out / "metrics.csv")
    summary = summarize_trace(trace)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.figures:
        from . import plots
        plots.save_decode_metrics(trace, out / "figures" / "decode_metrics.png")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    rows = build_time_comparison(sorted(cfg.bench_sizes), head_dim=cfg.head_dim,
                                 rho=64, n_clusters=cfg.kmeans_clusters,
                                 kmeans_iters=cfg.kmeans_iters, seed=cfg.seed)
    write_build_times_csv(rows, out / "build_times.csv")
    for method, size, seconds in rows:
        print(f"bench: {method:<12} {size:>8} keys  {seconds:10.6f}s")

    accel_rows = []
    l_recall = 10_000
    for l_rerank in (500, 1000, 2000, 5000, 10_000):
        accel_rows.append((l_recall, l_rerank, acceleration_factor(l_recall, l_rerank)))
    with open(out / "acceleration.csv", "w") as fh:
        fh.write("l_recall,l_rerank,factor\n")
        for lr, lrr, f in accel_rows:
            fh.write(f"{lr},{lrr},{f:.6f}\n")
    print("bench: acceleration factor at 10000/1000 = "
          f"{acceleration_factor(10_000, 1000):.3f}")
    if cfg.figures:
        from . import plots
        plots.save_build_times(rows, out / "figures" / "build_times.png")
        plots.save_acceleration_curve(accel_rows, out / "figures" / "acceleration.png")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    rng = np.random.default_rng(cfg.seed)
    l1 = check_lemma1(cfg.lemma1_nmax, cfg.lemma1_sampled_n,
                      cfg.lemma1_sampled_pairs, rng)
    l2 = check_lemma2(cfg.lemma2_trials, seed=cfg.seed,
                      threads=cfg.worker_threads())
    t1 = check_theorem1(cfg.theorem1_instances, seed=cfg.seed)
    text = render_reports(l1, l2, t1)
    with open(out / "theory.txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0 if (l1.passed and l2.passed and t1.passed) else 1


# -- argument plumbing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="centroidkv",
        description="Centroid-then-token sparse KV retrieval experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"gen": cmd_gen, "build": cmd_build, "decode": cmd_decode,
                "bench": cmd_bench, "verify": cmd_verify}
    for name, handler in handlers.items():
        p = sub.add_parser(name)
        p.set_defaults(handler=handler)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--dump", type=str, default=None)
        p.add_argument("--oracle", dest="oracle_flag", action="store_true",
                       help="compare against the flat oracle during decode")
        p.add_argument("--no-dcu", dest="no_dcu", action="store_true")
        p.add_argument("--no-rerank", dest="no_rerank", action="store_true")
        p.add_argument("--no-figures", dest="figures", action="store_false",
                       default=None)
        for field, typ in (("s", int), ("decode_steps", int), ("turns", int),
                           ("rho_prime", int), ("c_prime", int), ("rho", int),
                           ("capacity", int), ("init_len", int), ("local_len", int),
                           ("batch", int), ("query_heads", int), ("kv_heads", int),
                           ("head_dim", int), ("drift_rate", float),
                           ("noise_sigma", float), ("lemma2_trials", int),
                           ("theorem1_instances", int), ("lemma1_nmax", int)):
            p.add_argument(f"--{field.replace('_', '-')}", dest=field,
                           type=typ, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.handler(cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"io/format error: {exc}", file=sys.stderr)
        return 3
    except (InvariantError, AssertionError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
