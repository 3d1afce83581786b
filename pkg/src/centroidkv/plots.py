"""Figure rendering for the report paths. Every function writes one PNG
next to the delimited output it illustrates."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_cosine_buckets(bucket_means, path) -> None:
    dists = [d for d, _ in bucket_means]
    means = [m for _, m in bucket_means]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(dists, means, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("position distance")
    ax.set_ylabel("mean query cosine")
    ax.set_title("Query similarity vs position distance")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_overlap_scatter(samples, slope, path) -> None:
    x = [s.cos_sim for s in samples]
    y = [s.overlap_ratio for s in samples]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.scatter(x, y, s=8, alpha=0.5)
    xs = np.linspace(min(x), max(x), 32)
    xbar, ybar = np.mean(x), np.mean(y)
    ax.plot(xs, ybar + slope * (xs - xbar), color="crimson",
            label=f"trend slope {slope:.3f}")
    ax.set_xlabel("query cosine similarity")
    ax.set_ylabel(f"top-{samples[0].k} overlap")
    ax.set_title("Top-k overlap vs query similarity")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_decode_metrics(trace, path) -> None:
    steps = [r.step for r in trace]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, [r.alpha for r in trace], label="dedup alpha", alpha=0.8)
    recalls = [r.recall_at_k for r in trace]
    if any(v is not None for v in recalls):
        ax.plot(steps, [np.nan if v is None else v for v in recalls],
                label="recall@k vs oracle", alpha=0.8)
    ax.set_xlabel("decode step")
    ax.set_ylim(0, 1.05)
    ax.set_title("Per-step retrieval metrics")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_build_times(rows, path) -> None:
    methods = sorted({m for m, _, _ in rows})
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for method in methods:
        pts = [(s, t) for m, s, t in rows if m == method]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("number of keys")
    ax.set_ylabel("build seconds")
    ax.set_title("Index construction time")
    ax.legend()
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_acceleration_curve(rows, path) -> None:
    """rows: (L_recall, L_rerank, factor)."""
    ratios = [lr / lrr for lr, lrr, _ in rows if lrr > 0]
    factors = [f for _, lrr, f in rows if lrr > 0]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ratios, factors, marker="o")
    ax.axhline(1.0, color="gray", linestyle="--", alpha=0.6)
    ax.set_xscale("log")
    ax.set_xlabel("recall length / rerank length")
    ax.set_ylabel("relative cost of rerank path")
    ax.set_title("Rerank acceleration factor")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
