"""Executable verification of the ranking-stability results behind the
two-stage retrieval scheme.

Three statements are checked as proved mathematics; any violation found
here is an implementation bug, and the process exit status reflects it:

* Inversion bound: if two score arrays over the same N keys disagree on t
  key pairs, then for every m the top-m sets differ by at most floor(sqrt(t))
  elements.
* Perturbation bound: for unit vectors, if the projection gap
  delta = Q1.K1 - Q1.K2 exceeds 4 sin(theta/2), then any Q2 within angle
  theta of Q1 keeps K1 ranked above K2.
* Threshold certificate: from one query's score spread, a cosine threshold
  epsilon can be computed such that any query within it shares more than a
  fraction p of the top-k retrieval set.

The inversion count orients each pair by the first array: a pair of keys
counts when the two arrays rank it oppositely. (The bound is stated for
arrays pre-sorted by the first ranking, where this is the literal pair
count; counting raw positional triples instead is false for unsorted
input.) Ties are broken by a deterministic 1e-9 * index perturbation
before counting.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_ops import top_k

_TIE_EPS = 1e-9


def _untie(values: np.ndarray) -> np.ndarray:
    """Deterministic tiebreaker: add 1e-9 * index when duplicates exist."""
    values = np.asarray(values, dtype=np.float64)
    if np.unique(values).size != values.size:
        values = values + _TIE_EPS * np.arange(values.size)
    return values


def inversion_count(a, b) -> int:
    """Number of key pairs the two score arrays rank oppositely.

    a and b score the same N keys. Runs in O(N log N) via a Fenwick tree
    over ranks; tests validate it against the quadratic pair scan.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"inversion_count: arrays must be equal-length 1-D, "
                         f"got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        return 0
    a, b = _untie(a), _untie(b)
    order = np.argsort(-a, kind="stable")
    seq = b[order]
    # Count pairs k < l with seq[k] < seq[l]: those are exactly the pairs
    # where the b-ranking contradicts the a-ranking.
    ranks = np.argsort(np.argsort(seq)) + 1
    tree = [0] * (n + 1)
    count = 0
    for r in ranks.tolist():
        i = r - 1
        while i > 0:
            count += tree[i]
            i -= i & (-i)
        while r <= n:
            tree[r] += 1
            r += r & (-r)
    return count


# -- inversion bound (top-m divergence) ---------------------------------------


@dataclass
class Lemma1Report:
    n_max: int
    pairs_checked: int = 0
    checks: int = 0
    violations: list = field(default_factory=list)
    tight_count: int = 0
    tight_examples: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def _pair_masks(perms: np.ndarray) -> np.ndarray:
    """Bitmask per permutation: bit (x, y), x < y, set when key x outranks
    key y."""
    p, n = perms.shape
    xs, ys = np.triu_indices(n, k=1)
    bits = (perms[:, xs] > perms[:, ys]).astype(np.uint32)
    return (bits << np.arange(xs.size, dtype=np.uint32)).sum(axis=1, dtype=np.uint32)


def _member_masks(perms: np.ndarray) -> np.ndarray:
    """[P, n+1] bitmasks over keys: entry m marks the top-m keys."""
    p, n = perms.shape
    out = np.zeros((p, n + 1), dtype=np.uint32)
    for m in range(1, n + 1):
        member = (perms >= n - m).astype(np.uint32)
        out[:, m] = (member << np.arange(n, dtype=np.uint32)).sum(axis=1, dtype=np.uint32)
    return out


def _check_mask_pairs(report, n, t, mem_a, mem_b, examples_cap=5):
    """Vectorized |top-m(A) \\ top-m(B)| <= floor(sqrt(t)) over mask arrays."""
    isqrt = np.array([math.isqrt(v) for v in range(n * (n - 1) // 2 + 1)])
    bound = isqrt[t]
    for m in range(1, n + 1):
        inter = np.bitwise_count(mem_a[:, m] & mem_b[:, m])
        s_m = m - inter.astype(np.int64)
        report.checks += s_m.size
        bad = np.flatnonzero(s_m > bound)
        for idx in bad[:examples_cap]:
            report.violations.append(
                {"n": n, "m": m, "t": int(t[idx]), "s_m": int(s_m[idx])})
        if bad.size > examples_cap:
            report.violations.append({"n": n, "m": m, "more": int(bad.size)})
        tight = (s_m == bound) & (s_m > 0)
        report.tight_count += int(tight.sum())
        if len(report.tight_examples) < examples_cap:
            for idx in np.flatnonzero(tight)[: examples_cap - len(report.tight_examples)]:
                report.tight_examples.append(
                    {"n": n, "m": m, "t": int(t[idx]), "s_m": int(s_m[idx])})


def check_lemma1(n_max: int, sampled_n: int = 0, sampled_pairs: int = 0,
                 rng: np.random.Generator | None = None,
                 chunk: int = 2048) -> Lemma1Report:
    """Exhaustively check the top-m divergence bound over every ordered pair
    of rankings of up to n_max keys, plus optional random sampling at a
    larger size. Reports violations (expected: none) and the tightness
    frontier (cases achieving equality)."""
    if n_max > 8:
        raise ConfigError("check_lemma1: exhaustive enumeration capped at n_max = 8")
    report = Lemma1Report(n_max=n_max)
    for n in range(2, n_max + 1):
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        masks = _pair_masks(perms)
        members = _member_masks(perms)
        p = perms.shape[0]
        rows = max(1, min(chunk, (1 << 20) // p))
        for lo in range(0, p, rows):
            hi = min(p, lo + rows)
            t = np.bitwise_count(masks[lo:hi, None] ^ masks[None, :]).astype(np.int64)
            mem_a = np.repeat(members[lo:hi], p, axis=0)
            mem_b = np.tile(members, (hi - lo, 1))
            _check_mask_pairs(report, n, t.ravel(), mem_a, mem_b)
            report.pairs_checked += (hi - lo) * p
    if sampled_n and sampled_pairs:
        if sampled_n > 16:
            raise ConfigError("check_lemma1: sampled_n capped at 16 (mask width)")
        rng = np.random.default_rng(0) if rng is None else rng
        done = 0
        while done < sampled_pairs:
            nb = min(sampled_pairs - done, 200_000)
            pa = rng.permuted(np.tile(np.arange(sampled_n), (nb, 1)), axis=1)
            pb = rng.permuted(np.tile(np.arange(sampled_n), (nb, 1)), axis=1)
            t = np.bitwise_count(_pair_masks(pa) ^ _pair_masks(pb)).astype(np.int64)
            _check_mask_pairs(report, sampled_n, t, _member_masks(pa), _member_masks(pb))
            report.pairs_checked += nb
            done += nb
    return report


# -- perturbation bound -------------------------------------------------------


@dataclass
class Lemma2Report:
    satisfying_trials: int = 0
    violations: int = 0
    min_margin: float = math.inf
    violated_hypothesis_trials: int = 0
    conclusion_failed_without_hypothesis: int = 0

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def nonvacuity_rate(self) -> float:
        if self.violated_hypothesis_trials == 0:
            return 0.0
        return self.conclusion_failed_without_hypothesis / self.violated_hypothesis_trials


def _lemma2_batch(nb: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    def unit(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)
    k1 = unit(rng.standard_normal((nb, dim)))
    k2 = unit(rng.standard_normal((nb, dim)))
    q1 = unit(rng.standard_normal((nb, dim)))
    delta = np.einsum("nd,nd->n", q1, k1) - np.einsum("nd,nd->n", q1, k2)
    swap = delta < 0
    k1[swap], k2[swap] = k2[swap].copy(), k1[swap].copy()
    delta = np.abs(delta)
    # quadratic bias toward small angles so hypothesis-satisfying trials
    # are plentiful
    theta = math.pi * rng.random(nb) ** 2
    g = rng.standard_normal((nb, dim))
    ortho = g - np.einsum("nd,nd->n", g, q1)[:, None] * q1
    ortho = unit(ortho)
    q2 = np.cos(theta)[:, None] * q1 + np.sin(theta)[:, None] * ortho
    margin = np.einsum("nd,nd->n", q2, k1) - np.einsum("nd,nd->n", q2, k2)
    hyp = delta > 4.0 * np.sin(theta / 2.0)
    return hyp, margin


def check_lemma2(trials: int, dim: int = 8, seed: int = 0,
                 threads: int = 1) -> Lemma2Report:
    """Monte-Carlo check: whenever the projection-gap hypothesis holds, the
    second query must keep the same pairwise ranking. Conclusion margins are
    allowed down to -1e-9 (float64 roundoff on a real-arithmetic statement).
    Also reports how often the conclusion fails when the hypothesis is
    violated, as a non-vacuity signal."""
    if trials < 1:
        raise ConfigError("check_lemma2: trials must be >= 1")
    report = Lemma2Report()
    batch = min(200_000, max(4096, trials))
    seed_i = seed
    workers = max(1, threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while report.satisfying_trials < trials:
            jobs = [(batch, dim, seed_i + w) for w in range(workers)]
            seed_i += workers
            for hyp, margin in pool.map(lambda args: _lemma2_batch(*args), jobs):
                sat_margin = margin[hyp]
                report.satisfying_trials += int(hyp.sum())
                report.violations += int((sat_margin < -1e-9).sum())
                if sat_margin.size:
                    report.min_margin = min(report.min_margin, float(sat_margin.min()))
                rest = margin[~hyp]
                report.violated_hypothesis_trials += int(rest.size)
                report.conclusion_failed_without_hypothesis += int((rest < 0).sum())
    return report


# -- threshold certificate ----------------------------------------------------


@dataclass(frozen=True)
class ThresholdCertificate:
    """Per-instance cosine threshold: queries within epsilon of the scored
    one share more than fraction p of the top-k set."""

    k: int
    p: float
    t_index: int
    d_t: float
    theta: float
    epsilon: float


def theorem1_threshold(scores_a: np.ndarray, k: int, p: float) -> ThresholdCertificate:
    """Compute the certificate from one query's score array.

    Takes the t-th smallest pairwise score difference at
    t = floor(k^2 (1-p)^2) (clamped to 1, conservative under the strict
    inequality in the bound) and converts it to an angle, then a cosine.
    """
    scores = np.asarray(scores_a, dtype=np.float64).ravel()
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"theorem1_threshold: p must be in [0, 1), got {p}")
    if k < 1:
        raise ConfigError("theorem1_threshold: k must be >= 1")
    if (k * (1.0 - p)) ** 2 < 1.0:
        raise ConfigError("theorem1_threshold: k^2 (1-p)^2 must be >= 1")
    n = scores.size
    n_pairs = n * (n - 1) // 2
    t = max(1, math.floor((k * (1.0 - p)) ** 2))
    if t > n_pairs:
        raise ConfigError(
            f"theorem1_threshold: t={t} exceeds the {n_pairs} pairwise differences")
    scores = _untie(scores)
    xs, ys = np.triu_indices(n, k=1)
    diffs = np.abs(scores[xs] - scores[ys])
    d_t = float(np.partition(diffs, t - 1)[t - 1])
    if d_t > 4.0:
        raise ConfigError("theorem1_threshold: score spread too large for the angle bound")
    theta = 2.0 * math.asin(d_t / 4.0)
    return ThresholdCertificate(k=k, p=p, t_index=t, d_t=d_t,
                                theta=theta, epsilon=math.cos(theta))


def top_k_overlap(scores_a: np.ndarray, scores_b: np.ndarray, k: int) -> float:
    """|top-k(A) intersect top-k(B)| / k under the package tie-break."""
    sa = set(top_k(np.asarray(scores_a, dtype=np.float32), k).tolist())
    sb = set(top_k(np.asarray(scores_b, dtype=np.float32), k).tolist())
    return len(sa & sb) / k


@dataclass
class Theorem1Report:
    instances: int = 0
    violations: int = 0
    min_overlap: float = 1.0
    mean_epsilon: float = 0.0

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_theorem1(instances: int, n_keys: int = 200, k: int = 20, p: float = 0.8,
                   dim: int = 16, seed: int = 0) -> Theorem1Report:
    """Draw random key sets, certify a threshold from one query, then draw a
    second query strictly inside the certified cosine and assert top-k
    overlap above p."""
    rng = np.random.default_rng(seed)
    report = Theorem1Report()
    eps_sum = 0.0
    for _ in range(instances):
        keys = rng.standard_normal((n_keys, dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        q = rng.standard_normal(dim)
        q /= np.linalg.norm(q)
        scores = keys @ q
        cert = theorem1_threshold(scores, k, p)
        theta_p = cert.theta * rng.random()
        g = rng.standard_normal(dim)
        ortho = g - (g @ q) * q
        ortho /= np.linalg.norm(ortho)
        q_prime = math.cos(theta_p) * q + math.sin(theta_p) * ortho
        overlap = top_k_overlap(scores, keys @ q_prime, k)
        report.instances += 1
        eps_sum += cert.epsilon
        report.min_overlap = min(report.min_overlap, overlap)
        if not overlap > p:
            report.violations += 1
    report.mean_epsilon = eps_sum / max(1, report.instances)
    return report


# -- suite --------------------------------------------------------------------


def render_reports(l1: Lemma1Report, l2: Lemma2Report, t1: Theorem1Report) -> str:
    lines = [
        "theory verification",
        "===================",
        f"inversion bound: pairs={l1.pairs_checked} checks={l1.checks} "
        f"violations={len(l1.violations)} tight={l1.tight_count} "
        f"-> {'PASS' if l1.passed else 'FAIL'}",
    ]
    for ex in l1.tight_examples:
        lines.append(f"  tight: n={ex['n']} m={ex['m']} t={ex['t']} |S_m|={ex['s_m']}")
    for ex in l1.violations[:10]:
        lines.append(f"  VIOLATION: {ex}")
    lines.append(
        f"perturbation bound: satisfying={l2.satisfying_trials} "
        f"violations={l2.violations} min_margin={l2.min_margin:.3e} "
        f"nonvacuity_fail_rate={l2.nonvacuity_rate:.4f} "
        f"-> {'PASS' if l2.passed else 'FAIL'}")
    lines.append(
        f"threshold certificate: instances={t1.instances} "
        f"violations={t1.violations} min_overlap={t1.min_overlap:.4f} "
        f"mean_epsilon={t1.mean_epsilon:.6f} "
        f"-> {'PASS' if t1.passed else 'FAIL'}")
    lines.append("result: " + ("PASS" if (l1.passed and l2.passed and t1.passed) else "FAIL"))
    return "\n".join(lines) + "\n"
