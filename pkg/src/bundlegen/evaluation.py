"""Metrics, the frequency baseline, latency measurement, and the
brute-force oracles that anchor the property tests.

pre@k averages, over users and the first k positions, the Jaccard overlap
between each recommended bundle and the ground truth; div is the mean
pairwise (1 - Jaccard) inside a list; AUC counts how often a positive
bundle outscores a uniformly drawn negative.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Bundle, BundleList, DegenerateInput, UserContext, Vocabulary, jaccard
from .generate import CandidateSet, GenerationConfig, mask_vector
from .model import QualityModel, TrainingExample
from .numerics import empty_cholesky, logdet_extend, masked_log_probs, no_grad

log = logging.getLogger(__name__)


class DegenerateList(ValueError):
    """Diversity is undefined for lists with fewer than two bundles."""


@dataclass(frozen=True)
class GroundTruth:
    """Per-user target bundles; a single bundle per user for co-purchase
    protocols, possibly several for pre-defined corpora."""

    targets: Mapping[int, tuple[Bundle, ...]]

    @staticmethod
    def from_examples(examples: Sequence[TrainingExample]) -> "GroundTruth":
        by_user: dict[int, list[Bundle]] = {}
        for ex in examples:
            by_user.setdefault(ex.context.user_id, []).append(ex.target)
        return GroundTruth({u: tuple(bs) for u, bs in by_user.items()})


@dataclass
class LatencyStats:
    mean_ms: float
    p95_ms: float
    n_calls: int


@dataclass
class EvalReport:
    precision: dict[int, float]
    diversity: float
    auc: float | None = None
    latency: LatencyStats | None = None
    n_users: int = 0
    skipped_users: int = 0
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {
            "precision": {str(k): v for k, v in self.precision.items()},
            "diversity": self.diversity,
            "auc": self.auc,
            "n_users": self.n_users,
            "skipped_users": self.skipped_users,
        }
        if self.latency:
            out["latency_ms"] = {"mean": self.latency.mean_ms, "p95": self.latency.p95_ms}
        out.update(self.extra)
        return out


CSV_HEADER = "run_id,lambda,C,M,K,pre@5,pre@10,div,auc,mean_latency_ms"


def csv_row(run_id: str, config: GenerationConfig, report: EvalReport) -> str:
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    return ",".join([
        run_id,
        f"{config.lambda_:g}",
        f"{config.shift:g}",
        str(config.beam_width),
        str(config.list_size),
        fmt(report.precision.get(5)),
        fmt(report.precision.get(10)),
        fmt(report.diversity),
        fmt(report.auc),
        fmt(report.latency.mean_ms if report.latency else None),
    ])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _bundle_precision(bundle: Bundle, gt_bundles: tuple[Bundle, ...]) -> float:
    # multi-bundle ground truth scores against the best-matching target
    return max(jaccard(bundle.as_set(), gt.as_set()) for gt in gt_bundles)


def precision_at_k(lists: Mapping[int, BundleList], gt: GroundTruth, k: int) -> float:
    """Mean over users and the first k positions of the Jaccard overlap
    with the ground truth. Users absent from the ground truth are skipped
    (logged), users with short lists are an error."""
    totals = []
    skipped = 0
    for user, blist in sorted(lists.items()):
        targets = gt.targets.get(user)
        if not targets:
            skipped += 1
            continue
        if len(blist) < k:
            raise ValueError(f"user {user} has {len(blist)} bundles, need {k}")
        scores = [_bundle_precision(b, targets) for b in blist.bundles[:k]]
        totals.append(float(np.mean(scores)))
    if skipped:
        log.warning("precision_at_k skipped %d users missing from ground truth", skipped)
    if not totals:
        raise DegenerateInput("no users to evaluate")
    return float(np.mean(totals))


def diversity(lists: Mapping[int, BundleList]) -> float:
    """Mean over users of the mean over ordered pairs (a != b) of
    1 - Jaccard(a, b)."""
    per_user = []
    for user, blist in sorted(lists.items()):
        K = len(blist)
        if K < 2:
            raise DegenerateList(f"user {user} has a single-bundle list")
        total = 0.0
        for a, b in itertools.permutations(blist.bundles, 2):
            total += 1.0 - jaccard(a.as_set(), b.as_set())
        per_user.append(total / (K * (K - 1)))
    if not per_user:
        raise DegenerateInput("no lists")
    return float(np.mean(per_user))


def build_negative_pool(bundles: Sequence[Bundle], min_size: int = 2) -> list[Bundle]:
    """Distinct valid bundles usable as ranking negatives."""
    seen: set[frozenset[int]] = set()
    pool = []
    for b in bundles:
        if b.size < min_size:
            continue
        key = b.as_set()
        if key in seen:
            continue
        seen.add(key)
        pool.append(b)
    return pool


def auc(model: QualityModel, examples: Sequence[TrainingExample],
        negative_pool: Sequence[Bundle], seed: int = 0,
        score_fn: Callable[[Bundle, UserContext], float] | None = None) -> float:
    """For every (user, positive) pair draw one uniform negative bundle
    (never the positive itself), score both, and count wins; exact ties
    count one half."""
    if not negative_pool:
        raise DegenerateInput("empty negative pool")
    if score_fn is None:
        score_fn = model.rank_score
    rng = np.random.default_rng(seed)
    by_user: dict[int, list[TrainingExample]] = {}
    for ex in examples:
        by_user.setdefault(ex.context.user_id, []).append(ex)
    user_rates = []
    for user in sorted(by_user):
        wins = 0.0
        for ex in by_user[user]:
            pos_set = ex.target.as_set()
            neg = negative_pool[int(rng.integers(len(negative_pool)))]
            tries = 0
            while neg.as_set() == pos_set:
                neg = negative_pool[int(rng.integers(len(negative_pool)))]
                tries += 1
                if tries > 1000:
                    raise DegenerateInput("negative pool has no bundle besides the positive")
            p_pos = score_fn(ex.target, ex.context)
            p_neg = score_fn(neg, ex.context)
            if p_pos > p_neg:
                wins += 1.0
            elif p_pos == p_neg:
                wins += 0.5
        user_rates.append(wins / len(by_user[user]))
    return float(np.mean(user_rates))


# ---------------------------------------------------------------------------
# frequency baseline
# ---------------------------------------------------------------------------


def _apriori(order_sets: list[frozenset[int]], min_support: int) -> dict[frozenset[int], int]:
    """All itemsets with support >= min_support, counted over orders."""
    counts: dict[frozenset[int], int] = {}
    item_counts: dict[int, int] = {}
    for s in order_sets:
        for i in s:
            item_counts[i] = item_counts.get(i, 0) + 1
    frequent = {frozenset([i]) for i, c in item_counts.items() if c >= min_support}
    for s in frequent:
        counts[s] = item_counts[next(iter(s))]
    level = frequent
    size = 1
    while level:
        size += 1
        # join step: merge sets differing in one item
        items = sorted({i for s in level for i in s})
        candidates: set[frozenset[int]] = set()
        level_list = sorted(level, key=lambda s: tuple(sorted(s)))
        for s in level_list:
            for i in items:
                if i in s:
                    continue
                cand = s | {i}
                if len(cand) != size or cand in candidates:
                    continue
                # prune: every (size-1)-subset must be frequent
                if all(cand - {j} in level for j in cand):
                    candidates.add(cand)
        next_counts: dict[frozenset[int], int] = {}
        for order in order_sets:
            for cand in candidates:
                if cand <= order:
                    next_counts[cand] = next_counts.get(cand, 0) + 1
        level = {s for s, c in next_counts.items() if c >= min_support}
        for s in level:
            counts[s] = next_counts[s]
    return counts


def _closed_only(counts: dict[frozenset[int], int]) -> dict[frozenset[int], int]:
    """Drop itemsets that have a strict superset with identical support."""
    out = {}
    for s, c in counts.items():
        if any(s < t and counts[t] == c for t in counts if len(t) == len(s) + 1):
            continue
        out[s] = c
    return out


def freq_baseline(train_bundles: Sequence[Bundle], k: int,
                  vocab: Vocabulary | None = None,
                  min_support: int | None = None) -> BundleList:
    """Non-personalized top-k closed frequent itemsets of size >= 2, mined
    over training bundle occurrences; the support threshold is lowered
    (with a warning) if fewer than k itemsets qualify."""
    order_sets = [b.as_set() for b in train_bundles]
    if not order_sets:
        raise DegenerateInput("no training bundles")
    if min_support is None:
        min_support = max(2, int(0.001 * len(order_sets)))
    while True:
        counts = _closed_only(_apriori(order_sets, min_support))
        ranked = sorted(
            ((s, c) for s, c in counts.items() if len(s) >= 2),
            key=lambda sc: (-sc[1], -len(sc[0]), tuple(sorted(sc[0]))),
        )
        if len(ranked) >= k or min_support <= 1:
            break
        min_support = max(1, min_support // 2)
        log.warning("freq_baseline lowering support threshold to %d", min_support)
    chosen = ranked[:k]
    bundles = []
    for s, _ in chosen:
        if vocab is not None:
            ordered = sorted(s, key=lambda i: (-vocab.item(i).price, i))
            bundles.append(Bundle(tuple(ordered), canonical_order=True))
        else:
            bundles.append(Bundle(tuple(sorted(s))))
    return BundleList(tuple(bundles))


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def exhaustive_topk_oracle(model: QualityModel, context: UserContext, max_size: int,
                           k: int) -> BundleList:
    """Enumerate every duplicate-free bundle up to `max_size` items, score
    each canonical sequence with bundle_log_prob, return the top k. Guarded
    to toy sizes (N <= 8, size <= 3)."""
    n = model.vocab.n_items
    if n > 8 or max_size > 3:
        raise ValueError(f"oracle limited to N <= 8 items and size <= 3, got {n}, {max_size}")
    ids = [model.vocab.item_id_at(r) for r in range(n)]
    scored = []
    for size in range(1, max_size + 1):
        for combo in itertools.combinations(ids, size):
            ordered = sorted(combo, key=lambda i: (-model.vocab.item(i).price, i))
            b = Bundle(tuple(ordered), canonical_order=True)
            scored.append((model.bundle_log_prob(b, context), b))
    scored.sort(key=lambda sb: (-sb[0], sb[1].items))
    top = scored[:k]
    return BundleList(tuple(b for _, b in top), tuple(s for s, _ in top))


def enumerate_beam_oracle(model: QualityModel, context: UserContext,
                          config: GenerationConfig) -> CandidateSet:
    """Independent reference for beam search: enumerate every duplicate-free
    item sequence up to the maximum size, score it step by step with the
    masked softmax (end token suppressed at step 1, duplicate items always),
    close it with the end token, and keep the best score per item set.
    """
    n = model.vocab.n_items
    end = n
    with no_grad():
        E = model.full_weight_matrix()
        enc = model.encode([context])
        from .generate import _ArrayState, _step_arrays

        best: dict[frozenset[int], tuple[float, tuple[int, ...]]] = {}

        def visit(prefix: tuple[int, ...], state, score: float, t: int):
            st, h = _step_arrays(model, state, np.array([
                model.vocab.bos_row if not prefix else prefix[-1]
            ], dtype=np.intp), enc)
            logits = h @ E.T
            mask = mask_vector(t, prefix, config, n)[None, :]
            if t == 1:
                mask = mask.copy()
                mask[0, end] = np.inf
            lp = masked_log_probs(logits, mask)[0]
            if prefix:
                total = score + lp[end]
                key = frozenset(prefix)
                if key not in best or total > best[key][0]:
                    best[key] = (total, prefix)
            if t <= config.max_bundle_size:
                for cand in range(n):
                    if np.isfinite(lp[cand]):
                        visit(prefix + (cand,), st, score + lp[cand], t + 1)

        visit((), _ArrayState([h.data for h in model.initial_state(enc.h0).hs],
                              [c.data for c in model.initial_state(enc.h0).cs]), 0.0, 1)

    out = CandidateSet()
    ranked = sorted(best.values(), key=lambda sp: (-sp[0], sp[1]))
    for score, prefix in ranked:
        items = tuple(model.vocab.item_id_at(r) for r in prefix)
        out.bundles.append(Bundle(items))
        out.log_probs.append(score)
    return out


def greedy_dpp_oracle(candidates: CandidateSet, config: GenerationConfig
                      ) -> list[int]:
    """Greedy selection computing each step's objective with a dense
    determinant instead of the incremental factorization; returns the
    chosen candidate indices in order."""
    from .generate import similarity

    n = len(candidates)
    S = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            S[i, j] = S[j, i] = similarity(candidates.bundles[i], candidates.bundles[j])
    chosen: list[int] = []
    remaining = list(range(n))
    while remaining and len(chosen) < config.list_size:
        best_idx, best_score, best_lp, best_items = None, -np.inf, -np.inf, ()
        for idx in remaining:
            sel = chosen + [idx]
            sign, logdet = np.linalg.slogdet(S[np.ix_(sel, sel)])
            if sign <= 0:
                continue
            score = candidates.log_probs[idx] + config.lambda_ * logdet
            lp = candidates.log_probs[idx]
            items = tuple(sorted(candidates.bundles[idx].items))
            if (best_idx is None or score > best_score
                    or (score == best_score
                        and (lp > best_lp or (lp == best_lp and items < best_items)))):
                best_idx, best_score, best_lp, best_items = idx, score, lp, items
        if best_idx is None:
            break
        chosen.append(best_idx)
        remaining.remove(best_idx)
    return chosen


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def measure_latency(generator: Callable[[UserContext], BundleList],
                    users: Sequence[UserContext]) -> LatencyStats:
    """Wall-clock per generate call over a warmed-up generator."""
    if not users:
        raise DegenerateInput("no users to measure")
    times = []
    for user in users:
        t0 = time.perf_counter()
        generator(user)
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.array(times)
    return LatencyStats(float(arr.mean()), float(np.percentile(arr, 95)), len(times))
