"""Corpus ingestion and dataset construction.

Raw interaction logs (JSONL events) or pre-defined bundle corpora are
grouped into per-user bundle sequences, expanded into prefix-context
training examples, split deterministically, and persisted together with a
manifest. A seeded synthetic-corpus generator stands in for external
datasets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Bundle, Item, UserContext, Vocabulary, canonicalize_bundle


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyCorpus(ValueError):
    """No usable records in the corpus."""


@dataclass(frozen=True)
class RawEvent:
    """One item occurrence inside a co-purchase order."""

    user_id: int
    order_key: int
    item_id: int
    price: float
    category_id: int | None = None


@dataclass(frozen=True)
class TrainingExample:
    """A user context paired with the bundle it should predict. Items in
    the target may reappear from the context (repurchase is allowed)."""

    context: UserContext
    target: Bundle


@dataclass
class DatasetSplit:
    train: list[TrainingExample]
    validation: list[TrainingExample]
    test: list[TrainingExample]
    vocab: Vocabulary
    style: str = "co-purchase"
    seed: int = 0
    skipped_users: int = 0
    dropped_small_targets: int = 0
    dropped_oov_targets: int = 0


@dataclass(frozen=True)
class CorpusStats:
    n_items: int
    n_users: int
    n_categories: int
    n_records: int
    n_distinct_bundles: int
    avg_bundle_size: float

    def as_block(self) -> str:
        rows = [
            ("Items", self.n_items),
            ("Users", self.n_users),
            ("Categories", self.n_categories if self.n_categories else "-"),
            ("Records", self.n_records),
            ("Bundles", self.n_distinct_bundles),
            ("Average Bundle Size", f"{self.avg_bundle_size:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# ---------------------------------------------------------------------------
# event files
# ---------------------------------------------------------------------------


def _require_int(obj, key, line_no):
    v = obj.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ParseError(line_no, f"field '{key}' must be a non-negative integer")
    return v


def load_events(path) -> list[RawEvent]:
    """Read a JSONL event file; one {'user','order','item','cate','price'}
    object per line, in file order."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            user = _require_int(obj, "user", line_no)
            order = _require_int(obj, "order", line_no)
            item = _require_int(obj, "item", line_no)
            cate = obj.get("cate")
            if cate is not None and (not isinstance(cate, int) or isinstance(cate, bool) or cate < 0):
                raise ParseError(line_no, "field 'cate' must be a non-negative integer or null")
            price = obj.get("price")
            if not isinstance(price, (int, float)) or isinstance(price, bool) or price < 0:
                raise ParseError(line_no, "field 'price' must be a non-negative number")
            events.append(RawEvent(user, order, item, float(price), cate))
    return events


def catalog_from_events(events: Iterable[RawEvent]) -> Vocabulary:
    """Catalog of every item seen; first occurrence fixes price/category."""
    items: dict[int, Item] = {}
    for ev in events:
        if ev.item_id not in items:
            items[ev.item_id] = Item(ev.item_id, ev.price, ev.category_id)
    if not items:
        raise EmptyCorpus("no events")
    return Vocabulary(items.values())


def group_bundles(events: Sequence[RawEvent], vocab: Vocabulary | None = None
                  ) -> dict[int, list[Bundle]]:
    """Per user, group events by order key and canonicalize each group.

    Returns each user's bundles ordered by ascending order key.
    """
    if vocab is None:
        vocab = catalog_from_events(events)
    grouped: dict[int, dict[int, list[int]]] = {}
    for ev in events:
        grouped.setdefault(ev.user_id, {}).setdefault(ev.order_key, []).append(ev.item_id)
    out: dict[int, list[Bundle]] = {}
    for user in sorted(grouped):
        out[user] = [
            canonicalize_bundle(grouped[user][key], vocab)
            for key in sorted(grouped[user])
        ]
    return out


# ---------------------------------------------------------------------------
# pre-defined bundle corpora
# ---------------------------------------------------------------------------


def load_catalog(path) -> Vocabulary:
    """Item catalog JSONL: {'item':int,'cate':int|null,'price':float}."""
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            item = _require_int(obj, "item", line_no)
            cate = obj.get("cate")
            price = float(obj.get("price", 0.0))
            items.append(Item(item, price, cate))
    if not items:
        raise EmptyCorpus("empty catalog")
    return Vocabulary(items)


def load_bundle_records(path, vocab: Vocabulary) -> dict[int, list[Bundle]]:
    """Pre-defined bundle corpus JSONL: {'user':int,'seq':int,'bundle':[int,...]},
    ordered per user by 'seq'."""
    rows: dict[int, list[tuple[int, list[int]]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            user = _require_int(obj, "user", line_no)
            seq = _require_int(obj, "seq", line_no)
            bundle = obj.get("bundle")
            if not isinstance(bundle, list) or not bundle:
                raise ParseError(line_no, "field 'bundle' must be a non-empty list")
            rows.setdefault(user, []).append((seq, bundle))
    out: dict[int, list[Bundle]] = {}
    for user in sorted(rows):
        ordered = sorted(rows[user], key=lambda r: r[0])
        out[user] = [canonicalize_bundle(items, vocab) for _, items in ordered]
    return out


# ---------------------------------------------------------------------------
# example construction
# ---------------------------------------------------------------------------


def _context_of(prefix: Sequence[Bundle], user: int) -> UserContext:
    history: list[int] = []
    for b in prefix:
        history.extend(b.items)
    return UserContext(user, tuple(history))


def build_prefix_examples(
    user_bundles: dict[int, list[Bundle]],
    mode: str,
    min_bundles: int = 2,
    min_test_target: int = 1,
) -> tuple[list[TrainingExample], int, int]:
    """Expand per-user bundle sequences into prefix-context examples.

    Train mode emits (b_1..b_k) -> b_{k+1} for k = 1..n-2; test mode emits
    the single (b_1..b_{n-1}) -> b_n example, dropping targets smaller than
    `min_test_target`. Users with fewer than `min_bundles` behaviors are
    skipped. Returns (examples, skipped_users, dropped_small_targets).
    """
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    examples: list[TrainingExample] = []
    skipped = 0
    dropped_small = 0
    for user in sorted(user_bundles):
        bundles = user_bundles[user]
        if len(bundles) < min_bundles:
            skipped += 1
            continue
        if mode == "train":
            for k in range(1, len(bundles) - 1):
                examples.append(TrainingExample(_context_of(bundles[:k], user), bundles[k]))
        else:
            target = bundles[-1]
            if target.size < min_test_target:
                dropped_small += 1
                continue
            examples.append(TrainingExample(_context_of(bundles[:-1], user), target))
    return examples, skipped, dropped_small


def _vocab_from_examples(examples: Iterable[TrainingExample], catalog: Vocabulary) -> Vocabulary:
    ids: set[int] = set()
    for ex in examples:
        ids.update(ex.context.history)
        ids.update(ex.target.items)
    if not ids:
        raise EmptyCorpus("no training items")
    return Vocabulary(catalog.item(i) for i in sorted(ids))


def build_split(
    user_bundles: dict[int, list[Bundle]],
    catalog: Vocabulary,
    style: str = "co-purchase",
    seed: int = 0,
    val_fraction: float = 0.1,
) -> DatasetSplit:
    """Assemble train/validation/test examples under the prefix protocol.

    Co-purchase style admits users with >= 2 behaviors and keeps only test
    targets of >= 2 items; pre-defined style requires >= 3 behaviors. The
    vocabulary is built from training examples only, and test examples
    whose target contains an out-of-vocabulary item are dropped (their
    contexts would resolve, but their metrics could not).
    """
    if style == "co-purchase":
        min_bundles, min_test = 2, 2
    elif style == "predefined":
        min_bundles, min_test = 3, 1
    else:
        raise ValueError(f"unknown corpus style {style!r}")

    train, skipped, _ = build_prefix_examples(user_bundles, "train", min_bundles)
    test, _, dropped_small = build_prefix_examples(
        user_bundles, "test", min_bundles, min_test_target=min_test
    )
    if not train:
        raise EmptyCorpus("no training examples")

    vocab = _vocab_from_examples(train, catalog)
    kept_test = []
    dropped_oov = 0
    for ex in test:
        if all(i in vocab for i in ex.target.items):
            kept_test.append(ex)
        else:
            dropped_oov += 1

    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(train))
    n_val = int(round(val_fraction * len(train)))
    val_idx = set(idx[:n_val].tolist())
    validation = [train[i] for i in sorted(val_idx)]
    train_kept = [train[i] for i in range(len(train)) if i not in val_idx]

    return DatasetSplit(
        train=train_kept,
        validation=validation,
        test=kept_test,
        vocab=vocab,
        style=style,
        seed=seed,
        skipped_users=skipped,
        dropped_small_targets=dropped_small,
        dropped_oov_targets=dropped_oov,
    )


def ingest_events(events: Sequence[RawEvent], seed: int = 0,
                  val_fraction: float = 0.1) -> DatasetSplit:
    catalog = catalog_from_events(events)
    user_bundles = group_bundles(events, catalog)
    return build_split(user_bundles, catalog, "co-purchase", seed, val_fraction)


def ingest_bundle_corpus(bundles_path, catalog_path, seed: int = 0,
                         val_fraction: float = 0.1) -> DatasetSplit:
    catalog = load_catalog(catalog_path)
    user_bundles = load_bundle_records(bundles_path, catalog)
    return build_split(user_bundles, catalog, "predefined", seed, val_fraction)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def compute_stats(split: DatasetSplit) -> CorpusStats:
    """Corpus counts; average bundle size is the mean over training-target
    bundle occurrences."""
    train_all = split.train + split.validation
    if not train_all:
        raise EmptyCorpus("empty split")
    users = {ex.context.user_id for ex in train_all} | {ex.context.user_id for ex in split.test}
    sizes = [ex.target.size for ex in train_all]
    distinct = {ex.target.as_set() for ex in train_all} | {ex.target.as_set() for ex in split.test}
    return CorpusStats(
        n_items=split.vocab.n_items,
        n_users=len(users),
        n_categories=len(split.vocab.categories()),
        n_records=len(train_all) + len(split.test),
        n_distinct_bundles=len(distinct),
        avg_bundle_size=float(np.mean(sizes)),
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _example_to_obj(ex: TrainingExample) -> dict:
    return {
        "user": ex.context.user_id,
        "context": list(ex.context.history),
        "target": list(ex.target.items),
    }


def _example_from_obj(obj: dict) -> TrainingExample:
    return TrainingExample(
        UserContext(int(obj["user"]), tuple(obj["context"])),
        Bundle(tuple(obj["target"]), canonical_order=True),
    )


def save_split(split: DatasetSplit, out_dir) -> None:
    """Persist catalog, the three example files and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "catalog.jsonl", "w", encoding="utf-8") as fh:
        for it in split.vocab.items_in_row_order():
            fh.write(json.dumps(
                {"item": it.item_id, "cate": it.category_id, "price": it.price}
            ) + "\n")
    for name, examples in (
        ("train", split.train), ("validation", split.validation), ("test", split.test)
    ):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for ex in examples:
                fh.write(json.dumps(_example_to_obj(ex)) + "\n")
    manifest = {
        "style": split.style,
        "seed": split.seed,
        "vocab_hash": split.vocab.hash(),
        "counts": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
            "items": split.vocab.n_items,
        },
        "skipped_users": split.skipped_users,
        "dropped_small_targets": split.dropped_small_targets,
        "dropped_oov_targets": split.dropped_oov_targets,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(split_dir) -> DatasetSplit:
    split_dir = Path(split_dir)
    vocab = load_catalog(split_dir / "catalog.jsonl")
    with open(split_dir / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    parts = {}
    for name in ("train", "validation", "test"):
        with open(split_dir / f"{name}.jsonl", "r", encoding="utf-8") as fh:
            parts[name] = [_example_from_obj(json.loads(line)) for line in fh if line.strip()]
    return DatasetSplit(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        vocab=vocab,
        style=manifest.get("style", "co-purchase"),
        seed=manifest.get("seed", 0),
        skipped_users=manifest.get("skipped_users", 0),
        dropped_small_targets=manifest.get("dropped_small_targets", 0),
        dropped_oov_targets=manifest.get("dropped_oov_targets", 0),
    )


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTruth:
    """What the generator planted, for oracle-style assertions."""

    patterns: tuple[tuple[int, ...], ...]
    popularity: tuple[float, ...]
    user_prefs: dict[int, tuple[int, ...]] = field(default_factory=dict)


def make_synthetic_corpus(
    path,
    seed: int,
    n_users: int = 2000,
    n_items: int = 500,
    n_patterns: int = 40,
    noise: float = 0.1,
    n_categories: int | None = None,
    orders_per_user: tuple[int, int] = (3, 6),
    pattern_size: tuple[int, int] = (2, 5),
    prefs_per_user: int = 2,
    anchor_prob: float = 0.0,
    perturb: float = 0.0,
    swap_rate: float = 0.0,
    personal_items: int = 0,
) -> SyntheticTruth:
    """Write a deterministic synthetic event file.

    Items are partitioned into categories and each planted pattern draws
    its items from a single category, so pattern membership correlates
    with the category feature. Every user gets a small set of preferred
    patterns (a personalization signal) and each order is either one of
    those patterns or, with probability `noise`, a random itemset. With
    `anchor_prob` > 0 each category has one anchor item its patterns
    include with that probability, so high-quality bundles overlap the way
    popular items make real bundles overlap. With `perturb` > 0 an order
    drawn from a pattern drops or adds one item with that probability,
    spreading probability mass over each pattern's neighborhood. With
    `swap_rate` > 0 every non-anchor pattern item is independently swapped
    for a random same-category item, so exact itemsets rarely repeat and
    the category feature carries most of the signal. `personal_items` > 0
    gives each user that many private items appended to every pattern
    order; they are globally rare but fully predictable from the user's
    own history (a repurchase signal).
    """
    if min(n_users, n_items, n_patterns) <= 0:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    if n_categories is None:
        n_categories = max(2, n_patterns // 2)
    n_categories = min(n_categories, n_items)

    cate_of = np.arange(n_items) % n_categories
    prices = np.round(rng.uniform(1.0, 100.0, size=n_items), 2)

    by_cate = [np.flatnonzero(cate_of == c) for c in range(n_categories)]
    anchors = [int(pool[0]) for pool in by_cate]
    patterns: list[tuple[int, ...]] = []
    used: set[frozenset[int]] = set()
    while len(patterns) < n_patterns:
        c = int(rng.integers(0, n_categories))
        pool = by_cate[c]
        size = int(rng.integers(pattern_size[0], pattern_size[1] + 1))
        size = min(size, len(pool))
        if size < pattern_size[0]:
            continue
        if anchor_prob > 0 and rng.random() < anchor_prob and size > 1:
            rest = pool[pool != anchors[c]]
            cand = (anchors[c],) + tuple(
                int(i) for i in rng.choice(rest, size=size - 1, replace=False)
            )
        else:
            cand = tuple(int(i) for i in rng.choice(pool, size=size, replace=False))
        if frozenset(cand) in used:
            continue
        used.add(frozenset(cand))
        patterns.append(cand)

    # mildly skewed popularity so a global frequency ranking is well defined
    pop = (np.arange(1, n_patterns + 1, dtype=np.float64)) ** -0.7
    pop /= pop.sum()

    pref_w = 0.7 ** np.arange(prefs_per_user)
    pref_w /= pref_w.sum()

    user_prefs: dict[int, tuple[int, ...]] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for user in range(n_users):
            k = min(prefs_per_user, n_patterns)
            prefs = rng.choice(n_patterns, size=k, replace=False, p=pop)
            user_prefs[user] = tuple(int(p) for p in prefs)
            own = (rng.choice(n_items, size=personal_items, replace=False)
                   if personal_items else np.zeros(0, dtype=int))
            n_orders = int(rng.integers(orders_per_user[0], orders_per_user[1] + 1))
            for order in range(n_orders):
                if noise > 0 and rng.random() < noise:
                    size = int(rng.integers(pattern_size[0], pattern_size[1] + 1))
                    items = rng.choice(n_items, size=size, replace=False)
                else:
                    p = int(prefs[rng.choice(k, p=pref_w[:k] / pref_w[:k].sum())])
                    items = np.array(patterns[p])
                    pool = by_cate[int(cate_of[items[0]])]
                    if swap_rate > 0:
                        for pos in range(1, len(items)):
                            if rng.random() < swap_rate:
                                extra = pool[~np.isin(pool, items)]
                                if len(extra):
                                    items[pos] = rng.choice(extra)
                    if perturb > 0 and rng.random() < perturb:
                        if len(items) > 2 and rng.random() < 0.5:
                            items = np.delete(items, rng.integers(len(items)))
                        else:
                            extra = pool[~np.isin(pool, items)]
                            if len(extra):
                                items = np.append(items, rng.choice(extra))
                    if personal_items:
                        items = np.append(items, own[~np.isin(own, items)])
                for item in items:
                    item = int(item)
                    fh.write(json.dumps({
                        "user": user,
                        "order": order,
                        "item": item,
                        "cate": int(cate_of[item]),
                        "price": float(prices[item]),
                    }) + "\n")
    return SyntheticTruth(tuple(patterns), tuple(pop.tolist()), user_prefs)
