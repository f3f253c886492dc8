"""Domain types shared across the package: items, bundles, bundle lists,
user contexts, and the vocabulary tying item ids to dense model rows.

All types are immutable after construction and safe to share read-only
across parallel workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence


class UnknownItem(KeyError):
    """An item id that cannot be resolved in the vocabulary."""

    def __init__(self, item_id):
        super().__init__(item_id)
        self.item_id = item_id

    def __str__(self):
        return f"unknown item id: {self.item_id}"


class DegenerateInput(ValueError):
    """Input for which the requested quantity is undefined."""


@dataclass(frozen=True)
class Item:
    """Catalog entry. `category_id` is None for corpora without categories."""

    item_id: int
    price: float
    category_id: int | None = None

    def __post_init__(self):
        if self.price < 0:
            raise ValueError(f"negative price for item {self.item_id}")


@dataclass(frozen=True)
class Bundle:
    """An unordered set of items together with a generation order.

    `canonical_order` marks sequences sorted by descending price (ties
    broken by ascending item id), the order used for teacher forcing.
    """

    items: tuple[int, ...]
    canonical_order: bool = False

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        if len(self.items) == 0:
            raise ValueError("empty bundle")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate items in bundle: {self.items}")

    @property
    def size(self) -> int:
        return len(self.items)

    def as_set(self) -> frozenset[int]:
        return frozenset(self.items)


@dataclass(frozen=True)
class BundleList:
    """The K bundles shown to one user, optionally with per-bundle scores
    (accumulated log-probabilities under the quality model)."""

    bundles: tuple[Bundle, ...]
    scores: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
            if len(self.scores) != len(self.bundles):
                raise ValueError("scores length differs from bundle count")

    def __len__(self) -> int:
        return len(self.bundles)

    def __iter__(self):
        return iter(self.bundles)


@dataclass(frozen=True)
class UserContext:
    """Ordered click/purchase history of one user, oldest item first."""

    user_id: int
    history: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(int(i) for i in self.history))
        if len(self.history) == 0:
            raise ValueError("empty user history")


class Vocabulary:
    """Item catalog plus reserved token rows.

    Items occupy rows [0, n_items) in ascending item-id order; the PAD,
    BOS (begin of bundle), END (end of bundle) and UNK rows follow, so
    every reserved id stays outside the item range.
    """

    def __init__(self, items: Iterable[Item]):
        self._items: dict[int, Item] = {}
        for it in items:
            if it.item_id in self._items:
                raise ValueError(f"duplicate item id {it.item_id}")
            self._items[int(it.item_id)] = it
        if not self._items:
            raise ValueError("empty vocabulary")
        self._order: list[int] = sorted(self._items)
        self._row = {item_id: r for r, item_id in enumerate(self._order)}

    @property
    def n_items(self) -> int:
        return len(self._order)

    @property
    def n_rows(self) -> int:
        """Item rows plus the four reserved token rows."""
        return self.n_items + 4

    @property
    def pad_row(self) -> int:
        return self.n_items

    @property
    def bos_row(self) -> int:
        return self.n_items + 1

    @property
    def end_row(self) -> int:
        return self.n_items + 2

    @property
    def unk_row(self) -> int:
        return self.n_items + 3

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._items

    def item(self, item_id: int) -> Item:
        try:
            return self._items[item_id]
        except KeyError:
            raise UnknownItem(item_id) from None

    def row(self, item_id: int, unk: bool = False) -> int:
        """Dense row of an item; with unk=True out-of-catalog ids map to
        the UNK row instead of raising."""
        r = self._row.get(item_id)
        if r is None:
            if unk:
                return self.unk_row
            raise UnknownItem(item_id)
        return r

    def item_id_at(self, row: int) -> int:
        return self._order[row]

    def items_in_row_order(self) -> list[Item]:
        return [self._items[i] for i in self._order]

    def categories(self) -> list[int]:
        cats = {it.category_id for it in self._items.values() if it.category_id is not None}
        return sorted(cats)

    def hash(self) -> str:
        """Stable digest of the catalog; checkpoints embed it so a model is
        never applied to a vocabulary it was not trained on."""
        h = hashlib.sha256()
        for it in self.items_in_row_order():
            h.update(f"{it.item_id},{it.category_id},{it.price!r}\n".encode())
        return h.hexdigest()


def canonicalize_bundle(items: Sequence[int], vocab: Vocabulary) -> Bundle:
    """Dedupe (first occurrence wins) and sort by descending price, ties by
    ascending item id. Raises UnknownItem for unresolvable ids."""
    seen = []
    for i in items:
        i = int(i)
        if i not in vocab:
            raise UnknownItem(i)
        if i not in seen:
            seen.append(i)
    if not seen:
        raise DegenerateInput("no items to canonicalize")
    ordered = sorted(seen, key=lambda i: (-vocab.item(i).price, i))
    return Bundle(tuple(ordered), canonical_order=True)


def bundle_as_set(b: Bundle) -> frozenset[int]:
    return b.as_set()


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """|a n b| / |a u b| for non-empty sets; both empty is undefined."""
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        raise DegenerateInput("jaccard of two empty sets")
    return len(sa & sb) / len(union)
