"""Domain-type behavior: canonical ordering, set views, Jaccard."""

import numpy as np
import pytest

from bundlegen.core import (
    Bundle,
    BundleList,
    DegenerateInput,
    Item,
    UnknownItem,
    UserContext,
    Vocabulary,
    bundle_as_set,
    canonicalize_bundle,
    jaccard,
)


@pytest.fixture
def vocab():
    return Vocabulary([
        Item(0, 5.0, 1),
        Item(1, 9.0, 1),
        Item(2, 5.0, 2),
        Item(3, 2.5, None),
    ])


class TestCanonicalize:
    def test_sorts_by_descending_price(self, vocab):
        b = canonicalize_bundle([0, 1], vocab)
        assert b.items == (1, 0)
        assert b.canonical_order

    def test_singleton_unchanged(self, vocab):
        assert canonicalize_bundle([3], vocab).items == (3,)

    def test_price_tie_broken_by_ascending_id(self, vocab):
        # items 0 and 2 share price 5.0
        assert canonicalize_bundle([2, 0], vocab).items == (0, 2)

    def test_duplicates_dropped_first_kept(self, vocab):
        b = canonicalize_bundle([0, 0, 1, 0], vocab)
        assert b.items == (1, 0)

    def test_idempotent(self, vocab):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ids = rng.choice(4, size=rng.integers(1, 5), replace=False).tolist()
            once = canonicalize_bundle(ids, vocab)
            twice = canonicalize_bundle(once.items, vocab)
            assert once == twice

    def test_set_round_trip(self, vocab):
        raw = [2, 0, 2, 1]
        assert bundle_as_set(canonicalize_bundle(raw, vocab)) == {0, 1, 2}

    def test_unknown_item_raises_with_id(self, vocab):
        with pytest.raises(UnknownItem) as exc:
            canonicalize_bundle([0, 99], vocab)
        assert exc.value.item_id == 99


class TestBundle:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            Bundle((1, 1))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Bundle(())

    def test_set_view_is_order_invariant(self):
        assert Bundle((1, 2, 3)).as_set() == Bundle((3, 1, 2)).as_set()


class TestJaccard:
    def test_identical(self):
        assert jaccard({1, 2}, {1, 2}) == 1.0

    def test_disjoint(self):
        assert jaccard({1, 2}, {3, 4}) == 0.0

    def test_one_shared_of_three(self):
        assert jaccard({1, 2}, {2, 3}) == pytest.approx(1 / 3)

    def test_both_empty_rejected(self):
        with pytest.raises(DegenerateInput):
            jaccard(set(), set())

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = set(rng.integers(0, 8, size=rng.integers(1, 6)).tolist())
            b = set(rng.integers(0, 8, size=rng.integers(1, 6)).tolist())
            j = jaccard(a, b)
            assert j == jaccard(b, a)
            assert 0.0 <= j <= 1.0
            assert jaccard(a, a) == 1.0


class TestContainers:
    def test_bundle_list_scores_length_checked(self):
        with pytest.raises(ValueError):
            BundleList((Bundle((1,)),), scores=(0.0, -1.0))

    def test_user_context_nonempty(self):
        with pytest.raises(ValueError):
            UserContext(0, ())

    def test_vocab_reserved_rows_outside_items(self, vocab):
        n = vocab.n_items
        rows = {vocab.pad_row, vocab.bos_row, vocab.end_row, vocab.unk_row}
        assert rows == {n, n + 1, n + 2, n + 3}
        assert vocab.row(0) < n

    def test_vocab_hash_sensitive_to_catalog(self, vocab):
        other = Vocabulary([Item(0, 5.0, 1), Item(1, 9.0, 1), Item(2, 5.0, 2),
                            Item(3, 2.6, None)])
        assert vocab.hash() != other.hash()
