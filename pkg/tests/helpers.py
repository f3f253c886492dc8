"""Shared builders for tests: tiny catalogs, tiny models, random batches."""

from __future__ import annotations

import numpy as np

from bundlegen.core import Bundle, Item, UserContext, Vocabulary
from bundlegen.data import TrainingExample
from bundlegen.model import ModelConfig, QualityModel


def tiny_vocab(n=5, seed=0, with_categories=True, n_categories=3) -> Vocabulary:
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        cate = int(rng.integers(0, n_categories)) if with_categories else None
        items.append(Item(i, float(np.round(rng.uniform(1, 20), 2)), cate))
    return Vocabulary(items)


def tiny_config(seed=0, **overrides) -> ModelConfig:
    base = dict(
        embed_dim=4, cate_dim=3, hidden_dim=5,
        cnn_window_sizes=(1, 2), cnn_channels_per_window=3,
        decoder_layers=2, f_hidden_dim=4, n_neg_samples=2,
        l2_weight=1e-4, batch_size=4, seed=seed, init_scale=0.5,
        max_context_len=16, max_epochs=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(n_items=5, seed=0, **overrides) -> QualityModel:
    vocab = tiny_vocab(n_items, seed=seed)
    return QualityModel(vocab, tiny_config(seed=seed, **overrides))


def random_example(vocab: Vocabulary, rng, max_ctx=8, max_target=3) -> TrainingExample:
    n = vocab.n_items
    ctx_len = int(rng.integers(1, max_ctx + 1))
    history = tuple(int(i) for i in rng.integers(0, n, size=ctx_len))
    t = int(rng.integers(1, min(max_target, n) + 1))
    target_ids = rng.choice(n, size=t, replace=False)
    ordered = sorted((int(i) for i in target_ids),
                     key=lambda i: (-vocab.item(i).price, i))
    return TrainingExample(
        UserContext(int(rng.integers(0, 100)), history),
        Bundle(tuple(ordered), canonical_order=True),
    )
