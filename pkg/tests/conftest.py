"""Session fixtures for the trained desk-scale models the trend tests use.

Training is the expensive part of the suite, so the desk model and the
three-seed ablation runs are built once and shared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from bundlegen.data import ingest_events, load_events, make_synthetic_corpus
from bundlegen.evaluation import GroundTruth, freq_baseline, precision_at_k
from bundlegen.generate import GenerationConfig, Generator
from bundlegen.model import QualityModel, desk_config, train

DESK_CORPUS = dict(
    n_users=2000, n_items=500, n_patterns=30, noise=0.05,
    pattern_size=(3, 5), n_categories=10, anchor_prob=0.9, perturb=0.5,
)

ABLATION_CORPUS = dict(
    n_users=500, n_items=600, n_patterns=30, noise=0.05,
    pattern_size=(4, 6), n_categories=30, anchor_prob=0.9, swap_rate=0.5,
)


def ablation_model_config(seed: int, feature_aware: bool):
    return desk_config(
        seed=seed, max_epochs=12, embed_dim=16, cate_dim=16, hidden_dim=24,
        cnn_window_sizes=(1, 2, 4), cnn_channels_per_window=6, f_hidden_dim=32,
        n_neg_samples=192, feature_aware=feature_aware, init_scale=0.3,
    )


@dataclass
class DeskRun:
    split: object
    model: QualityModel
    build_seconds: float


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    """Desk-scale corpus (500 items, 2000 users) and a trained model."""
    t0 = time.perf_counter()
    path = tmp_path_factory.mktemp("desk") / "events.jsonl"
    make_synthetic_corpus(path, seed=0, **DESK_CORPUS)
    split = ingest_events(load_events(path), seed=0)
    cfg = desk_config(seed=0, max_epochs=14)
    model = QualityModel(split.vocab, cfg)
    train(model, split, cfg)
    return DeskRun(split, model, time.perf_counter() - t0)


@dataclass
class AblationRun:
    seed: int
    pre10_fa: float
    pre10_id: float
    pre10_freq: float


@pytest.fixture(scope="session")
def ablation_runs(tmp_path_factory) -> list[AblationRun]:
    """Three seeds of the sparse category-structured corpus, each trained
    with the feature-aware and the id-only softmax, evaluated at pre@10."""
    out = []
    base = tmp_path_factory.mktemp("ablation")
    for seed in (0, 1, 2):
        path = base / f"events_{seed}.jsonl"
        make_synthetic_corpus(path, seed=seed, **ABLATION_CORPUS)
        split = ingest_events(load_events(path), seed=seed)
        examples = split.test[:120]
        users = [ex.context for ex in examples]
        gt = GroundTruth.from_examples(examples)
        scores = {}
        for fa in (True, False):
            cfg = ablation_model_config(seed, fa)
            model = QualityModel(split.vocab, cfg)
            train(model, split, cfg)
            gen = Generator(model, GenerationConfig(
                beam_width=30, list_size=10, max_bundle_size=10))
            lists = {u.user_id: gen(u) for u in users}
            scores["fa" if fa else "id"] = precision_at_k(lists, gt, 10)
        freq = freq_baseline(
            [ex.target for ex in split.train + split.validation], 10, vocab=split.vocab)
        scores["freq"] = precision_at_k({u.user_id: freq for u in users}, gt, 10)
        out.append(AblationRun(seed, scores["fa"], scores["id"], scores["freq"]))
    return out
