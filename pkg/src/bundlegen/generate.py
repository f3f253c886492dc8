"""Inference pipeline: masked beam search over the quality model produces
candidate bundles, then a greedy determinantal selection balances candidate
log-probability against the log-determinant of the selected set's Jaccard
similarity matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .core import Bundle, BundleList, UserContext, jaccard
from .model import DecoderState, EncoderOutput, QualityModel
from .numerics import SingularKernel, Tensor, empty_cholesky, logdet_extend, no_grad


class ShortList(RuntimeError):
    """Selection could not reach K bundles; carries the partial list."""

    def __init__(self, selected: BundleList, requested: int):
        super().__init__(f"only {len(selected)} of {requested} bundles selectable")
        self.selected = selected
        self.requested = requested


@dataclass
class GenerationConfig:
    """Knobs of the inference pipeline.

    `lambda_` trades candidate log-probability against diversity, `shift`
    penalizes the end token for the first `shift` steps (larger values
    push generated bundles longer).
    """

    beam_width: int = 50
    list_size: int = 10
    max_bundle_size: int = 8
    lambda_: float = 0.0
    shift: float = 0.0
    jitter: float = nm.DEFAULT_JITTER

    def __post_init__(self):
        if not (self.beam_width >= self.list_size >= 1):
            raise ValueError("need beam_width >= list_size >= 1")
        if self.max_bundle_size < 1:
            raise ValueError("max_bundle_size must be >= 1")
        if self.lambda_ < 0 or self.shift < 0:
            raise ValueError("lambda_ and shift must be non-negative")


@dataclass
class BeamEntry:
    """One open or finished decoding hypothesis; `prefix` holds vocabulary
    rows in generation order and never contains duplicates."""

    prefix: tuple[int, ...]
    log_prob: float
    finished: bool = False


@dataclass
class CandidateSet:
    """Set-deduplicated beam output, sorted by log-probability descending;
    each bundle keeps the best-scoring generation order."""

    bundles: list[Bundle] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.bundles)


def mask_vector(t: int, generated_rows, config: GenerationConfig, n_items: int
                ) -> np.ndarray:
    """Additive mask over the candidate space (items then END) at step t:
    END is penalized by max(shift - t, 0), already-generated items are
    suppressed entirely, everything else passes through."""
    if t < 1:
        raise ValueError("steps are 1-based")
    m = np.zeros(n_items + 1)
    m[n_items] = max(config.shift - t, 0.0)
    rows = list(generated_rows)
    if rows:
        m[np.asarray(rows, dtype=np.intp)] = np.inf
    return m


def similarity(a: Bundle, b: Bundle) -> float:
    """Jaccard similarity of the two bundles' item sets."""
    return jaccard(a.as_set(), b.as_set())


def _dedupe(entries: list[BeamEntry], model: QualityModel) -> CandidateSet:
    entries = sorted(entries, key=lambda e: (-e.log_prob, e.prefix))
    out = CandidateSet()
    seen: set[frozenset[int]] = set()
    for e in entries:
        key = frozenset(e.prefix)
        if key in seen:
            continue
        seen.add(key)
        items = tuple(model.vocab.item_id_at(r) for r in e.prefix)
        out.bundles.append(Bundle(items))
        out.log_probs.append(e.log_prob)
    return out


def beam_search(model: QualityModel, context: UserContext, config: GenerationConfig,
                weight_matrix: np.ndarray | None = None) -> CandidateSet:
    """Masked beam search with the full softmax weight matrix.

    Each step expands every open hypothesis over all unmasked candidates
    and keeps the top `beam_width` entries by accumulated log-probability,
    finished hypotheses competing in the same pool. The end token is
    additionally suppressed at step 1 so no empty bundle is produced.
    Hypotheses still open after `max_bundle_size` steps are closed by
    charging the end token's log-probability one step later. Results are
    deduplicated as sets, keeping the best score per set.
    """
    n = model.vocab.n_items
    end = n  # candidate index of the end token
    M = config.beam_width
    with no_grad():
        if weight_matrix is None:
            weight_matrix = model.full_weight_matrix()
        enc = model.encode([context])
        finished: list[BeamEntry] = []
        beams = [BeamEntry((), 0.0)]
        states = model.initial_state(enc.h0)
        # per-beam decoder state kept as stacked arrays
        hs = [h.data.copy() for h in states.hs]
        cs = [c.data.copy() for c in states.cs]
        prev_rows = np.array([model.vocab.bos_row], dtype=np.intp)

        for t in range(1, config.max_bundle_size + 2):
            if not beams:
                break
            state = _ArrayState(hs, cs)
            state, h_tilde = _step_arrays(model, state, prev_rows, enc)
            hs, cs = state.hs, state.cs
            logits = h_tilde @ weight_matrix.T  # (n_beams, n+1)
            mask = np.zeros_like(logits)
            for i, b in enumerate(beams):
                mask[i] = mask_vector(t, b.prefix, config, n)
                if t == 1:
                    mask[i, end] = np.inf
            lp = nm.masked_log_probs(logits, mask)
            totals = np.array([b.log_prob for b in beams])[:, None] + lp

            if t == config.max_bundle_size + 1:
                # close every remaining hypothesis with the end token
                for i, b in enumerate(beams):
                    finished.append(BeamEntry(b.prefix, float(totals[i, end]), True))
                break

            flat = totals.ravel()
            top = min(M, flat.size)
            if flat.size > 4 * M:
                part = np.argpartition(-flat, top - 1)[:top]
                order = part[np.argsort(-flat[part], kind="stable")]
            else:
                order = np.argsort(-flat, kind="stable")
            fin_sorted = sorted(finished, key=lambda e: -e.log_prob)
            fi = 0
            new_beams: list[BeamEntry] = []
            new_finished: list[BeamEntry] = []
            parent_idx: list[int] = []
            taken = 0
            oi = 0
            # merge expansions and carried-forward finished entries, best first
            while taken < M and (oi < order.size or fi < len(fin_sorted)):
                next_exp = flat[order[oi]] if oi < order.size else -np.inf
                next_fin = fin_sorted[fi].log_prob if fi < len(fin_sorted) else -np.inf
                if next_fin >= next_exp:
                    if not np.isfinite(next_fin):
                        break
                    new_finished.append(fin_sorted[fi])
                    fi += 1
                    taken += 1
                    continue
                if not np.isfinite(next_exp):
                    break
                bi, cand = divmod(int(order[oi]), n + 1)
                oi += 1
                src = beams[bi]
                if cand == end:
                    new_finished.append(BeamEntry(src.prefix, float(next_exp), True))
                else:
                    new_beams.append(BeamEntry(src.prefix + (cand,), float(next_exp)))
                    parent_idx.append(bi)
                taken += 1
            finished = new_finished
            beams = new_beams
            if beams:
                sel = np.asarray(parent_idx, dtype=np.intp)
                hs = [h[sel] for h in hs]
                cs = [c[sel] for c in cs]
                prev_rows = np.array([b.prefix[-1] for b in beams], dtype=np.intp)

        return _dedupe(finished, model)


@dataclass
class _ArrayState:
    hs: list[np.ndarray]
    cs: list[np.ndarray]


def _step_arrays(model: QualityModel, state: _ArrayState, prev_rows, enc):
    """Array-valued decoder step; encoder memory is broadcast across beams."""
    n_beams = len(prev_rows)
    mem = np.broadcast_to(enc.memory.data, (n_beams,) + enc.memory.data.shape[1:])
    mproj = np.broadcast_to(enc.mproj.data, (n_beams,) + enc.mproj.data.shape[1:])
    bias = np.broadcast_to(enc.attn_bias, (n_beams,) + enc.attn_bias.shape[1:])
    enc_b = EncoderOutput(Tensor(np.zeros((n_beams, 1))), Tensor(mem), Tensor(mproj), bias)
    dstate = DecoderState([Tensor(h) for h in state.hs], [Tensor(c) for c in state.cs])
    dstate, h_tilde = model.decoder_step(dstate, prev_rows, enc_b)
    return _ArrayState([h.data for h in dstate.hs], [c.data for c in dstate.cs]), h_tilde.data


def dpp_select(candidates: CandidateSet, config: GenerationConfig) -> BundleList:
    """Greedy selection of `list_size` bundles.

    Each round picks the candidate maximizing log_prob + lambda * log det
    of the selected set's similarity matrix, extended incrementally via
    Cholesky. With lambda == 0 the determinant is ignored and selection is
    exactly top-K by log-probability. A candidate whose extension is
    numerically singular (a duplicate set makes the determinant zero) is
    skipped; ties break on higher log_prob, then lexicographic items.
    """
    K = config.list_size
    lam = config.lambda_
    remaining = list(range(len(candidates)))
    chosen: list[int] = []
    state = empty_cholesky()
    sims: dict[tuple[int, int], float] = {}

    def sim(i, j):
        key = (min(i, j), max(i, j))
        if key not in sims:
            sims[key] = similarity(candidates.bundles[i], candidates.bundles[j])
        return sims[key]

    while remaining and len(chosen) < K:
        best_idx = None
        best_score = best_lp = -np.inf
        best_items: tuple[int, ...] = ()
        best_state = None
        for idx in remaining:
            lp = candidates.log_probs[idx]
            if lam == 0.0:
                score, new_state = lp, state
            else:
                row = np.array([sim(idx, j) for j in chosen])
                try:
                    new_state, logdet = logdet_extend(state, row, 1.0, config.jitter)
                except SingularKernel:
                    continue
                if new_state.jittered:
                    continue  # determinant numerically zero
                score = lp + lam * logdet
            items = tuple(sorted(candidates.bundles[idx].items))
            if (best_idx is None or score > best_score
                    or (score == best_score
                        and (lp > best_lp or (lp == best_lp and items < best_items)))):
                best_idx, best_score, best_lp = idx, score, lp
                best_items, best_state = items, new_state
        if best_idx is None:
            break
        state = best_state
        chosen.append(best_idx)
        remaining.remove(best_idx)

    result = BundleList(
        tuple(candidates.bundles[i] for i in chosen),
        tuple(candidates.log_probs[i] for i in chosen),
    )
    if len(chosen) < K:
        raise ShortList(result, K)
    return result


def generate(model: QualityModel, context: UserContext, config: GenerationConfig,
             weight_matrix: np.ndarray | None = None, trace: bool = False):
    """Beam search then one greedy selection on the final candidate set.

    With trace=True, also returns the intermediate selections y_t obtained
    by running the selection on the beam snapshot after each step (for
    inspection; the final list only depends on the final candidates).
    """
    candidates = beam_search(model, context, config, weight_matrix)
    selected = dpp_select(candidates, config)
    if not trace:
        return selected
    traces = []
    for t in range(1, config.max_bundle_size + 1):
        sub = GenerationConfig(
            beam_width=config.beam_width,
            list_size=config.list_size,
            max_bundle_size=t,
            lambda_=config.lambda_,
            shift=config.shift,
            jitter=config.jitter,
        )
        cand_t = beam_search(model, context, sub, weight_matrix)
        try:
            traces.append(dpp_select(cand_t, sub))
        except ShortList as exc:
            traces.append(exc.selected)
    return selected, traces


class Generator:
    """Frozen-model generator that precomputes the softmax weight matrix
    once, so per-user calls measure only the decoding work."""

    def __init__(self, model: QualityModel, config: GenerationConfig):
        self.model = model
        self.config = config
        self.weight_matrix = model.full_weight_matrix()

    def __call__(self, context: UserContext) -> BundleList:
        return generate(self.model, context, self.config, self.weight_matrix)


def write_recommendations(path, results: Sequence[tuple[int, BundleList]],
                          config: GenerationConfig) -> None:
    """JSONL, one user per line, ordered by user id."""
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, blist in sorted(results, key=lambda r: r[0]):
            fh.write(json.dumps({
                "user": user_id,
                "bundles": [list(b.items) for b in blist.bundles],
                "log_probs": list(blist.scores or []),
                "lambda": config.lambda_,
                "C": int(config.shift),
            }) + "\n")


def read_recommendations(path) -> dict[int, BundleList]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            bundles = tuple(Bundle(tuple(b)) for b in obj["bundles"])
            scores = tuple(obj["log_probs"]) if obj.get("log_probs") else None
            out[int(obj["user"])] = BundleList(bundles, scores)
    return out
