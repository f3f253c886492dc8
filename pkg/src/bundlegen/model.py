"""The trainable sequence quality model.

A convolutional encoder summarizes the user's purchase history, a stacked
LSTM decoder with multiplicative attention emits one item per step, and a
softmax head scores candidates. In feature-aware mode the softmax weight
rows are computed from item features (id embedding, category embedding,
price) by a learned nonlinear transform, so items sharing features share
probability mass; in id-only mode a static per-id weight table is used.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from .core import Bundle, UnknownItem, UserContext, Vocabulary
from .data import DatasetSplit, TrainingExample
from .numerics import Tensor, no_grad

NEG_BIG = -1e30


class EmptyContext(ValueError):
    """Encoder received an empty history."""


class VocabMismatch(ValueError):
    """Checkpoint was trained on a different catalog."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class ModelConfig:
    """Dimensions and training hyper-parameters.

    Defaults are the full-scale settings; `desk_config` shrinks them to
    sizes that train in seconds on one CPU core.
    """

    embed_dim: int = 64
    cate_dim: int = 64
    hidden_dim: int = 64
    cnn_window_sizes: tuple[int, ...] = (1, 2, 4, 8, 12, 16, 32, 64)
    cnn_channels_per_window: int = 12
    decoder_layers: int = 2
    n_neg_samples: int = 1024
    l2_weight: float = 5e-5
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    feature_aware: bool = True
    f_hidden_dim: int = 64
    max_context_len: int = 64
    max_epochs: int = 30
    patience: int = 3
    init_scale: float = 0.1

    def __post_init__(self):
        dims = (self.embed_dim, self.cate_dim, self.hidden_dim,
                self.cnn_channels_per_window, self.f_hidden_dim,
                self.batch_size, self.max_context_len)
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        if self.decoder_layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.cnn_window_sizes = tuple(int(w) for w in self.cnn_window_sizes)

    @property
    def input_dim(self) -> int:
        # item embedding + category embedding + price scalar
        return self.embed_dim + self.cate_dim + 1


def desk_config(**overrides) -> ModelConfig:
    """Small preset for desk-scale corpora."""
    base = dict(
        embed_dim=24,
        cate_dim=8,
        hidden_dim=32,
        cnn_window_sizes=(1, 2, 4, 8),
        cnn_channels_per_window=8,
        decoder_layers=2,
        n_neg_samples=64,
        learning_rate=3e-3,
        batch_size=16,
        f_hidden_dim=32,
        max_epochs=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class DecoderState:
    """Per-layer hidden and cell vectors for one decoding step."""

    hs: list[Tensor]
    cs: list[Tensor]


@dataclass
class EncoderOutput:
    """Context summary: initial decoder hidden state, per-position feature
    maps for attention, the cached attention projection of those maps, and
    an additive bias that suppresses padded positions."""

    h0: Tensor
    memory: Tensor
    mproj: Tensor
    attn_bias: np.ndarray


class QualityModel:
    """All trainable parameters plus the catalog-derived feature arrays."""

    def __init__(self, vocab: Vocabulary, config: ModelConfig):
        self.vocab = vocab
        self.config = config
        n = vocab.n_items
        self.n_candidates = n + 1  # items plus END
        self.end_candidate = n

        cats = vocab.categories()
        self._cate_index_of = {c: i + 1 for i, c in enumerate(cats)}
        self.n_categories = len(cats)

        # per-row feature arrays (items, then PAD/BOS/END/UNK)
        rows = vocab.n_rows
        self._cate_idx = np.zeros(rows, dtype=np.intp)
        self._price_feat = np.zeros(rows, dtype=np.float64)
        self._emb_mask = np.ones(rows, dtype=np.float64)
        self._cate_mask = np.zeros(rows, dtype=np.float64)
        log_prices = np.array(
            [math.log1p(it.price) for it in vocab.items_in_row_order()], dtype=np.float64
        )
        mu = float(log_prices.mean())
        sd = float(log_prices.std())
        if sd == 0.0:
            sd = 1.0
        for r, it in enumerate(vocab.items_in_row_order()):
            if it.category_id is not None:
                self._cate_idx[r] = self._cate_index_of[it.category_id]
                self._cate_mask[r] = 1.0
            self._price_feat[r] = (math.log1p(it.price) - mu) / sd
        self._emb_mask[vocab.pad_row] = 0.0
        self._cand_emb_row = np.concatenate(
            [np.arange(n, dtype=np.intp), [vocab.end_row]]
        )

        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, shape, rng, scale=None, fill=None) -> Tensor:
        if fill is not None:
            data = np.full(shape, fill, dtype=np.float64)
        else:
            scale = self.config.init_scale if scale is None else scale
            data = rng.normal(0.0, scale, size=shape)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self, rng):
        cfg = self.config
        dx, h = cfg.input_dim, cfg.hidden_dim
        c = cfg.cnn_channels_per_window

        emb = self._param("item_emb", (self.vocab.n_rows, cfg.embed_dim), rng)
        emb.data[self.vocab.pad_row] = 0.0
        cate = self._param("cate_emb", (self.n_categories + 1, cfg.cate_dim), rng)
        cate.data[0] = 0.0

        for w in cfg.cnn_window_sizes:
            self._param(f"conv{w}_K", (w, dx, c), rng)
            self._param(f"conv{w}_b", (c,), rng, fill=0.0)
        self._param("enc_proj_W", (c * len(cfg.cnn_window_sizes), h), rng)
        self._param("enc_proj_b", (h,), rng, fill=0.0)

        self._param("attn_W", (h, c), rng)
        self._param("attn_out_W", (c + h, h), rng)
        self._param("attn_out_b", (h,), rng, fill=0.0)

        for layer in range(cfg.decoder_layers):
            in_dim = (dx if layer == 0 else h) + h
            for gate in ("i", "f", "g", "o"):
                self._param(f"lstm{layer}_{gate}_W", (in_dim, h), rng)
                self._param(f"lstm{layer}_{gate}_b", (h,), rng,
                            fill=1.0 if gate == "f" else 0.0)

        if cfg.feature_aware:
            # no output bias: a constant added to every weight row shifts all
            # logits equally and cancels in the softmax
            self._param("fa_W1", (dx, cfg.f_hidden_dim), rng)
            self._param("fa_b1", (cfg.f_hidden_dim,), rng, fill=0.0)
            self._param("fa_W2", (cfg.f_hidden_dim, h), rng)
        else:
            self._param("softmax_table", (self.n_candidates, h), rng)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_param_data(self, data: dict[str, np.ndarray]):
        if set(data) != set(self.params):
            raise ValueError("parameter names do not match this configuration")
        for k, p in self.params.items():
            if p.data.shape != data[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = data[k].astype(np.float64).copy()

    # -- embeddings ---------------------------------------------------------

    def embed_rows(self, rows) -> Tensor:
        """Feature vectors [item_emb, cate_emb, price] for dense rows of any
        shape; PAD comes back all-zero, categoryless rows have a zero
        category slice."""
        rows = np.asarray(rows, dtype=np.intp)
        it = nm.mul(nm.take_rows(self.params["item_emb"], rows),
                    self._emb_mask[rows][..., None])
        ct = nm.mul(nm.take_rows(self.params["cate_emb"], self._cate_idx[rows]),
                    self._cate_mask[rows][..., None])
        pr = Tensor(self._price_feat[rows][..., None])
        return nm.concat([it, ct, pr], axis=-1)

    def embed_item(self, item_id: int) -> np.ndarray:
        """Feature vector of one catalog item (raises UnknownItem)."""
        row = self.vocab.row(item_id)
        with no_grad():
            return self.embed_rows(np.array([row])).data[0]

    # -- encoder ------------------------------------------------------------

    def _pad_contexts(self, contexts: Sequence[UserContext]):
        limit = self.config.max_context_len
        histories = []
        for c in contexts:
            if len(c.history) == 0:
                raise EmptyContext(f"user {c.user_id} has an empty history")
            rows = [self.vocab.row(i, unk=True) for i in c.history[-limit:]]
            histories.append(rows)
        lengths = np.array([len(hh) for hh in histories], dtype=np.intp)
        max_len = int(lengths.max())
        ids = np.full((len(histories), max_len), self.vocab.pad_row, dtype=np.intp)
        for b, hh in enumerate(histories):
            ids[b, : len(hh)] = hh
        return ids, lengths

    def encode(self, contexts: Sequence[UserContext]) -> EncoderOutput:
        """Convolve the embedded history per window size, max-pool the
        valid positions into the initial decoder state, and expose the
        pre-pool feature maps as the attention memory."""
        if len(contexts) == 0:
            raise EmptyContext("no contexts")
        ids, lengths = self._pad_contexts(contexts)
        B, L = ids.shape
        x = self.embed_rows(ids)
        c = self.config.cnn_channels_per_window

        pooled, mems, valid_masks = [], [], []
        pos = np.arange(L)
        for w in self.config.cnn_window_sizes:
            if w > L:
                # window wider than every padded history: channels zero
                pooled.append(Tensor(np.zeros((B, c))))
                continue
            wins = nm.unfold_windows(x, w)
            conv = nm.relu(nm.add(
                nm.einsum2("blwd,wdc->blc", wins, self.params[f"conv{w}_K"]),
                self.params[f"conv{w}_b"],
            ))
            valid = pos[None, : L - w + 1] < (lengths - w + 1)[:, None]
            bias = np.where(valid, 0.0, NEG_BIG)[:, :, None]
            has_any = (lengths >= w).astype(np.float64)[:, None]
            pooled.append(nm.mul(nm.maxt(nm.add(conv, bias), axis=1), has_any))
            mems.append(conv)
            valid_masks.append(valid)

        pooled_cat = nm.concat(pooled, axis=-1)
        h0 = nm.tanh(nm.add(
            nm.einsum2("bf,fh->bh", pooled_cat, self.params["enc_proj_W"]),
            self.params["enc_proj_b"],
        ))
        memory = nm.concat(mems, axis=1) if len(mems) > 1 else mems[0]
        attn_bias = np.where(np.concatenate(valid_masks, axis=1), 0.0, NEG_BIG)
        mproj = nm.einsum2("blc,hc->blh", memory, self.params["attn_W"])
        return EncoderOutput(h0, memory, mproj, attn_bias)

    def encode_context(self, context: UserContext) -> np.ndarray:
        """Initial decoder hidden state for one user."""
        with no_grad():
            return self.encode([context]).h0.data[0]

    # -- decoder ------------------------------------------------------------

    def initial_state(self, h0: Tensor) -> DecoderState:
        zeros = Tensor(np.zeros_like(h0.data))
        return DecoderState(
            hs=[h0 for _ in range(self.config.decoder_layers)],
            cs=[zeros for _ in range(self.config.decoder_layers)],
        )

    def decoder_step(self, state: DecoderState, prev_rows, enc: EncoderOutput
                     ) -> tuple[DecoderState, Tensor]:
        """One stacked-LSTM step on the previous item's features, followed
        by multiplicative attention over the encoder memory; returns the
        attentional hidden vector used for the softmax."""
        inp = self.embed_rows(np.asarray(prev_rows, dtype=np.intp))
        new_hs, new_cs = [], []
        for layer in range(self.config.decoder_layers):
            z = nm.concat([inp, state.hs[layer]], axis=-1)

            def gate(name, act):
                pre = nm.add(
                    nm.einsum2("bf,fh->bh", z, self.params[f"lstm{layer}_{name}_W"]),
                    self.params[f"lstm{layer}_{name}_b"],
                )
                return act(pre)

            i = gate("i", nm.sigmoid)
            f = gate("f", nm.sigmoid)
            g = gate("g", nm.tanh)
            o = gate("o", nm.sigmoid)
            cell = nm.add(nm.mul(f, state.cs[layer]), nm.mul(i, g))
            hidden = nm.mul(o, nm.tanh(cell))
            new_hs.append(hidden)
            new_cs.append(cell)
            inp = hidden

        h_top = new_hs[-1]
        scores = nm.add(nm.einsum2("blh,bh->bl", enc.mproj, h_top), enc.attn_bias)
        alpha = nm.softmaxt(scores)
        ctx = nm.einsum2("bl,blc->bc", alpha, enc.memory)
        h_tilde = nm.tanh(nm.add(
            nm.einsum2("bf,fh->bh", nm.concat([ctx, h_top], axis=-1),
                       self.params["attn_out_W"]),
            self.params["attn_out_b"],
        ))
        return DecoderState(new_hs, new_cs), h_tilde

    # -- softmax weights ----------------------------------------------------

    def fa_weight_matrix(self, candidates=None) -> Tensor:
        """Softmax weight rows for candidate indices (item rows, index
        n_items = END); None selects the full vocabulary plus END.

        Feature-aware mode computes each row from the candidate's feature
        vector with a one-hidden-layer transform; the END row comes from
        its learned token embedding through the same transform. Id-only
        mode reads a static table.
        """
        if candidates is None:
            candidates = np.arange(self.n_candidates, dtype=np.intp)
        candidates = np.asarray(candidates, dtype=np.intp)
        if not self.config.feature_aware:
            return nm.take_rows(self.params["softmax_table"], candidates)
        x = self.embed_rows(self._cand_emb_row[candidates])
        flat = nm.reshape(x, (-1, self.config.input_dim))
        h1 = nm.tanh(nm.add(
            nm.einsum2("nd,df->nf", flat, self.params["fa_W1"]), self.params["fa_b1"]
        ))
        e = nm.einsum2("nf,fh->nh", h1, self.params["fa_W2"])
        return nm.reshape(e, candidates.shape + (self.config.hidden_dim,))

    def full_weight_matrix(self) -> np.ndarray:
        """Inference copy of the full softmax weight matrix (N+1 rows)."""
        with no_grad():
            return self.fa_weight_matrix().data

    # -- teacher-forced sequences --------------------------------------------

    def _target_arrays(self, batch: Sequence[TrainingExample]):
        """Padded decoder inputs (embedding rows), targets (candidate
        indices, END last) and the step mask."""
        vocab = self.vocab
        seqs = []
        for ex in batch:
            rows = [vocab.row(i) for i in ex.target.items]
            seqs.append(rows)
        steps = np.array([len(s) + 1 for s in seqs], dtype=np.intp)  # +1 for END
        S = int(steps.max())
        inputs = np.full((len(batch), S), vocab.pad_row, dtype=np.intp)
        targets = np.zeros((len(batch), S), dtype=np.intp)
        mask = np.zeros((len(batch), S), dtype=np.float64)
        for b, rows in enumerate(seqs):
            inputs[b, 0] = vocab.bos_row
            inputs[b, 1 : len(rows) + 1] = rows
            targets[b, : len(rows)] = rows  # item candidate index == row
            targets[b, len(rows)] = self.end_candidate
            mask[b, : len(rows) + 1] = 1.0
        return inputs, targets, mask, steps

    def _teacher_forced_hiddens(self, batch: Sequence[TrainingExample], inputs):
        enc = self.encode([ex.context for ex in batch])
        state = self.initial_state(enc.h0)
        hs = []
        for t in range(inputs.shape[1]):
            state, h = self.decoder_step(state, inputs[:, t], enc)
            hs.append(nm.reshape(h, (len(batch), 1, self.config.hidden_dim)))
        return nm.concat(hs, axis=1)  # (B, S, H)

    def _l2_term(self) -> Tensor:
        total = None
        for name in sorted(self.params):
            p = self.params[name]
            s = nm.sumt(nm.mul(p, p))
            total = s if total is None else nm.add(total, s)
        return nm.mul(total, self.config.l2_weight)

    def mle_loss(self, batch: Sequence[TrainingExample]) -> Tensor:
        """Mean over examples of the per-step cross entropy under the full
        softmax (END included as final step), plus the l2 penalty."""
        inputs, targets, mask, steps = self._target_arrays(batch)
        hs = self._teacher_forced_hiddens(batch, inputs)
        E = self.fa_weight_matrix()
        logits = nm.einsum2("bsh,nh->bsn", hs, E)
        lp = nm.log_softmax(logits, axis=-1)
        picked = nm.gather_cols(
            nm.reshape(lp, (-1, self.n_candidates)), targets.reshape(-1)
        )
        picked = nm.mul(nm.reshape(picked, mask.shape), mask)
        per_ex = nm.mul(nm.sumt(picked, axis=1), 1.0 / steps)
        nll = nm.mul(nm.sumt(per_ex), -1.0 / len(batch))
        return nm.add(nll, self._l2_term())

    def _draw_negatives(self, targets, n_neg: int, rng) -> np.ndarray:
        """Uniform over the candidate space excluding each step's positive
        (END is an ordinary pool member)."""
        B, S = targets.shape
        r = rng.integers(0, self.n_candidates - 1, size=(B, S, n_neg))
        return r + (r >= targets[:, :, None])

    def sampled_fa_loss(self, batch: Sequence[TrainingExample], n_neg: int | None = None,
                        rng=None, negatives=None) -> Tensor:
        """Per-step cross entropy over {positive} u {n_neg sampled
        negatives}, plus the l2 penalty.

        With one negative this reduces exactly to the pairwise logistic
        ranking loss -log sigmoid(h . (e_pos - e_neg)) per step. When n_neg
        covers the whole pool the full loss is used instead. `negatives`
        fixes the drawn candidate indices (tests use this)."""
        if n_neg is None:
            n_neg = self.config.n_neg_samples
        if n_neg < 1:
            raise ValueError("need at least one negative sample")
        if n_neg >= self.n_candidates - 1:
            return self.mle_loss(batch)
        inputs, targets, mask, steps = self._target_arrays(batch)
        if negatives is None:
            if rng is None:
                rng = np.random.default_rng(self.config.seed)
            negatives = self._draw_negatives(targets, n_neg, rng)
        else:
            negatives = np.asarray(negatives, dtype=np.intp)
        cands = np.concatenate([targets[:, :, None], negatives], axis=2)
        hs = self._teacher_forced_hiddens(batch, inputs)
        E = self.fa_weight_matrix(cands)  # (B, S, C, H)
        logits = nm.einsum2("bsch,bsh->bsc", E, hs)
        lp = nm.log_softmax(logits, axis=-1)
        picked = nm.mul(nm.index_last(lp, 0), mask)
        per_ex = nm.mul(nm.sumt(picked, axis=1), 1.0 / steps)
        nll = nm.mul(nm.sumt(per_ex), -1.0 / len(batch))
        return nm.add(nll, self._l2_term())

    # -- scoring ------------------------------------------------------------

    def bundle_log_prob(self, bundle: Bundle, context: UserContext) -> float:
        """Teacher-forced log probability of the bundle's sequence followed
        by END, under the full softmax."""
        ex = TrainingExample(context, bundle)
        with no_grad():
            inputs, targets, mask, _ = self._target_arrays([ex])
            hs = self._teacher_forced_hiddens([ex], inputs)
            E = self.fa_weight_matrix()
            logits = nm.einsum2("bsh,nh->bsn", hs, E)
            lp = nm.log_softmax(logits, axis=-1)
            vals = lp.data[0, np.arange(targets.shape[1]), targets[0]]
            return float((vals * mask[0]).sum())

    def rank_score(self, bundle: Bundle, context: UserContext) -> float:
        """Negative per-step cross entropy: bundle_log_prob normalized by
        its step count (items plus END)."""
        return self.bundle_log_prob(bundle, context) / (bundle.size + 1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: QualityModel
    epochs: list[dict] = field(default_factory=list)

    def curve(self) -> list[tuple[float, float]]:
        return [(e["train_loss"], e["val_loss"]) for e in self.epochs]


def _eval_full_loss(model: QualityModel, examples, batch_size: int) -> float:
    if not examples:
        return float("nan")
    losses, weights = [], []
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            losses.append(model.mle_loss(chunk).item())
            weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def train(model: QualityModel, split: DatasetSplit, config: ModelConfig | None = None
          ) -> TrainResult:
    """Adam on the sampled loss with seeded shuffling, validated with the
    full loss after each epoch; stops once validation has not improved for
    `patience` epochs and restores the best parameters."""
    cfg = config or model.config
    examples = split.train
    if not examples:
        raise ValueError("empty training split")
    validation = split.validation or examples
    rng = np.random.default_rng(cfg.seed)
    opt = nm.Adam(model.params, lr=cfg.learning_rate)
    result = TrainResult(model)
    best_val = math.inf
    best_params = model.copy_params()
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            loss = model.sampled_fa_loss(batch, cfg.n_neg_samples, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, step {start // cfg.batch_size}"
                )
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
            epoch_losses.append(value)
        val_loss = _eval_full_loss(model, validation, cfg.batch_size)
        result.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
        })
        if val_loss < best_val - 1e-9:
            best_val = val_loss
            best_params = model.copy_params()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_param_data(best_params)
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: QualityModel, path, split_dir: str | None = None) -> None:
    """Single JSON file: config, vocabulary hash, and parameters encoded
    as base64 float64 buffers. Byte-deterministic for fixed inputs."""
    payload = {
        "config": asdict(model.config),
        "vocab_hash": model.vocab.hash(),
        "split_dir": split_dir,
        "params": {
            name: {
                "shape": list(p.data.shape),
                "data": base64.b64encode(np.ascontiguousarray(p.data).tobytes()).decode(),
            }
            for name, p in sorted(model.params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path, vocab: Vocabulary) -> QualityModel:
    """Rebuild the model; raises VocabMismatch if the catalog digest
    differs from the one recorded at save time."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload["vocab_hash"] != vocab.hash():
        raise VocabMismatch("checkpoint was trained on a different catalog")
    cfg_dict = dict(payload["config"])
    cfg_dict["cnn_window_sizes"] = tuple(cfg_dict["cnn_window_sizes"])
    config = ModelConfig(**cfg_dict)
    model = QualityModel(vocab, config)
    data = {}
    for name, entry in payload["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
        data[name] = arr.reshape(entry["shape"])
    model.load_param_data(data)
    return model


def checkpoint_split_dir(path) -> str | None:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh).get("split_dir")
