"""Command-line surface: synth, ingest, stats, train, generate, evaluate,
sweep. Commands compose through files only; every output directory gets a
manifest recording the effective config hash and seed.

Exit codes: 0 ok, 1 internal error, 2 bad input, 3 incompatible artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from .core import UserContext
from .data import ParseError
from .generate import (
    GenerationConfig,
    Generator,
    read_recommendations,
    write_recommendations,
)
from .model import (
    ModelConfig,
    QualityModel,
    VocabMismatch,
    checkpoint_split_dir,
    desk_config,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_BAD_INPUT = 2
EXIT_INCOMPATIBLE = 3


class BadInput(ValueError):
    pass


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _write_manifest(path: Path, config: dict, seed: int, **extra):
    payload = {"config_hash": _config_hash(config), "seed": seed, "config": config}
    payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _n_workers() -> int:
    env = os.environ.get("BUNDLEGEN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _load_json_config(path) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise BadInput(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.make_synthetic_corpus(
        out, seed=args.seed, n_users=args.users, n_items=args.items,
        n_patterns=args.patterns, noise=args.noise,
    )
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    if bool(args.events) == bool(args.bundles):
        raise BadInput("provide exactly one of --events or --bundles")
    if args.events:
        events = data_mod.load_events(_require_file(args.events, "events file"))
        split = data_mod.ingest_events(events, seed=args.seed)
    else:
        if not args.catalog:
            raise BadInput("--bundles requires --catalog")
        split = data_mod.ingest_bundle_corpus(
            _require_file(args.bundles, "bundle file"),
            _require_file(args.catalog, "catalog file"),
            seed=args.seed,
        )
    data_mod.save_split(split, args.out)
    stats = data_mod.compute_stats(split)
    print(stats.as_block())
    print(f"split written to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    split = data_mod.load_split(_require_file(args.split, "split directory"))
    print(data_mod.compute_stats(split).as_block())
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    base = _load_json_config(args.config)
    if args.preset == "desk":
        cfg = desk_config(**base)
    else:
        cfg = ModelConfig(**base) if base else ModelConfig()
    overrides = {
        "seed": args.seed,
        "learning_rate": args.lr,
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "n_neg_samples": args.n_neg,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.id_only:
        cfg.feature_aware = False
    return cfg


def cmd_train(args) -> int:
    split_dir = _require_file(args.split, "split directory")
    split = data_mod.load_split(split_dir)
    cfg = _model_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model = load_checkpoint(_require_file(args.resume, "checkpoint"), split.vocab)
        cfg = model.config
    else:
        model = QualityModel(split.vocab, cfg)
    result = train(model, split, cfg)

    ckpt = out / "checkpoint.json"
    save_checkpoint(model, ckpt, split_dir=str(split_dir))
    with open(out / "loss_curve.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in result.epochs:
            writer.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_loss']:.6f}"])
    _write_manifest(out / "manifest.json", asdict(cfg), cfg.seed,
                    vocab_hash=split.vocab.hash(), epochs_run=len(result.epochs))
    last = result.epochs[-1]
    print(f"trained {len(result.epochs)} epochs; "
          f"final train={last['train_loss']:.4f} val={last['val_loss']:.4f}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _generation_config(args) -> GenerationConfig:
    try:
        return GenerationConfig(
            beam_width=args.M, list_size=args.K, max_bundle_size=args.T,
            lambda_=getattr(args, "lam", 0.0) or 0.0, shift=getattr(args, "C", 0.0) or 0.0,
        )
    except ValueError as exc:
        raise BadInput(str(exc)) from None


def _load_users(path, limit=None) -> list[UserContext]:
    users = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            users.append(UserContext(int(obj["user"]), tuple(obj["context"])))
    users.sort(key=lambda u: u.user_id)
    if limit:
        users = users[:limit]
    return users


def _open_model(args) -> tuple[QualityModel, data_mod.DatasetSplit]:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    split_dir = args.split or checkpoint_split_dir(ckpt)
    if not split_dir:
        raise BadInput("no --split given and checkpoint records none")
    split = data_mod.load_split(_require_file(split_dir, "split directory"))
    model = load_checkpoint(ckpt, split.vocab)
    return model, split


def _generate_lists(model, users, gen_cfg):
    generator = Generator(model, gen_cfg)
    workers = _n_workers()
    if workers > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lists = list(pool.map(generator, users))
    else:
        lists = [generator(u) for u in users]
    return list(zip((u.user_id for u in users), lists))


def cmd_generate(args) -> int:
    model, _ = _open_model(args)
    gen_cfg = _generation_config(args)
    users = _load_users(_require_file(args.users, "users file"), args.limit)
    results = _generate_lists(model, users, gen_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_recommendations(out, results, gen_cfg)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                    {"generation": asdict(gen_cfg)}, model.config.seed,
                    n_users=len(users))
    print(f"wrote {len(results)} recommendation lines to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    recs = read_recommendations(_require_file(args.recommendations, "recommendations"))
    test_path = _require_file(args.test, "test file")
    examples = []
    with open(test_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                examples.append(data_mod.TrainingExample(
                    UserContext(int(obj["user"]), tuple(obj["context"])),
                    data_mod.Bundle(tuple(obj["target"]), canonical_order=True),
                ))
    gt = eval_mod.GroundTruth.from_examples(examples)
    missing = [u for u in recs if u not in gt.targets]
    if missing:
        print(f"warning: {len(missing)} users missing from ground truth", file=sys.stderr)

    min_len = min(len(v) for v in recs.values())
    ks = sorted({k for k in (5, 10, args.k) if 1 <= k <= min_len})
    if not ks:
        raise BadInput(f"lists too short for any requested k (length {min_len})")
    precision = {k: eval_mod.precision_at_k(recs, gt, k) for k in ks}
    div = eval_mod.diversity(recs)
    auc_value = None
    if args.checkpoint:
        model, split = _open_model(args)
        pool = eval_mod.build_negative_pool(
            [ex.target for ex in split.train + split.validation + split.test],
            min_size=2 if split.style == "co-purchase" else 1,
        )
        auc_value = eval_mod.auc(model, examples, pool, seed=args.seed)
    report = eval_mod.EvalReport(
        precision=precision, diversity=div, auc=auc_value,
        n_users=len(recs) - len(missing), skipped_users=len(missing),
    )
    payload = report.to_json_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise BadInput(f"bad grid: {text!r}") from None
    if not values:
        raise BadInput("empty grid")
    return values


def cmd_sweep(args) -> int:
    model, split = _open_model(args)
    lambdas = _parse_grid(args.lambda_grid)
    shifts = _parse_grid(args.c_grid)
    examples = split.test
    if args.limit:
        examples = examples[: args.limit]
    if not examples:
        raise BadInput("split has no test examples")
    users = [ex.context for ex in examples]
    gt = eval_mod.GroundTruth.from_examples(examples)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [eval_mod.CSV_HEADER]
    for lam in lambdas:
        for shift in shifts:
            gen_cfg = GenerationConfig(
                beam_width=args.M, list_size=args.K, max_bundle_size=args.T,
                lambda_=lam, shift=shift,
            )
            generator = Generator(model, gen_cfg)
            lists = {}
            times = []
            for u in users:
                t0 = time.perf_counter()
                lists[u.user_id] = generator(u)
                times.append((time.perf_counter() - t0) * 1000)
            report = eval_mod.EvalReport(
                precision={k: eval_mod.precision_at_k(lists, gt, k) for k in (5, 10)
                           if k <= args.K},
                diversity=eval_mod.diversity(lists),
                latency=eval_mod.LatencyStats(
                    float(np.mean(times)), float(np.percentile(times, 95)), len(times)
                ),
                n_users=len(users),
                extra={"mean_bundle_size": float(np.mean(
                    [b.size for bl in lists.values() for b in bl.bundles]
                ))},
            )
            run_id = f"lam{lam:g}_C{shift:g}"
            rows.append(eval_mod.csv_row(run_id, gen_cfg, report)
                        + f",{report.extra['mean_bundle_size']:.4f}")
            print(rows[-1])
    rows[0] = eval_mod.CSV_HEADER + ",mean_bundle_size"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"sweep written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bundlegen",
                                description="bundle list generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic event corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--items", type=int, default=500)
    s.add_argument("--patterns", type=int, default=40)
    s.add_argument("--noise", type=float, default=0.1)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="build train/validation/test splits")
    s.add_argument("--events")
    s.add_argument("--bundles")
    s.add_argument("--catalog")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("stats", help="print corpus statistics")
    s.add_argument("--split", required=True)
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("train", help="train the quality model")
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file of model config fields")
    s.add_argument("--preset", choices=["desk", "paper"], default="desk")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--n-neg", type=int, default=None)
    s.add_argument("--id-only", action="store_true",
                   help="static per-id softmax weights instead of feature-aware")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    def add_gen_args(s, with_lambda=True):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", help="split directory (defaults to the one recorded)")
        s.add_argument("-M", type=int, default=50, help="beam width")
        s.add_argument("-K", type=int, default=10, help="list size")
        s.add_argument("-T", type=int, default=8, help="max bundle size")
        if with_lambda:
            s.add_argument("--lambda", dest="lam", type=float, default=0.0)
            s.add_argument("-C", type=float, default=0.0, help="size shift")

    s = sub.add_parser("generate", help="produce bundle lists for users")
    add_gen_args(s)
    s.add_argument("--users", required=True, help="JSONL with user/context lines")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", help="score recommendations against ground truth")
    s.add_argument("--recommendations", required=True)
    s.add_argument("--test", required=True, help="JSONL with user/context/target lines")
    s.add_argument("--checkpoint", help="enables AUC")
    s.add_argument("--split")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-json")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("sweep", help="grid over lambda and the size shift")
    add_gen_args(s, with_lambda=False)
    s.add_argument("--lambda-grid", required=True, help="comma-separated values")
    s.add_argument("--c-grid", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(fn=cmd_sweep)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (BadInput, ParseError, data_mod.EmptyCorpus, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except VocabMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
