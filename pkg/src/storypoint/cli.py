"""Command-line pipeline: ingest, prepare, pretrain, train, estimate,
baseline, evaluate, cross-project, cluster-words.

A JSON config file (--config) supplies defaults for any long flag name
(dashes as underscores); explicit flags win. Artifacts are deterministic
given identical inputs, flags, and seed. Exit codes: 0 success, 1 runtime
or transport failure, 2 bad flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation
from .corpus import (
    CorpusError,
    IssueRecord,
    build_vocabulary,
    compose_document,
    dataset_stats,
    filter_issues,
    load_vocabulary,
    read_corpus,
    save_vocabulary,
    split_chronological,
    tokenize,
    write_corpus,
    SplitDataset,
)
from .jira_ingest import IngestConfig, IngestError, fetch_issues
from .model import (
    ModelConfig,
    ModelError,
    document_vectors,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import NumericError, make_rng
from .pretrain import PRETRAIN_TENSORS, PretrainConfig, PretrainError, pretrain
from .trainer import TrainConfig, TrainerError, cross_project_train, encode_issue, estimate, train

BASELINE_MODELS = ("mean", "median", "random", "bow-rf", "lstm-rf", "cbr", "cart", "ols", "lasso")
TOKEN_ENV_VAR = "STORYPOINT_JIRA_TOKEN"


class CliError(RuntimeError):
    pass


def _add_model_flags(parser):
    parser.add_argument("--dim", type=int, default=50, help="embedding size")
    parser.add_argument("--depth", type=int, default=10, help="highway layer count")
    parser.add_argument("--mode", choices=("word", "character"), default="word")


def _model_config(args) -> ModelConfig:
    return ModelConfig(embedding_dim=args.dim, highway_depth=args.depth,
                       tokenizer_mode=args.mode)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storypoint", description="Story-point estimation pipeline"
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with default values for any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="fetch issues from a JIRA server")
    p.add_argument("--base-url", required=True)
    p.add_argument("--jql", required=True)
    p.add_argument("--sp-field", required=True, help="story-point custom field id")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--page-size", type=int, default=50)
    p.add_argument("--max-issues", type=int, default=None)
    p.add_argument("--rate-limit", type=float, default=2.0)

    p = sub.add_parser("prepare", help="filter, split, and summarize a corpus")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--min-project-size", type=int, default=300)
    p.add_argument("--mode", choices=("word", "character"), default="word")
    p.add_argument("--vocab-min-count", type=int, default=1)
    p.add_argument("--vocab-max-size", type=int, default=50000)

    p = sub.add_parser("pretrain", help="language-model pre-training")
    p.add_argument("--corpus", type=Path, required=True, help="issues for unsupervised training")
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--nce-samples", type=int, default=100)
    p.add_argument("--objective", choices=("nce", "softmax"), default="nce")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="supervised training on a prepared split")
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--vocab", type=Path, default=None, help="defaults to split-dir/vocab.txt")
    p.add_argument("--pretrained", type=Path, default=None)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("estimate", help="score issues with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("baseline", help="fit a baseline and score issues")
    p.add_argument("--model", choices=BASELINE_MODELS, required=True)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True,
                   help="issues to score (labels are not read)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--features", type=Path, default=None,
                   help="feature table (required for cbr/cart/ols/lasso)")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="text-feature checkpoint (required for lstm-rf)")
    p.add_argument("--mode", choices=("word", "character"), default="word")
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("evaluate", help="compare estimate files on the test split")
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--estimates", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--pairs", default="", help="comma-separated NAME:NAME pairs")
    p.add_argument("--runs", type=int, default=1000, help="random-guess rounds for SA")
    p.add_argument("--pred-level", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, default=None, help="also write rows as CSV")

    p = sub.add_parser("cross-project", help="train on one project, test on another")
    p.add_argument("--source-dir", type=Path, required=True)
    p.add_argument("--target-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--pretrained", type=Path, default=None)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("cluster-words", help="k-means clusters of learned embeddings")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--top", type=int, default=500)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _load_split(split_dir: Path, with_test: bool = True) -> SplitDataset:
    # only evaluate/cross-project may read the test manifest
    return SplitDataset(
        train=read_corpus(split_dir / "train.jsonl"),
        valid=read_corpus(split_dir / "valid.jsonl"),
        test=read_corpus(split_dir / "test.jsonl") if with_test else [],
    )


def _write_estimates(path: Path, estimates: list[tuple[str, float]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["issue_key", "estimate"])
        for key, value in estimates:
            writer.writerow([key, repr(float(value))])


def _read_estimates(path: Path) -> list[tuple[str, float]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [(row["issue_key"], float(row["estimate"])) for row in reader]


def cmd_ingest(args) -> int:
    cfg = IngestConfig(
        base_url=args.base_url, jql=args.jql, story_point_field=args.sp_field,
        page_size=args.page_size, max_issues=args.max_issues,
        auth_token=os.environ.get(TOKEN_ENV_VAR), rate_limit=args.rate_limit,
    )
    result = fetch_issues(cfg)
    count = write_corpus(result.records, args.out)
    skipped = sum(result.skipped.values())
    print(f"ingest: wrote {count} issues to {args.out} "
          f"({skipped} skipped, {result.requests_made} requests)")
    return 0


def cmd_prepare(args) -> int:
    raw = read_corpus(args.input)
    kept, stats = filter_issues(raw, args.min_project_size)
    labeled = [r for r in kept if r.story_points is not None]
    unlabeled = [r for r in kept if r.story_points is None]
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(kept, out / "filtered.jsonl")
    write_corpus(unlabeled, out / "unlabeled.jsonl")
    split = split_chronological(labeled)
    for name, records in (("train", split.train), ("valid", split.valid), ("test", split.test)):
        write_corpus(records, out / f"{name}.jsonl")
    docs = [tokenize(compose_document(r), args.mode) for r in split.train + split.valid]
    vocab = build_vocabulary(docs, args.vocab_min_count, args.vocab_max_size, mode=args.mode)
    save_vocabulary(vocab, out / "vocab.txt")
    report = {
        "input": stats.input_count,
        "removed": stats.removed,
        "removed_fraction": round(stats.removed_fraction, 6),
        "removed_bad_points": stats.removed_bad_points,
        "removed_small_project": stats.removed_small_project,
        "labeled": len(labeled),
        "unlabeled": len(unlabeled),
        "split": {"train": len(split.train), "valid": len(split.valid), "test": len(split.test)},
        "vocabulary": len(vocab),
        "story_points": dataset_stats(labeled),
    }
    (out / "stats.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    vocab = load_vocabulary(args.vocab, mode=args.mode)
    records = read_corpus(args.corpus)
    sequences = [vocab.encode(tokenize(compose_document(r), vocab.mode)) for r in records]
    config = PretrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        nce_samples=min(args.nce_samples, len(vocab)),
        patience=args.patience, objective=args.objective,
    )
    result = pretrain(sequences, len(vocab), _model_config(args), config, seed=args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.out_dir / "pretrain.ckpt"
    tensors = {name: getattr(result.params, name) for name in PRETRAIN_TENSORS}
    save_checkpoint(ckpt_path, "pretrain", _model_config(args), vocab.content_hash(), tensors)
    with (args.out_dir / "pretrain_log.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_perplexity", "best_perplexity"])
        for row in result.curve:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["valid_perplexity"]), repr(row["best_perplexity"])])
    print(f"pretrain: best perplexity {result.best_perplexity:.4f} at epoch "
          f"{result.best_epoch}; checkpoint {ckpt_path}")
    return 0


def cmd_train(args) -> int:
    split = _load_split(args.split_dir, with_test=False)
    vocab_path = args.vocab or (args.split_dir / "vocab.txt")
    vocab = load_vocabulary(vocab_path, mode=args.mode) if vocab_path.exists() else None
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
        learning_rate=args.learning_rate, seed=args.seed,
    )
    result = train(split, _model_config(args), config, vocab=vocab, pretrained=pretrained)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.out_dir / "model.ckpt"
    save_checkpoint(ckpt_path, "model", result.checkpoint.config,
                    result.checkpoint.vocab_hash, result.checkpoint.tensors)
    save_vocabulary(result.vocab, args.out_dir / "vocab.txt")
    with (args.out_dir / "train_log.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_mae", "best_so_far"])
        for row in result.curve:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["valid_mae"]), repr(row["best_valid_mae"])])
    note = f" (aborted: {result.aborted})" if result.aborted else ""
    print(f"train: best validation MAE {result.best_valid_mae:.4f} at epoch "
          f"{result.best_epoch}; checkpoint {ckpt_path}{note}")
    return 0


def cmd_estimate(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    vocab = load_vocabulary(args.vocab, mode=checkpoint.config.tokenizer_mode)
    issues = read_corpus(args.input)
    pairs = estimate(checkpoint, vocab, issues)
    _write_estimates(args.out, pairs)
    print(f"estimate: wrote {len(pairs)} estimates to {args.out}")
    return 0


def _read_feature_table(path: Path) -> dict[str, baselines.IssueFeatureInput]:
    """Feature CSV: issue_key column plus IssueFeatureInput fields; empty
    assignee cells mean missing."""
    table = {}
    int_fields = {f for f in baselines.IssueFeatureInput.__dataclass_fields__
                  if f not in ("issue_type", "priority")}
    with path.open("r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            kwargs = {}
            for field, value in row.items():
                if field == "issue_key" or field is None:
                    continue
                if field not in baselines.IssueFeatureInput.__dataclass_fields__:
                    raise CliError(f"unknown feature column {field!r}")
                if field in int_fields:
                    kwargs[field] = int(value) if value.strip() else (
                        None if field.startswith("assignee_") else 0
                    )
                else:
                    kwargs[field] = value
            table[row["issue_key"]] = baselines.IssueFeatureInput(**kwargs)
    return table


def _feature_rows(issues: list[IssueRecord], table: dict) -> list[baselines.FeatureVector]:
    missing = [r.issue_key for r in issues if r.issue_key not in table]
    if missing:
        raise CliError(f"feature table lacks rows for: {', '.join(missing[:5])}")
    return [baselines.assemble_features(table[r.issue_key]) for r in issues]


def cmd_baseline(args) -> int:
    split = _load_split(args.split_dir, with_test=False)
    past = split.train  # the valid partition is reserved for model selection
    past_points = np.array([r.story_points for r in past])
    targets = read_corpus(args.input)
    rng = make_rng(args.seed)
    name = args.model

    if name in ("mean", "median", "random"):
        if name == "mean":
            value = baselines.mean_effort(past_points)
            estimates = [(r.issue_key, value) for r in targets]
        elif name == "median":
            value = baselines.median_effort(past_points)
            estimates = [(r.issue_key, value) for r in targets]
        else:
            estimates = [(r.issue_key, baselines.random_guess(past_points, rng))
                         for r in targets]
    elif name in ("bow-rf", "lstm-rf"):
        if name == "bow-rf":
            vocab = load_vocabulary(args.split_dir / "vocab.txt", mode=args.mode)
            def featurize(records):
                return np.stack([
                    baselines.bow_vectorize(tokenize(compose_document(r), vocab.mode), vocab)
                    for r in records
                ])
        else:
            if args.checkpoint is None:
                raise CliError("lstm-rf needs --checkpoint (text-feature weights)")
            checkpoint = load_checkpoint(args.checkpoint)
            vocab = load_vocabulary(args.split_dir / "vocab.txt",
                                    mode=checkpoint.config.tokenizer_mode)
            if vocab.content_hash() != checkpoint.vocab_hash:
                raise CliError("checkpoint vocabulary does not match the split vocabulary")
            params = checkpoint.to_params()
            def featurize(records):
                seqs = [encode_issue(r, vocab) for r in records]
                return document_vectors(seqs, params)
        forest = baselines.rf_fit(featurize(past), past_points, n_trees=100, rng=rng)
        estimates = [
            (r.issue_key, max(0.0, baselines.rf_predict(forest, x)))
            for r, x in zip(targets, featurize(targets))
        ]
    else:
        if args.features is None:
            raise CliError(f"{name} needs --features (issue feature table)")
        table = _read_feature_table(args.features)
        past_vecs = _feature_rows(past, table)
        target_vecs = _feature_rows(targets, table)
        if name == "cart":
            past_x = baselines.feature_matrix(past_vecs, impute="zero", append_mask=True)
            target_x = baselines.feature_matrix(target_vecs, impute="zero", append_mask=True)
            tree = baselines.cart_fit(past_x, past_points, min_leaf_size=5, prune_level=5)
            values = [baselines.cart_predict(tree, x) for x in target_x]
        else:
            past_x = baselines.feature_matrix(past_vecs, impute="mean")
            target_x = baselines.feature_matrix(target_vecs, impute="mean",
                                                train_vectors=past_vecs)
            if name == "cbr":
                k = min(3, len(past_x))
                values = [baselines.cbr_estimate(past_x, past_points, x, k=k)
                          for x in target_x]
            elif name == "ols":
                model = baselines.ols_fit(past_x, past_points)
                values = list(model.predict(target_x))
            else:  # lasso: penalty picked on the validation partition
                valid_vecs = _feature_rows(split.valid, table)
                valid_x = baselines.feature_matrix(valid_vecs, impute="mean",
                                                   train_vectors=past_vecs)
                model = baselines.lasso_fit(
                    past_x, past_points, valid_features=valid_x,
                    valid_targets=np.array([r.story_points for r in split.valid]),
                )
                values = list(model.predict(target_x))
        estimates = [(r.issue_key, max(0.0, float(v))) for r, v in zip(targets, values)]

    _write_estimates(args.out, estimates)
    print(f"baseline {name}: wrote {len(estimates)} estimates to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    split = _load_split(args.split_dir)
    past_points = [r.story_points for r in split.train]
    actual_by_key = {r.issue_key: r.story_points for r in split.test}
    actuals = np.array([r.story_points for r in split.test])
    fingerprint = evaluation.dataset_fingerprint(
        [r.issue_key for r in split.test], actuals
    )
    mae_rguess = evaluation.random_guess_mae(
        past_points, actuals, runs=args.runs, rng=make_rng(args.seed)
    )
    reports = []
    for spec_item in args.estimates:
        if "=" not in spec_item:
            raise CliError(f"--estimates entries look like NAME=PATH, got {spec_item!r}")
        name, _, path = spec_item.partition("=")
        pairs = _read_estimates(Path(path))
        by_key = dict(pairs)
        missing = [k for k in actual_by_key if k not in by_key]
        if missing:
            raise CliError(f"{name} lacks estimates for: {', '.join(missing[:5])}")
        ordered = [by_key[r.issue_key] for r in split.test]
        reports.append(
            evaluation.make_report(name, actuals, ordered, mae_rguess,
                                   pred_level=args.pred_level, fingerprint=fingerprint)
        )
    pair_list = []
    if args.pairs:
        for chunk in args.pairs.split(","):
            a, _, b = chunk.partition(":")
            if not a or not b:
                raise CliError(f"--pairs entries look like NAME:NAME, got {chunk!r}")
            pair_list.append((a, b))
    table = evaluation.compare_report(reports, pair_list)
    print(f"evaluate: {len(reports)} models on {len(actuals)} test issues "
          f"(random-guess MAE {mae_rguess:.4f})")
    print(table)
    if args.out:
        with args.out.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model", "mae", "sa", "mre", "pred", "n"])
            for r in reports:
                writer.writerow([r.model_name, repr(r.mae), repr(r.sa),
                                 repr(r.mre) if r.mre is not None else "",
                                 repr(r.pred) if r.pred is not None else "", r.n])
            for a, b in pair_list:
                cmp = evaluation.compare_pair(
                    next(r for r in reports if r.model_name == a),
                    next(r for r in reports if r.model_name == b),
                )
                writer.writerow([f"{a} vs {b}", repr(cmp.p_value), repr(cmp.a12), "", "", cmp.m])
    return 0


def cmd_cross_project(args) -> int:
    source = _load_split(args.source_dir, with_test=False)
    target_test = read_corpus(args.target_dir / "test.jsonl")
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         patience=args.patience, seed=args.seed)
    result = cross_project_train(source, target_test, _model_config(args), config,
                                 pretrained=pretrained)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_estimates(args.out_dir / "estimates.csv", result.estimates)
    with (args.out_dir / "abs_errors.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["issue_key", "abs_error"])
        for (key, _), err in zip(result.estimates, result.abs_errors):
            writer.writerow([key, repr(float(err))])
    cross_mae = float(result.abs_errors.mean())
    print(f"cross-project: MAE {cross_mae:.4f} over {len(result.abs_errors)} target issues")
    return 0


def cmd_cluster_words(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    vocab = load_vocabulary(args.vocab, mode=checkpoint.config.tokenizer_mode)
    if vocab.content_hash() != checkpoint.vocab_hash:
        raise CliError("checkpoint vocabulary does not match --vocab")
    pairs = evaluation.cluster_word_embeddings(
        checkpoint.tensors["emb"], vocab, top=args.top, k=args.k, rng=make_rng(args.seed)
    )
    with args.out.open("w", encoding="utf-8") as fh:
        for token, cluster in pairs:
            fh.write(f"{token}\t{cluster}\n")
    print(f"cluster-words: wrote {len(pairs)} tokens in {args.k} clusters to {args.out}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "cross-project": cmd_cross_project,
    "cluster-words": cmd_cluster_words,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # apply config-file values as defaults before the real parse
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=Path, default=None)
    pre, _ = probe.parse_known_args(argv)
    if pre.config is not None:
        try:
            overrides = json.loads(Path(pre.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file: {exc}")
        renamed = {key.replace("-", "_"): value for key, value in overrides.items()}
        for action in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in renamed.items() if k in known})
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CliError, CorpusError, ModelError, TrainerError, PretrainError,
            NumericError, evaluation.EvaluationError, baselines.BaselineError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
