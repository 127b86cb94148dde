"""Supervised training loop: batching, RMSprop, early stopping, estimation.

The loop only ever reads the train and validation partitions; scoring a
test set happens through `estimate` after training is done.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import IssueRecord, SplitDataset, Vocabulary, build_vocabulary, compose_document, tokenize
from .model import (
    Checkpoint,
    ModelConfig,
    ModelParams,
    batch_forward,
    batch_loss_and_grads,
    init_params,
    pad_batch,
)
from .numerics import NumericError, RmsPropState, clip_by_global_norm, make_rng


class TrainerError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 100
    learning_rate: float = 0.01
    decay: float = 0.9
    smoothing: float = 1e-6
    patience: int = 50
    seed: int = 42
    clip_norm: float | None = None  # global-norm gradient clip, off by default
    vocab_min_count: int = 1
    vocab_max_size: int = 50000

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def encode_issue(issue: IssueRecord, vocab: Vocabulary) -> list[int]:
    return vocab.encode(tokenize(compose_document(issue), vocab.mode))


def predict_points(params: ModelParams, config: ModelConfig,
                   sequences: list[list[int]], batch_size: int = 256) -> np.ndarray:
    """Deterministic inference over token-id sequences, clamped at zero."""
    out = np.empty(len(sequences))
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        ids, mask = pad_batch(chunk)
        yhat, _ = batch_forward(ids, mask, params, config, masks=None)
        out[start : start + len(chunk)] = yhat
    return np.maximum(out, 0.0)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    vocab: Vocabulary
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_mae: float = float("inf")
    aborted: str | None = None


def _length_bucketed_batches(lengths: np.ndarray, batch_size: int,
                             rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then group indices of similar length into batches.

    The stable sort keeps the shuffled order within equal lengths, and the
    batch order itself is reshuffled, so epochs differ while padding waste
    stays low.
    """
    perm = rng.permutation(len(lengths))
    perm = perm[np.argsort(lengths[perm], kind="stable")]
    batches = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(split: SplitDataset, model_config: ModelConfig, config: TrainConfig,
          vocab: Vocabulary | None = None,
          pretrained: Checkpoint | None = None) -> TrainResult:
    """Fit the regressor on split.train, selecting the epoch with the best
    validation MAE and stopping after `patience` epochs without improvement.

    The vocabulary comes from train+valid text only; pass one explicitly to
    reuse the vocabulary a pre-training run was built on (the hashes must
    match the pretrained checkpoint).
    """
    if not split.train or not split.valid:
        raise TrainerError("split must have non-empty train and valid partitions")
    if any(r.story_points is None for r in split.train + split.valid):
        raise TrainerError("training requires labeled issues")
    if vocab is None:
        docs = [
            tokenize(compose_document(r), model_config.tokenizer_mode)
            for r in split.train + split.valid
        ]
        vocab = build_vocabulary(
            docs, config.vocab_min_count, config.vocab_max_size,
            mode=model_config.tokenizer_mode,
        )
    if vocab.mode != model_config.tokenizer_mode:
        raise TrainerError("vocabulary mode does not match the model tokenizer mode")
    vocab_hash = vocab.content_hash()

    rng = make_rng(config.seed)
    params = init_params(len(vocab), model_config, rng)
    if pretrained is not None:
        if pretrained.vocab_hash != vocab_hash:
            raise TrainerError("pretrained checkpoint was built on a different vocabulary")
        if pretrained.config.embedding_dim != model_config.embedding_dim:
            raise TrainerError("pretrained checkpoint has a different embedding size")
        for name, tensor in pretrained.tensors.items():
            getattr(params, name)[...] = tensor

    train_seqs = [encode_issue(r, vocab) for r in split.train]
    train_y = np.array([r.story_points for r in split.train])
    valid_seqs = [encode_issue(r, vocab) for r in split.valid]
    valid_y = np.array([r.story_points for r in split.valid])
    lengths = np.array([len(s) for s in train_seqs])

    opt = RmsPropState(config.learning_rate, config.decay, config.smoothing)
    result = TrainResult(checkpoint=None, vocab=vocab)  # checkpoint filled below
    best_params = params.copy()
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        n_batches = 0
        try:
            for batch_idx in _length_bucketed_batches(lengths, config.batch_size, rng):
                loss, _, grads = batch_loss_and_grads(
                    [train_seqs[i] for i in batch_idx], train_y[batch_idx],
                    params, model_config, rng=rng,
                )
                grads.pop("lm_u", None)  # no gradient path in supervised training
                if config.clip_norm is not None:
                    clip_by_global_norm(grads, config.clip_norm)
                for name, grad in grads.items():
                    opt.step(name, getattr(params, name), grad)
                epoch_loss += loss
                n_batches += 1
        except NumericError as exc:
            result.aborted = f"epoch {epoch}: {exc}"
            break
        valid_mae = float(np.mean(np.abs(
            predict_points(params, model_config, valid_seqs) - valid_y
        )))
        if valid_mae < result.best_valid_mae:
            result.best_valid_mae = valid_mae
            result.best_epoch = epoch
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
        result.curve.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "valid_mae": valid_mae,
                "best_valid_mae": result.best_valid_mae,
            }
        )
        if bad_epochs > config.patience:
            break
    result.checkpoint = Checkpoint(
        kind="model", config=model_config, vocab_hash=vocab_hash,
        tensors=best_params.tensors(),
    )
    return result


def estimate(checkpoint: Checkpoint, vocab: Vocabulary,
             issues: list[IssueRecord]) -> list[tuple[str, float]]:
    """Score issues with a trained checkpoint; order is preserved.

    The vocabulary must be the one the checkpoint was trained against.
    """
    if vocab.content_hash() != checkpoint.vocab_hash:
        raise TrainerError("vocabulary does not match the checkpoint")
    if vocab.mode != checkpoint.config.tokenizer_mode:
        raise TrainerError("vocabulary mode does not match the checkpoint")
    if not issues:
        return []
    params = checkpoint.to_params()
    sequences = [encode_issue(r, vocab) for r in issues]
    points = predict_points(params, checkpoint.config, sequences)
    return [(r.issue_key, float(p)) for r, p in zip(issues, points)]


@dataclass
class CrossProjectResult:
    train_result: TrainResult
    estimates: list[tuple[str, float]]
    actuals: np.ndarray
    abs_errors: np.ndarray


def cross_project_train(source: SplitDataset, target_test: list[IssueRecord],
                        model_config: ModelConfig, config: TrainConfig,
                        pretrained: Checkpoint | None = None) -> CrossProjectResult:
    """Train on a source project's train+valid data and score another
    project's test issues, returning per-issue absolute errors."""
    if any(r.story_points is None for r in target_test):
        raise TrainerError("target test issues must be labeled")
    result = train(source, model_config, config, pretrained=pretrained)
    estimates = estimate(result.checkpoint, result.vocab, target_test)
    actuals = np.array([r.story_points for r in target_test])
    predicted = np.array([p for _, p in estimates])
    return CrossProjectResult(
        train_result=result,
        estimates=estimates,
        actuals=actuals,
        abs_errors=np.abs(actuals - predicted),
    )
