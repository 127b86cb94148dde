"""Unsupervised pre-training of the embedding and LSTM layers.

Trains a next-token language model over unlabeled issue text, either with
the exact softmax objective or with noise-contrastive estimation, which
scores the true next token against a handful of sampled noise tokens and
so costs M instead of |V| per position. Model selection uses validation
perplexity computed with the full softmax regardless of the training
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, _lstm_backward, _lstm_forward, embed, init_params
from .numerics import NumericError, RmsPropState, log_sigmoid, log_softmax_rows, make_rng, sigmoid


class PretrainError(ValueError):
    pass


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 50
    learning_rate: float = 0.02
    decay: float = 0.99
    smoothing: float = 1e-7
    nce_samples: int = 100
    noise_power: float = 0.75
    patience: int = 10
    validation_fraction: float = 0.1
    objective: str = "nce"  # "nce" or "softmax" (exact, slow; used as the reference route)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.nce_samples < 1:
            raise ValueError("nce_samples must be >= 1")
        if self.objective not in ("nce", "softmax"):
            raise ValueError(f"unknown pre-training objective {self.objective!r}")


# Only these tensors learn during pre-training.
PRETRAIN_TENSORS = ("emb", "lstm_wx", "lstm_wh", "lstm_b", "lm_u")


def unigram_noise_distribution(sequences: list[list[int]], vocab_size: int,
                               power: float = 0.75) -> np.ndarray:
    """Smoothed, power-flattened unigram distribution for noise sampling.

    Add-one smoothing keeps every vocabulary entry sampleable so targets
    absent from the noise-fitting corpus still get a finite noise odds term.
    """
    counts = np.ones(vocab_size, dtype=np.float64)
    for seq in sequences:
        np.add.at(counts, np.asarray(seq, dtype=np.int64), 1.0)
    weights = counts**power
    return weights / weights.sum()


def next_token_logprob(h: np.ndarray, u: np.ndarray, k: int) -> float:
    """Exact log P(next token = k | state h) under the softmax output layer."""
    if not 0 <= k < u.shape[0]:
        raise PretrainError("token id out of range")
    logits = u @ np.asarray(h, dtype=np.float64)
    return float(log_softmax_rows(logits[None])[0, k])


def nce_loss(h: np.ndarray, u: np.ndarray, target: int, noise_ids,
             noise_dist: np.ndarray):
    """Noise-contrastive loss for one prediction and its sparse gradients.

    Classifies the target against len(noise_ids) sampled noise tokens.
    Returns (loss, d_loss/d_h, {row_id: d_loss/d_u_row}); rows of u outside
    the target and noise sample get no gradient at all.
    """
    h = np.asarray(h, dtype=np.float64)
    noise_ids = np.asarray(noise_ids, dtype=np.int64)
    m = len(noise_ids)
    delta_t = float(u[target] @ h) - float(np.log(m * noise_dist[target]))
    delta_n = u[noise_ids] @ h - np.log(m * noise_dist[noise_ids])
    loss = -float(log_sigmoid(delta_t)) - float(np.sum(log_sigmoid(-delta_n)))
    dd_t = float(sigmoid(delta_t)) - 1.0
    dd_n = sigmoid(delta_n)
    dh = dd_t * u[target] + dd_n @ u[noise_ids]
    du_rows: dict[int, np.ndarray] = {int(target): dd_t * h}
    for j, row in enumerate(noise_ids):
        row = int(row)
        contrib = dd_n[j] * h
        if row in du_rows:
            du_rows[row] = du_rows[row] + contrib
        else:
            du_rows[row] = contrib
    return loss, dh, du_rows


def _prediction_batches(sequences: list[list[int]], batch_size: int):
    """Yield (inputs, targets, mask) arrays; position t predicts token t+1."""
    usable = [s for s in sequences if len(s) >= 2]
    for start in range(0, len(usable), batch_size):
        chunk = usable[start : start + batch_size]
        if not chunk:
            continue
        steps = max(len(s) - 1 for s in chunk)
        ids = np.zeros((len(chunk), steps), dtype=np.int64)
        targets = np.zeros((len(chunk), steps), dtype=np.int64)
        mask = np.zeros((len(chunk), steps), dtype=np.float64)
        for i, seq in enumerate(chunk):
            n = len(seq) - 1
            ids[i, :n] = seq[:-1]
            targets[i, :n] = seq[1:]
            mask[i, :n] = 1.0
        yield ids, targets, mask


def perplexity(params: ModelParams, sequences: list[list[int]],
               batch_size: int = 64) -> float:
    """exp(mean negative log-likelihood per predicted token), full softmax."""
    total_nll = 0.0
    total_count = 0
    for ids, targets, mask in _prediction_batches(sequences, batch_size):
        x = embed(ids, params.emb) * mask[:, :, None]
        states, _ = _lstm_forward(x, params)
        logp = log_softmax_rows(states @ params.lm_u.T)
        picked = np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
        total_nll -= float((picked * mask).sum())
        total_count += int(mask.sum())
    if total_count == 0:
        raise PretrainError("empty corpus")
    return float(np.exp(total_nll / total_count))


def _nce_batch_step(ids, targets, mask, params, noise_dist, n_samples, rng):
    positions = mask.sum()
    noise = rng.choice(len(noise_dist), size=n_samples, p=noise_dist)
    x = embed(ids, params.emb) * mask[:, :, None]
    states, cache = _lstm_forward(x, params)
    u_tgt = params.lm_u[targets]                      # (B, T, d)
    u_noise = params.lm_u[noise]                      # (M, d)
    delta_t = np.einsum("btd,btd->bt", states, u_tgt) - np.log(
        n_samples * noise_dist[targets]
    )
    delta_n = states @ u_noise.T - np.log(n_samples * noise_dist[noise])
    loss = -(log_sigmoid(delta_t) * mask).sum()
    loss -= (log_sigmoid(-delta_n) * mask[:, :, None]).sum()
    dd_t = (sigmoid(delta_t) - 1.0) * mask / positions
    dd_n = sigmoid(delta_n) * mask[:, :, None] / positions
    grads = {name: np.zeros_like(getattr(params, name)) for name in PRETRAIN_TENSORS}
    np.add.at(grads["lm_u"], targets, dd_t[:, :, None] * states)
    np.add.at(grads["lm_u"], noise, np.einsum("btm,btd->md", dd_n, states))
    d_states = dd_t[:, :, None] * u_tgt + np.einsum("btm,md->btd", dd_n, u_noise)
    dx = _lstm_backward(d_states, mask, cache, params, grads)
    np.add.at(grads["emb"], ids, dx * mask[:, :, None])
    return float(loss / positions), grads


def _softmax_batch_step(ids, targets, mask, params):
    positions = mask.sum()
    x = embed(ids, params.emb) * mask[:, :, None]
    states, cache = _lstm_forward(x, params)
    logits = states @ params.lm_u.T
    logp = log_softmax_rows(logits)
    picked = np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
    loss = -float((picked * mask).sum())
    dlogits = np.exp(logp)
    np.add.at(dlogits, (*np.indices(targets.shape), targets), -1.0)
    dlogits *= (mask / positions)[:, :, None]
    grads = {name: np.zeros_like(getattr(params, name)) for name in PRETRAIN_TENSORS}
    grads["lm_u"] += np.einsum("btv,btd->vd", dlogits, states)
    d_states = dlogits @ params.lm_u
    dx = _lstm_backward(d_states, mask, cache, params, grads)
    np.add.at(grads["emb"], ids, dx * mask[:, :, None])
    return loss / positions, grads


@dataclass
class PretrainResult:
    params: ModelParams
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_perplexity: float = float("inf")


def pretrain(sequences: list[list[int]], vocab_size: int, model_config: ModelConfig,
             config: PretrainConfig, seed: int = 42,
             initial: ModelParams | None = None) -> PretrainResult:
    """Train the language model and return the best weights by validation
    perplexity, stopping early after `patience` epochs without improvement.

    Story-point labels never enter here: the input is token-id sequences
    only. The last validation_fraction of the sequences (file order) are
    held out for model selection.
    """
    usable = [list(s) for s in sequences if len(s) >= 2]
    if len(usable) < 2:
        raise PretrainError("need at least two sequences of length >= 2")
    if config.nce_samples > vocab_size:
        raise PretrainError("nce_samples may not exceed the vocabulary size")
    n_valid = max(1, int(round(config.validation_fraction * len(usable))))
    n_valid = min(n_valid, len(usable) - 1)
    train_seqs = usable[: len(usable) - n_valid]
    valid_seqs = usable[len(usable) - n_valid :]

    rng = make_rng(seed)
    params = initial.copy() if initial is not None else init_params(vocab_size, model_config, rng)
    noise_dist = unigram_noise_distribution(train_seqs, vocab_size, config.noise_power)
    opt = RmsPropState(config.learning_rate, config.decay, config.smoothing)

    best = PretrainResult(
        params=params.copy(),
        best_perplexity=perplexity(params, valid_seqs),
    )
    order = np.arange(len(train_seqs))
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        epoch_loss = 0.0
        batches = 0
        for ids, targets, mask in _prediction_batches(
            [train_seqs[i] for i in order], config.batch_size
        ):
            if config.objective == "nce":
                loss, grads = _nce_batch_step(
                    ids, targets, mask, params, noise_dist, config.nce_samples, rng
                )
            else:
                loss, grads = _softmax_batch_step(ids, targets, mask, params)
            if not np.isfinite(loss):
                raise NumericError("numeric overflow in pre-training")
            for name, grad in grads.items():
                opt.step(name, getattr(params, name), grad)
            epoch_loss += loss
            batches += 1
        valid_ppl = perplexity(params, valid_seqs)
        improved = valid_ppl < best.best_perplexity
        if improved:
            best.params = params.copy()
            best.best_perplexity = valid_ppl
            best.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        best.curve.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(batches, 1),
                "valid_perplexity": valid_ppl,
                "best_perplexity": best.best_perplexity,
            }
        )
        if bad_epochs > config.patience:
            break
    return best
