"""Numeric substrate for the learning modules.

Everything runs on float64 numpy arrays. Randomness always flows through an
explicitly seeded generator so identical seeds give bit-identical runs.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single entry point for randomness."""
    return np.random.default_rng(seed)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive n independent deterministic generators from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def softmax_rows(x):
    """Row-wise softmax with max subtraction; rows sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def activations(x, kind: str):
    """Dispatch table used where the nonlinearity is configuration."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(np.asarray(x, dtype=np.float64))
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation {kind!r}")


class RmsPropState:
    """Per-tensor running mean of squared gradients plus step sizes."""

    def __init__(self, learning_rate: float, decay: float, smoothing: float):
        if not 0 < decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if learning_rate <= 0 or smoothing <= 0:
            raise ValueError("learning_rate and smoothing must be positive")
        self.learning_rate = learning_rate
        self.decay = decay
        self.smoothing = smoothing
        self.mean_square: dict[str, np.ndarray] = {}

    def step(self, name: str, params: np.ndarray, grads: np.ndarray) -> None:
        """Update params in place: ms <- d*ms + (1-d)*g^2; p -= lr*g/sqrt(ms+eps)."""
        if not np.all(np.isfinite(grads)):
            raise NumericError(f"gradient blow-up in {name}")
        ms = self.mean_square.get(name)
        if ms is None:
            ms = np.zeros_like(params)
            self.mean_square[name] = ms
        ms *= self.decay
        ms += (1.0 - self.decay) * grads * grads
        params -= self.learning_rate * grads / np.sqrt(ms + self.smoothing)


def rmsprop_step(params: np.ndarray, grads: np.ndarray, state: RmsPropState,
                 name: str = "param") -> np.ndarray:
    """Single-tensor convenience wrapper around RmsPropState.step."""
    out = params.astype(np.float64).copy()
    state.step(name, out, np.asarray(grads, dtype=np.float64))
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Scale all gradients so their joint L2 norm is at most threshold.

    Returns the pre-clip norm. Off by default in the trainers.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = total**0.5
    if norm > threshold and norm > 0:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout mask: entries are 0 with probability rate, else 1/(1-rate).

    Scaling at train time means inference uses the weights unchanged.
    """
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def grad_check(f, x: np.ndarray, analytic_grad: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic_grad and central differences of f.

    f must be a scalar function of x; x is perturbed in place and restored,
    so f may close over the same array.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = analytic_grad.reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
