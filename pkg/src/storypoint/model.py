"""Recurrent story-point regressor.

The network embeds the issue text, runs an LSTM over the token sequence,
mean-pools the output states into a document vector, refines that vector
with a stack of gated highway layers sharing one parameter set, and reads
the estimate off a linear regressor. Gradients are derived by hand;
tests/test_model.py checks every tensor against central differences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import NumericError, dropout_mask, sigmoid

CHECKPOINT_MAGIC = b"SPCKPT01"

INIT_SCALE = 0.05


class ModelError(ValueError):
    """Raised for malformed checkpoints or mismatched shapes."""


@dataclass
class ModelConfig:
    embedding_dim: int = 50
    highway_depth: int = 10
    dropout_lstm: float = 0.2
    dropout_highway: float = 0.5
    tokenizer_mode: str = "word"

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.highway_depth < 1:
            raise ValueError("highway_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


# Gate slices within the stacked (d, 4d) LSTM weight matrices.
def _gate_slices(d):
    return slice(0, d), slice(d, 2 * d), slice(2 * d, 3 * d), slice(3 * d, 4 * d)


@dataclass
class ModelParams:
    """All learnable tensors. Hidden widths equal the embedding width."""

    emb: np.ndarray        # (V, d) token embeddings
    lstm_wx: np.ndarray    # (d, 4d) input maps, gate order input/forget/output/candidate
    lstm_wh: np.ndarray    # (d, 4d) recurrent maps
    lstm_b: np.ndarray     # (4d,)
    hw_gate_w: np.ndarray  # (d, d) highway gate
    hw_gate_b: np.ndarray  # (d,)
    hw_trans_w: np.ndarray # (d, d) highway transform
    hw_trans_b: np.ndarray # (d,)
    reg_w: np.ndarray      # (d,)
    reg_b: np.ndarray      # (1,)
    lm_u: np.ndarray       # (V, d) softmax weights, used only in pre-training

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "emb": self.emb,
            "lstm_wx": self.lstm_wx,
            "lstm_wh": self.lstm_wh,
            "lstm_b": self.lstm_b,
            "hw_gate_w": self.hw_gate_w,
            "hw_gate_b": self.hw_gate_b,
            "hw_trans_w": self.hw_trans_w,
            "hw_trans_b": self.hw_trans_b,
            "reg_w": self.reg_w,
            "reg_b": self.reg_b,
            "lm_u": self.lm_u,
        }

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def dim(self) -> int:
        return self.emb.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors().items()}


def expected_shapes(vocab_size: int, d: int) -> dict[str, tuple]:
    return {
        "emb": (vocab_size, d),
        "lstm_wx": (d, 4 * d),
        "lstm_wh": (d, 4 * d),
        "lstm_b": (4 * d,),
        "hw_gate_w": (d, d),
        "hw_gate_b": (d,),
        "hw_trans_w": (d, d),
        "hw_trans_b": (d,),
        "reg_w": (d,),
        "reg_b": (1,),
        "lm_u": (vocab_size, d),
    }


def init_params(vocab_size: int, config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-0.05, 0.05) initialization for every tensor."""
    shapes = expected_shapes(vocab_size, config.embedding_dim)
    return ModelParams(
        **{k: rng.uniform(-INIT_SCALE, INIT_SCALE, s) for k, s in shapes.items()}
    )


def zero_params(vocab_size: int, config: ModelConfig) -> ModelParams:
    shapes = expected_shapes(vocab_size, config.embedding_dim)
    return ModelParams(**{k: np.zeros(s) for k, s in shapes.items()})


def embed(token_ids, emb: np.ndarray) -> np.ndarray:
    """Look up embedding rows. Callers map out-of-vocabulary ids to unk first."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= emb.shape[0]):
        raise ModelError("id out of range")
    return emb[ids]


@dataclass
class DropoutMasks:
    """Fixed dropout masks so forward and backward see the same pattern."""

    lstm_in: np.ndarray   # (B, T, d)
    lstm_out: np.ndarray  # (B, T, d)
    highway: np.ndarray   # (B, d)


def make_dropout_masks(batch: int, steps: int, config: ModelConfig,
                       rng: np.random.Generator) -> DropoutMasks:
    d = config.embedding_dim
    return DropoutMasks(
        lstm_in=dropout_mask((batch, steps, d), config.dropout_lstm, rng),
        lstm_out=dropout_mask((batch, steps, d), config.dropout_lstm, rng),
        highway=dropout_mask((batch, d), config.dropout_highway, rng),
    )


def pad_batch(sequences: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length id lists into (ids, mask) arrays."""
    if not sequences:
        raise ModelError("empty batch")
    if any(len(s) == 0 for s in sequences):
        raise ModelError("empty token sequence in batch")
    steps = max(len(s) for s in sequences)
    ids = np.full((len(sequences), steps), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), steps), dtype=np.float64)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = 1.0
    return ids, mask


def _lstm_forward(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, dict]:
    """Run the LSTM over x (B, T, d); returns output states and a cache."""
    batch, steps, d = x.shape
    gi, gf, go, gc = _gate_slices(d)
    h = np.zeros((batch, d))
    c = np.zeros((batch, d))
    states = np.empty((batch, steps, d))
    cache = {"x": x, "i": [], "f": [], "o": [], "g": [], "c": [], "tc": [], "h_prev": []}
    for t in range(steps):
        pre = x[:, t] @ params.lstm_wx + h @ params.lstm_wh + params.lstm_b
        i_t = sigmoid(pre[:, gi])
        f_t = sigmoid(pre[:, gf])
        o_t = sigmoid(pre[:, go])
        g_t = np.tanh(pre[:, gc])
        cache["h_prev"].append(h)
        c = f_t * c + i_t * g_t
        tc = np.tanh(c)
        h = o_t * tc
        states[:, t] = h
        for key, val in (("i", i_t), ("f", f_t), ("o", o_t), ("g", g_t), ("c", c), ("tc", tc)):
            cache[key].append(val)
    return states, cache


def _lstm_backward(d_states: np.ndarray, mask: np.ndarray, cache: dict,
                   params: ModelParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop through time; returns the gradient w.r.t. the inputs."""
    x = cache["x"]
    batch, steps, d = x.shape
    gi, gf, go, gc = _gate_slices(d)
    dx = np.zeros_like(x)
    dh_next = np.zeros((batch, d))
    dc_next = np.zeros((batch, d))
    for t in range(steps - 1, -1, -1):
        i_t, f_t, o_t, g_t = cache["i"][t], cache["f"][t], cache["o"][t], cache["g"][t]
        tc = cache["tc"][t]
        c_prev = cache["c"][t - 1] if t > 0 else np.zeros((batch, d))
        dh = d_states[:, t] + dh_next
        dc = dc_next + dh * o_t * (1.0 - tc * tc)
        dpre = np.empty((batch, 4 * d))
        dpre[:, gi] = dc * g_t * i_t * (1.0 - i_t)
        dpre[:, gf] = dc * c_prev * f_t * (1.0 - f_t)
        dpre[:, go] = dh * tc * o_t * (1.0 - o_t)
        dpre[:, gc] = dc * i_t * (1.0 - g_t * g_t)
        dpre *= mask[:, t : t + 1]  # padded steps contribute nothing
        grads["lstm_wx"] += x[:, t].T @ dpre
        grads["lstm_wh"] += cache["h_prev"][t].T @ dpre
        grads["lstm_b"] += dpre.sum(axis=0)
        dx[:, t] = dpre @ params.lstm_wx.T
        dh_next = dpre @ params.lstm_wh.T
        dc_next = dc * f_t
    return dx


def _highway_forward(v: np.ndarray, params: ModelParams, depth: int) -> tuple[np.ndarray, dict]:
    """Apply the shared-parameter gated layer `depth` times to v (B, d)."""
    cache = {"v": [v], "a": [], "s": []}
    for _ in range(depth):
        a = sigmoid(v @ params.hw_gate_w + params.hw_gate_b)
        s = np.tanh(v @ params.hw_trans_w + params.hw_trans_b)
        v = a * v + (1.0 - a) * s
        cache["a"].append(a)
        cache["s"].append(s)
        cache["v"].append(v)
    return v, cache


def _highway_backward(dv: np.ndarray, cache: dict, params: ModelParams,
                      grads: dict[str, np.ndarray]) -> np.ndarray:
    depth = len(cache["a"])
    for l in range(depth - 1, -1, -1):
        v_prev, a, s = cache["v"][l], cache["a"][l], cache["s"][l]
        da = dv * (v_prev - s)
        ds = dv * (1.0 - a)
        dpre_t = ds * (1.0 - s * s)
        dpre_g = da * a * (1.0 - a)
        grads["hw_trans_w"] += v_prev.T @ dpre_t
        grads["hw_trans_b"] += dpre_t.sum(axis=0)
        grads["hw_gate_w"] += v_prev.T @ dpre_g
        grads["hw_gate_b"] += dpre_g.sum(axis=0)
        dv = dv * a + dpre_t @ params.hw_trans_w.T + dpre_g @ params.hw_gate_w.T
    return dv


def batch_forward(ids: np.ndarray, mask: np.ndarray, params: ModelParams,
                  config: ModelConfig, masks: DropoutMasks | None = None):
    """Forward pass over a padded batch; returns estimates and a cache."""
    x = embed(ids, params.emb) * mask[:, :, None]
    if masks is not None:
        x = x * masks.lstm_in
    states, lstm_cache = _lstm_forward(x, params)
    consumed = states * masks.lstm_out if masks is not None else states
    lengths = mask.sum(axis=1)
    pooled = (consumed * mask[:, :, None]).sum(axis=1) / lengths[:, None]
    deep, hw_cache = _highway_forward(pooled, params, config.highway_depth)
    deep_out = deep * masks.highway if masks is not None else deep
    yhat = deep_out @ params.reg_w + params.reg_b[0]
    cache = {
        "ids": ids, "mask": mask, "lengths": lengths, "masks": masks,
        "lstm": lstm_cache, "states": states, "hw": hw_cache, "deep_out": deep_out,
    }
    return yhat, cache


def batch_backward(dyhat: np.ndarray, cache: dict, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(yhat) for the cached batch."""
    grads = params.zero_grads()
    mask, lengths, masks = cache["mask"], cache["lengths"], cache["masks"]
    grads["reg_w"] += cache["deep_out"].T @ dyhat
    grads["reg_b"] += dyhat.sum(keepdims=True)
    d_deep = dyhat[:, None] * params.reg_w[None, :]
    if masks is not None:
        d_deep = d_deep * masks.highway
    d_pooled = _highway_backward(d_deep, cache["hw"], params, grads)
    d_states = d_pooled[:, None, :] * (mask / lengths[:, None])[:, :, None]
    if masks is not None:
        d_states = d_states * masks.lstm_out
    dx = _lstm_backward(d_states, mask, cache["lstm"], params, grads)
    if masks is not None:
        dx = dx * masks.lstm_in
    np.add.at(grads["emb"], cache["ids"], dx * mask[:, :, None])
    return grads


def squared_error(yhat: float, y: float) -> tuple[float, float]:
    """Training criterion for one issue: loss and d(loss)/d(yhat)."""
    diff = yhat - y
    return diff * diff, 2.0 * diff


def batch_loss_and_grads(sequences: list[list[int]], targets, params: ModelParams,
                         config: ModelConfig, masks: DropoutMasks | None = None,
                         rng: np.random.Generator | None = None):
    """Mean squared-error loss and gradients over a batch of token sequences.

    Pass rng to draw fresh dropout masks (training); pass masks to reuse a
    fixed pattern (gradient checking); pass neither for inference-mode loss.
    """
    ids, mask = pad_batch(sequences)
    if rng is not None and masks is None:
        masks = make_dropout_masks(ids.shape[0], ids.shape[1], config, rng)
    yhat, cache = batch_forward(ids, mask, params, config, masks)
    y = np.asarray(targets, dtype=np.float64)
    diff = yhat - y
    with np.errstate(over="ignore"):  # overflow is detected, not a bug
        loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NumericError("numeric overflow in forward pass")
    grads = batch_backward(2.0 * diff / len(sequences), cache, params)
    return loss, yhat, grads


# Single-sequence views of the layers, matching how the network is described
# operation by operation. The batched code above is the training path.

def lstm_encode(inputs: np.ndarray, params: ModelParams,
                dropout: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Output states h_1..h_n for one embedded sequence (n, d)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ModelError("lstm_encode expects a non-empty (n, d) sequence")
    if dropout is not None:
        x = x * dropout[0]
    states, _ = _lstm_forward(x[None], params)
    out = states[0]
    if dropout is not None:
        out = out * dropout[1]
    return out


def mean_pool(states: np.ndarray) -> np.ndarray:
    """Average the state sequence into one document vector."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ModelError("mean_pool expects a non-empty (n, d) sequence")
    return states.mean(axis=0)


def document_vectors(sequences: list[list[int]], params: ModelParams,
                     batch_size: int = 256) -> np.ndarray:
    """Mean-pooled LSTM output states per sequence: the frozen text features
    consumed by external regressors instead of the highway/regressor head."""
    out = np.empty((len(sequences), params.dim))
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        ids, mask = pad_batch(chunk)
        x = embed(ids, params.emb) * mask[:, :, None]
        states, _ = _lstm_forward(x, params)
        out[start : start + len(chunk)] = (
            (states * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1)[:, None]
        )
    return out


def highway_forward(h: np.ndarray, params: ModelParams, depth: int,
                    dropout: np.ndarray | None = None) -> np.ndarray:
    """Deep representation of a single vector via the shared gated layer."""
    if depth < 1:
        raise ModelError("depth must be >= 1")
    out, _ = _highway_forward(np.asarray(h, dtype=np.float64)[None], params, depth)
    out = out[0]
    if dropout is not None:
        out = out * dropout
    return out


def forward_issue(token_ids: list[int], params: ModelParams, config: ModelConfig,
                  training: bool = False, rng: np.random.Generator | None = None) -> float:
    """Estimate story points for one tokenized issue (raw, unclamped)."""
    if not token_ids:
        raise ModelError("empty token sequence")
    ids, mask = pad_batch([list(token_ids)])
    masks = None
    if training:
        if rng is None:
            raise ModelError("training forward pass needs an rng for dropout")
        masks = make_dropout_masks(1, ids.shape[1], config, rng)
    yhat, _ = batch_forward(ids, mask, params, config, masks)
    return float(yhat[0])


# ---------------------------------------------------------------------------
# Checkpoint container: magic, u64 header length, JSON header, raw tensors.
# Plain little-endian float64 payloads keep the bytes reproducible.
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str  # "model" or "pretrain"
    config: ModelConfig
    vocab_hash: str
    tensors: dict[str, np.ndarray]

    def to_params(self, rng: np.random.Generator | None = None) -> ModelParams:
        """Materialize full ModelParams; missing tensors (partial pre-train
        checkpoints) are drawn from the standard initialization."""
        vocab_size = self.tensors["emb"].shape[0]
        if rng is not None:
            params = init_params(vocab_size, self.config, rng)
        else:
            params = zero_params(vocab_size, self.config)
        for name, value in self.tensors.items():
            getattr(params, name)[...] = value
        return params


def save_checkpoint(path: str | Path, kind: str, config: ModelConfig, vocab_hash: str,
                    tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    header = {
        "kind": kind,
        "config": config.to_dict(),
        "vocab_hash": vocab_hash,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "big"))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path} is not a checkpoint file")
    header_len = int.from_bytes(data[8:16], "big")
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    offset = 16 + header_len
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ModelError(f"{path} is truncated")
        tensors[entry["name"]] = (
            np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        )
        offset = end
    if "emb" not in tensors:
        raise ModelError(f"{path} lacks an embedding tensor")
    expected = expected_shapes(tensors["emb"].shape[0], config.embedding_dim)
    for name, value in tensors.items():
        if name not in expected:
            raise ModelError(f"{path}: unknown tensor {name!r}")
        if value.shape != expected[name]:
            raise ModelError(
                f"{path}: tensor {name} has shape {value.shape}, expected {expected[name]}"
            )
    return Checkpoint(
        kind=header["kind"], config=config,
        vocab_hash=header["vocab_hash"], tensors=tensors,
    )
