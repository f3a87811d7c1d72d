"""Toy text model: mean-pooled embeddings -> tanh projection -> ReLU MLP -> softmax.

Parameters are a flat ``dict[str, ndarray]``::

    embedding  (V, d_e)     encoder
    proj_w     (d_e, d)     encoder
    proj_b     (d,)         encoder
    cls_w{i}, cls_b{i}      classifier layers, last one has num_classes outputs

Backward passes are hand-written and run through the TextHide key, so the
encoder receives gradients from encrypted training examples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import ConfigurationError, RngStream
from .texthide import HiddenBatch, MixKey, apply_key, apply_key_transpose

LOG_EPS = 1e-12
CHECKPOINT_MAGIC = b"THMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    rep_dim: int = 64
    hidden: tuple = (64, 64, 64)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("vocab_size", "embed_dim", "rep_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError("hidden widths must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


def param_names(cfg: ModelConfig, encoder: bool = True) -> list:
    names = ["embedding", "proj_w", "proj_b"] if encoder else []
    for i in range(cfg.n_layers):
        names += [f"cls_w{i}", f"cls_b{i}"]
    return names


def encoder_keys() -> tuple:
    return ("embedding", "proj_w", "proj_b")


def init_params(cfg: ModelConfig, stream: RngStream) -> dict:
    p = {
        "embedding": stream.child("embedding").normal((cfg.vocab_size, cfg.embed_dim)),
        "proj_w": stream.child("proj_w").normal((cfg.embed_dim, cfg.rep_dim)) / np.sqrt(cfg.embed_dim),
        "proj_b": np.zeros(cfg.rep_dim),
    }
    p.update(init_classifier(cfg.rep_dim, cfg.hidden, cfg.num_classes, stream.child("classifier")))
    return p


def init_classifier(d: int, hidden: Sequence[int], num_classes: int, stream: RngStream) -> dict:
    p = {}
    widths = [d, *hidden, num_classes]
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        p[f"cls_w{i}"] = stream.child("w", i).normal((fan_in, widths[i + 1])) * np.sqrt(2.0 / fan_in)
        p[f"cls_b{i}"] = np.zeros(widths[i + 1])
    return p


def n_classifier_layers(params: dict) -> int:
    n = 0
    while f"cls_w{n}" in params:
        n += 1
    return n


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward pieces


def _flatten_tokens(token_batch):
    lengths = np.array([len(t) for t in token_batch], dtype=np.int64)
    if len(lengths) == 0:
        raise ConfigurationError("empty batch")
    if np.any(lengths == 0):
        raise ConfigurationError("cannot encode an empty token list")
    flat = np.concatenate([np.asarray(t, dtype=np.int64) for t in token_batch])
    seg = np.repeat(np.arange(len(lengths)), lengths)
    return flat, seg, lengths


def pool(params: dict, token_batch) -> np.ndarray:
    """Mean of token embeddings per sentence, shape (b, d_e)."""
    emb = params["embedding"]
    flat, seg, lengths = _flatten_tokens(token_batch)
    if flat.min() < 0 or flat.max() >= emb.shape[0]:
        raise ConfigurationError("token id out of range")
    out = np.zeros((len(lengths), emb.shape[1]))
    np.add.at(out, seg, emb[flat])
    return out / lengths[:, None]


def project(params: dict, pooled: np.ndarray) -> np.ndarray:
    return np.tanh(pooled @ params["proj_w"] + params["proj_b"])


def encode_batch(params: dict, token_batch) -> np.ndarray:
    return project(params, pool(params, token_batch))


def encode(params: dict, token_ids) -> np.ndarray:
    return encode_batch(params, [token_ids])[0]


def _classifier_forward(params: dict, reps: np.ndarray):
    n = n_classifier_layers(params)
    if reps.shape[-1] != params["cls_w0"].shape[0]:
        raise ConfigurationError(
            f"representation dimension {reps.shape[-1]} != classifier input {params['cls_w0'].shape[0]}"
        )
    acts = [reps]
    pre = []
    h = reps
    for i in range(n):
        z = h @ params[f"cls_w{i}"] + params[f"cls_b{i}"]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n - 1 else z
        acts.append(h)
    return h, (acts, pre)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(params: dict, reps) -> np.ndarray:
    return _classifier_forward(params, np.asarray(reps, dtype=float))[0]


def classify(params: dict, rep) -> np.ndarray:
    """Class probabilities for one representation or a (b, d) batch."""
    return softmax(logits(params, rep))


def soft_ce_loss(pred, target) -> float:
    """Mean over rows of -sum_c target_c * ln(pred_c + 1e-12)."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    return float(np.mean(-np.sum(target * np.log(pred + LOG_EPS), axis=1)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# backward


def _classifier_backward(params, cache, probs, targets, grads):
    """Fill classifier grads for mean soft-CE; return dL/d(classifier input)."""
    acts, pre = cache
    b = probs.shape[0]
    g = -targets / (probs + LOG_EPS) / b
    dz = probs * (g - np.sum(probs * g, axis=1, keepdims=True))
    n = len(pre)
    for i in range(n - 1, -1, -1):
        grads[f"cls_w{i}"] = acts[i].T @ dz
        grads[f"cls_b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"cls_w{i}"].T
        if i > 0:
            dz = dh * (pre[i - 1] > 0)
    return dh


def backward_from_pooled(params: dict, pooled: np.ndarray, targets: np.ndarray, key: Optional[MixKey]):
    """Loss and gradients for projection + classifier given pooled encoder inputs.

    ``key=None`` runs the plain (unencrypted) pipeline. Returns
    ``(loss, grads, d_pooled)``; ``grads`` has no ``embedding`` entry.
    """
    enc = project(params, pooled)
    hidden = enc if key is None else apply_key(enc, key)
    out, cache = _classifier_forward(params, hidden)
    probs = softmax(out)
    loss = soft_ce_loss(probs, targets)
    grads: dict = {}
    d_hidden = _classifier_backward(params, cache, probs, targets, grads)
    d_enc = d_hidden if key is None else apply_key_transpose(d_hidden, key)
    d_pre = d_enc * (1.0 - enc * enc)
    grads["proj_w"] = pooled.T @ d_pre
    grads["proj_b"] = d_pre.sum(axis=0)
    d_pooled = d_pre @ params["proj_w"].T
    return loss, grads, d_pooled


def _scatter_embedding(params, token_batch, d_pooled):
    flat, seg, lengths = _flatten_tokens(token_batch)
    d_emb = np.zeros_like(params["embedding"])
    np.add.at(d_emb, flat, d_pooled[seg] / lengths[seg, None])
    return d_emb


def _ordered(params, grads):
    return {k: grads[k] for k in params if k in grads}


def backward_batch(params: dict, token_batch, hidden: HiddenBatch):
    """Mean soft-CE loss on a hidden batch and exact gradients for all parameters.

    The client recomputes the encodings from ``token_batch`` and pushes the
    gradient back through the batch's key; masks and coefficients are constants.
    """
    if hidden.key is None:
        raise ConfigurationError("hidden batch carries no key; gradients cannot reach the encoder")
    pooled = pool(params, token_batch)
    loss, grads, d_pooled = backward_from_pooled(params, pooled, hidden.labels, hidden.key)
    grads["embedding"] = _scatter_embedding(params, token_batch, d_pooled)
    return loss, _ordered(params, grads)


def backward_plain(params: dict, token_batch, targets):
    """Same as :func:`backward_batch` with no encryption step at all."""
    pooled = pool(params, token_batch)
    loss, grads, d_pooled = backward_from_pooled(params, pooled, np.asarray(targets, dtype=float), None)
    grads["embedding"] = _scatter_embedding(params, token_batch, d_pooled)
    return loss, _ordered(params, grads)


# ---------------------------------------------------------------------------
# checkpoint: "THMC", u32 version, u32 vocab, u32 d_e, u32 d, u32 classes,
# u32 n_hidden, u32 widths..., then every parameter block as little-endian f64
# in param_names order.


def write_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    head = CHECKPOINT_MAGIC + struct.pack(
        "<IIIIII", CHECKPOINT_VERSION, cfg.vocab_size, cfg.embed_dim, cfg.rep_dim, cfg.num_classes, len(cfg.hidden)
    )
    head += struct.pack(f"<{len(cfg.hidden)}I", *cfg.hidden)
    with open(path, "wb") as fh:
        fh.write(head)
        for name in param_names(cfg):
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a model checkpoint")
    version, vocab, de, d, ncls, nh = struct.unpack("<IIIIII", blob[4:28])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    hidden = struct.unpack(f"<{nh}I", blob[28 : 28 + 4 * nh])
    cfg = ModelConfig(vocab, de, d, hidden, ncls)
    shapes = {"embedding": (vocab, de), "proj_w": (de, d), "proj_b": (d,)}
    widths = [d, *hidden, ncls]
    for i in range(cfg.n_layers):
        shapes[f"cls_w{i}"] = (widths[i], widths[i + 1])
        shapes[f"cls_b{i}"] = (widths[i + 1],)
    off = 28 + 4 * nh
    params = {}
    for name in param_names(cfg):
        n = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(float).reshape(shapes[name])
        off += 8 * n
    if off != len(blob):
        raise ConfigurationError(f"{path}: trailing or missing bytes")
    return params, cfg
