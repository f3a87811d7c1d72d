"""(m, k)-TextHide: sign-mask pools, MixUp plans and the intra/inter-dataset encryptors.

A hidden example is ``sigma * sum_j lam_j * e_{pi_j(i)}``. Everything needed to
redo or differentiate that map (permutations, coefficients, signs, public
partner contribution) is kept in a :class:`MixKey` that never leaves the
client that created it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import ConfigurationError, RngStream

FRESH = "fresh"  # pool sentinel: a new random mask for every use (m = infinity)


class HidingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPool:
    """``m`` sign vectors of length ``d``; ``m == 0`` means no masking."""

    masks: np.ndarray  # (m, d) of +-1.0
    d: int
    owner: str = ""
    fresh: bool = False

    @property
    def m(self) -> int:
        return self.masks.shape[0]

    @property
    def is_identity(self) -> bool:
        return self.m == 0 and not self.fresh


def gen_mask_pool(m, d: int, stream: RngStream, owner: str = "") -> MaskPool:
    if d < 1:
        raise ConfigurationError("mask dimension must be >= 1")
    if m == FRESH or m == math.inf:
        return MaskPool(np.zeros((0, d)), d, owner, fresh=True)
    m = int(m)
    if m < 0:
        raise ConfigurationError("pool size must be >= 0")
    return MaskPool(stream.rademacher((m, d)), d, owner)


def split_pool(pool: MaskPool, n_parts: int) -> list:
    """Disjoint sub-pools whose sizes sum to ``pool.m`` (earlier parts get the remainder)."""
    if pool.fresh:
        return [MaskPool(pool.masks, pool.d, f"{pool.owner}/{c}", fresh=True) for c in range(n_parts)]
    sizes = [pool.m // n_parts + (1 if c < pool.m % n_parts else 0) for c in range(n_parts)]
    out, start = [], 0
    for c, s in enumerate(sizes):
        out.append(MaskPool(pool.masks[start : start + s], pool.d, f"{pool.owner}/{c}"))
        start += s
    return out


def sample_lambda(b: int, k: int, stream: RngStream) -> np.ndarray:
    """Rows of |N(0, I_k)| normalized onto the simplex."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    lam = np.abs(stream.normal((b, k)))
    sums = lam.sum(axis=1)
    while np.any(sums == 0.0):  # probability-zero event
        bad = sums == 0.0
        lam[bad] = np.abs(stream.normal((int(bad.sum()), k)))
        sums = lam.sum(axis=1)
    return lam / sums[:, None]


def gen_permutations(b: int, k: int, stream: RngStream) -> np.ndarray:
    """(k, b) array; row 0 is the identity, rows 1.. are uniform permutations."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    perms = np.empty((k, b), dtype=np.int64)
    perms[0] = np.arange(b)
    for j in range(1, k):
        perms[j] = stream.permutation(b)
    return perms


def assign_epoch_masks(pool: MaskPool, example_ids: Sequence[int], epoch: int, stream: RngStream):
    """One pool index per example, fixed for the whole epoch.

    ``stream`` should be the owning client's stream; every (epoch, example)
    draw uses its own child stream so the index does not depend on batch
    composition. Returns None for an identity or fresh pool.
    """
    if pool.is_identity or pool.fresh:
        return None
    ids = np.asarray(example_ids, dtype=np.int64)
    if pool.m == 1:
        return np.zeros(len(ids), dtype=np.int64)
    return np.array(
        [int(stream.child("epoch", int(epoch), "example", int(i)).integers(pool.m)) for i in ids],
        dtype=np.int64,
    )


@dataclass(frozen=True)
class MixKey:
    """Client-side secret: how a hidden batch was formed from its encodings."""

    perms: np.ndarray  # (k_private, b) indices into the private batch; row 0 identity
    lam: np.ndarray  # (b, k) coefficients; first k_private columns are private slots
    signs: Optional[np.ndarray]  # (b, d) or None when unmasked
    mask_index: Optional[np.ndarray]  # (b,) pool index per example (None if unmasked/fresh)
    public_idx: Optional[np.ndarray] = None  # (k - k_private, b) indices into the public cache
    public_mix: Optional[np.ndarray] = None  # (b, d) weighted sum of public partners (constant)

    @property
    def k(self) -> int:
        return self.lam.shape[1]

    @property
    def k_private(self) -> int:
        return self.perms.shape[0]


@dataclass(frozen=True)
class HiddenBatch:
    reps: np.ndarray  # (b, d) encrypted representations
    labels: np.ndarray  # (b, L) soft labels
    key: Optional[MixKey] = None

    def server_view(self) -> "HiddenBatch":
        return HiddenBatch(self.reps, self.labels, None)


def apply_key(enc: np.ndarray, key: MixKey) -> np.ndarray:
    """Forward map e -> e~ for a batch of encodings."""
    mixed = key.lam[:, 0:1] * enc[key.perms[0]]
    for j in range(1, key.k_private):
        mixed = mixed + key.lam[:, j : j + 1] * enc[key.perms[j]]
    if key.public_mix is not None:
        mixed = mixed + key.public_mix
    if key.signs is not None:
        mixed = key.signs * mixed
    return mixed


def apply_key_transpose(grad_hidden: np.ndarray, key: MixKey) -> np.ndarray:
    """Adjoint of :func:`apply_key`: maps dL/de~ to dL/de (public partners are constants)."""
    g = grad_hidden if key.signs is None else key.signs * grad_hidden
    out = key.lam[:, 0:1] * g  # slot 0 is the identity permutation
    for j in range(1, key.k_private):
        np.add.at(out, key.perms[j], key.lam[:, j : j + 1] * g)
    return out


def _signs_for(pool: MaskPool, b: int, d: int, stream: RngStream, mask_index):
    if pool.d != d:
        raise HidingError(f"mask pool dimension {pool.d} != representation dimension {d}")
    if pool.fresh:
        return stream.child("fresh-masks").rademacher((b, d)), None
    if pool.is_identity:
        return None, None
    if mask_index is None:
        mask_index = stream.child("mask-index").integers(pool.m, b)
    mask_index = np.asarray(mask_index, dtype=np.int64)
    if mask_index.shape != (b,) or mask_index.min() < 0 or mask_index.max() >= pool.m:
        raise HidingError("mask indices out of range for pool")
    return pool.masks[mask_index], mask_index


def hide_batch_intra(enc, labels, pool: MaskPool, k: int, stream: RngStream, mask_index=None) -> HiddenBatch:
    """Mix each encoding with k-1 batch partners, mix labels alike, then sign-mask.

    ``mask_index`` pins each example's pool mask (epoch schedule); otherwise
    masks are drawn per batch from ``stream``.
    """
    enc = np.asarray(enc, dtype=float)
    labels = np.asarray(labels, dtype=float)
    b, d = enc.shape
    if labels.shape[0] != b:
        raise HidingError("labels and encodings differ in batch size")
    perms = gen_permutations(b, k, stream.child("perms"))
    lam = sample_lambda(b, k, stream.child("lambda"))
    signs, mask_index = _signs_for(pool, b, d, stream, mask_index)
    key = MixKey(perms, lam, signs, mask_index)
    reps = apply_key(enc, key)
    soft = lam[:, 0:1] * labels[perms[0]]
    for j in range(1, k):
        soft = soft + lam[:, j : j + 1] * labels[perms[j]]
    return HiddenBatch(reps, soft, key)


def hide_batch_inter(
    enc, labels, public_reps, pool: MaskPool, k: int, stream: RngStream, mask_index=None
) -> HiddenBatch:
    """Mix ceil(k/2) private slots (slot 1 = the example) with floor(k/2) public partners.

    Only private labels are mixed; they are renormalized by the private
    coefficient mass.
    """
    enc = np.asarray(enc, dtype=float)
    labels = np.asarray(labels, dtype=float)
    public_reps = np.asarray(public_reps, dtype=float)
    if public_reps.ndim != 2 or public_reps.shape[0] == 0:
        raise HidingError("inter-dataset hiding needs a nonempty public corpus")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    b, d = enc.shape
    if public_reps.shape[1] != d:
        raise HidingError("public representations have the wrong dimension")
    k_priv = (k + 1) // 2
    perms = gen_permutations(b, k_priv, stream.child("perms"))
    lam = sample_lambda(b, k, stream.child("lambda"))
    pub_idx = None
    pub_mix = None
    if k > k_priv:
        pub_idx = stream.child("public").integers(public_reps.shape[0], (k - k_priv, b))
        pub_mix = lam[:, k_priv : k_priv + 1] * public_reps[pub_idx[0]]
        for j in range(1, k - k_priv):
            pub_mix = pub_mix + lam[:, k_priv + j : k_priv + j + 1] * public_reps[pub_idx[j]]
    signs, mask_index = _signs_for(pool, b, d, stream, mask_index)
    key = MixKey(perms, lam, signs, mask_index, pub_idx, pub_mix)
    reps = apply_key(enc, key)
    soft = lam[:, 0:1] * labels[perms[0]]
    for j in range(1, k_priv):
        soft = soft + lam[:, j : j + 1] * labels[perms[j]]
    soft = soft / lam[:, :k_priv].sum(axis=1, keepdims=True)
    return HiddenBatch(reps, soft, key)


# ---------------------------------------------------------------------------
# debug dump: magic, u32 m, u32 d, then sign bits (1 = -1) packed row-major, MSB first

_POOL_MAGIC = b"THMP"


def dump_mask_pool(pool: MaskPool, path) -> None:
    if pool.fresh:
        raise HidingError("a fresh-mask pool has nothing to dump")
    bits = np.packbits((pool.masks < 0).astype(np.uint8).reshape(-1))
    with open(path, "wb") as fh:
        fh.write(_POOL_MAGIC + struct.pack("<II", pool.m, pool.d) + bits.tobytes())


def load_mask_pool(path, owner: str = "") -> MaskPool:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _POOL_MAGIC:
        raise HidingError(f"{path}: not a mask pool dump")
    m, d = struct.unpack("<II", blob[4:12])
    bits = np.unpackbits(np.frombuffer(blob[12:], dtype=np.uint8))[: m * d]
    masks = np.where(bits.reshape(m, d) == 1, -1.0, 1.0)
    return MaskPool(masks, d, owner)
