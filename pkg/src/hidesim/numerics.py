"""Keyed random streams, optimizers, finite-difference checking and small vector kernels."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

# Bumped whenever the label hashing or the bit generator changes; written into reports.
RNG_VERSION = "pcg64-seedseq-blake2b/1"

Label = Union[str, int]


class ConfigurationError(ValueError):
    """Raised for invalid shapes, parameters or configuration values."""


def _label_word(label: Label) -> int:
    if isinstance(label, bool) or not isinstance(label, (str, int, np.integer)):
        raise ConfigurationError(f"stream labels must be str or int, got {label!r}")
    tag = f"s:{label}" if isinstance(label, str) else f"i:{int(label)}"
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


class RngStream:
    """Random stream identified by ``(root_seed, label_path)``.

    Streams with the same key replay the same draws no matter which thread or
    in which order they are created, because nothing is shared between them.
    """

    def __init__(self, root_seed: int, label_path: Sequence[Label] = ()):
        self.root_seed = int(root_seed) & 0xFFFFFFFFFFFFFFFF
        self.label_path = tuple(label_path)
        seq = np.random.SeedSequence(
            entropy=self.root_seed,
            spawn_key=tuple(_label_word(x) for x in self.label_path),
        )
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"RngStream({self.root_seed}, {list(self.label_path)!r})"

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.root_seed, self.label_path + labels)

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, n: int, size=None):
        return self._gen.integers(0, n, size=size)

    def rademacher(self, size=None):
        return np.where(self._gen.random(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seeded_stream(root_seed: int, label_path: Sequence[Label] = ()) -> RngStream:
    return RngStream(root_seed, label_path)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _as_dict(x) -> dict:
    return x if isinstance(x, Mapping) else {"": x}


def adam_step(params, grads, state: OptState):
    """Update ``params`` in place with one Adam step (AdamW when weight_decay > 0).

    ``params``/``grads`` are either arrays or dicts of arrays with equal keys.
    Returns ``(params, state)``.
    """
    p, g = _as_dict(params), _as_dict(grads)
    if p.keys() != g.keys():
        raise ConfigurationError("parameter and gradient keys differ")
    for k in p:
        if p[k].shape != g[k].shape:
            raise ConfigurationError(f"shape mismatch for {k!r}: {p[k].shape} vs {g[k].shape}")
        if k in state.m and state.m[k].shape != p[k].shape:
            raise ConfigurationError(f"optimizer state shape mismatch for {k!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k in p:
        if k not in state.m:
            state.m[k] = np.zeros_like(p[k])
            state.v[k] = np.zeros_like(p[k])
        m, v, gk = state.m[k], state.v[k], g[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * gk
        v *= state.beta2
        v += (1.0 - state.beta2) * (gk * gk)
        if state.weight_decay:
            p[k] -= state.lr * state.weight_decay * p[k]
        p[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sgd_step(params, grads, lr: float):
    p, g = _as_dict(params), _as_dict(grads)
    for k in p:
        if p[k].shape != g[k].shape:
            raise ConfigurationError(f"shape mismatch for {k!r}")
        p[k] -= lr * g[k]
    return params


# ---------------------------------------------------------------------------
# finite differences


def grad_check(loss_fn: Callable, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)`` with ``grads`` shaped like
    ``params`` (array or dict of arrays). Params are perturbed in place and
    restored.
    """
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    p = _as_dict(params)
    _, analytic = loss_fn(params)
    analytic = {k: np.array(v, dtype=float, copy=True) for k, v in _as_dict(analytic).items()}
    worst = 0.0
    for k, arr in p.items():
        flat = arr.reshape(-1)
        a_flat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn(params)[0])
            flat[i] = orig - eps
            lm = float(loss_fn(params)[0])
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss when perturbing {k!r}[{i}]")
            num = (lp - lm) / (2.0 * eps)
            err = abs(a_flat[i] - num) / max(1e-8, abs(a_flat[i]) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# vector kernels


def unit_rows(x) -> np.ndarray:
    """Rows of ``x`` scaled to unit L2 norm; all-zero rows stay zero.

    Each row is divided by its largest magnitude first, so vectors with
    tiny entries do not lose precision to underflow.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    scale = np.max(np.abs(x), axis=1, keepdims=True, initial=0.0)
    x = np.divide(x, scale, out=np.zeros_like(x), where=scale > 0)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_sim(u, v) -> float:
    """Cosine similarity; zero when either vector is zero."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ConfigurationError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(unit_rows(u.ravel())[0], unit_rows(v.ravel())[0]), -1.0, 1.0))


def mse(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ConfigurationError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.mean((u - v) ** 2))
