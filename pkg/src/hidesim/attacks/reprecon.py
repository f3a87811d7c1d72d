"""RepRecon: regress raw representations from hidden ones, then look them up with RSS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import ConfigurationError, OptState, RngStream, adam_step
from .rss import RssIndex, rss_query, rss_query_batch


@dataclass
class ReconConfig:
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-3
    final_lr_fraction: float = 0.1  # lr decays geometrically to lr * this by the last epoch
    seed: int = 0


@dataclass
class ReconNet:
    params: dict
    losses: list = field(default_factory=list)  # train-set MSE after each epoch

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def __call__(self, x):
        return forward(self.params, np.atleast_2d(np.asarray(x, dtype=float)))[0]


def init_net(d: int, hidden: int, stream: RngStream) -> dict:
    widths = [d, hidden, hidden, d]
    p = {}
    for i in range(3):
        p[f"w{i}"] = stream.child("w", i).normal((widths[i], widths[i + 1])) * np.sqrt(2.0 / widths[i])
        p[f"b{i}"] = np.zeros(widths[i + 1])
    return p


def forward(p: dict, x: np.ndarray):
    z0 = x @ p["w0"] + p["b0"]
    a0 = np.maximum(z0, 0.0)
    z1 = a0 @ p["w1"] + p["b1"]
    a1 = np.maximum(z1, 0.0)
    out = a1 @ p["w2"] + p["b2"]
    return out, (x, z0, a0, z1, a1)


def loss_and_grads(p: dict, x: np.ndarray, target: np.ndarray):
    """Mean squared error over all coordinates of the batch."""
    out, (x, z0, a0, z1, a1) = forward(p, x)
    diff = out - target
    loss = float(np.mean(diff * diff))
    g_out = 2.0 * diff / diff.size
    grads = {"w2": a1.T @ g_out, "b2": g_out.sum(axis=0)}
    g1 = (g_out @ p["w2"].T) * (z1 > 0)
    grads["w1"] = a0.T @ g1
    grads["b1"] = g1.sum(axis=0)
    g0 = (g1 @ p["w1"].T) * (z0 > 0)
    grads["w0"] = x.T @ g0
    grads["b0"] = g0.sum(axis=0)
    return loss, {k: grads[k] for k in p}


def reprecon_train(hidden_reps, raw_reps, cfg: ReconConfig = ReconConfig()) -> ReconNet:
    """Fit the reconstruction MLP on (hidden, raw) pairs with Adam."""
    X = np.asarray(hidden_reps, dtype=float)
    Y = np.asarray(raw_reps, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ConfigurationError("reprecon needs a nonempty set of training pairs")
    if X.shape != Y.shape:
        raise ConfigurationError("hidden and raw representations must have the same shape")
    root = RngStream(cfg.seed, ["reprecon"])
    net = ReconNet(init_net(X.shape[1], cfg.hidden, root.child("init")))
    opt = OptState(lr=cfg.lr)
    n = len(X)
    for epoch in range(cfg.epochs):
        frac = epoch / max(1, cfg.epochs - 1)
        opt.lr = cfg.lr * cfg.final_lr_fraction**frac
        order = root.child("epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grads(net.params, X[idx], Y[idx])
            adam_step(net.params, grads, opt)
        # full-pass loss after the epoch, not the running average during it
        net.losses.append(float(np.mean((net(X) - Y) ** 2)))
    return net


def reprecon_attack(net: ReconNet, hidden_query, index: RssIndex):
    """Reconstruct the raw representation and return the nearest index sentence."""
    return rss_query(index, net(hidden_query)[0])


def reprecon_attack_batch(net: ReconNet, hidden_queries, index: RssIndex) -> list:
    best, _ = rss_query_batch(index, net(hidden_queries))
    return [index.sentences[int(b)] for b in best]
