"""Gradient matching with a learned dummy mask, and the (k, d) success-rate harness.

The victim network is the continuous part of the toy pipeline: an input
vector ``x`` (what mean pooling would produce) goes through the tanh
projection to the d-dimensional representation, gets mixed and sign-masked,
and feeds the classifier. The attacker observes the gradients of one hidden
example and optimizes dummy ``(x, sigma, y)`` so that its own gradients match.

Minimizing ``D = ||g(z) - g_hat||^2`` needs ``J_g(z)^T (g - g_hat)``. That is
the gradient of ``phi(z) = <g(z), v>`` with ``v`` frozen, obtained here by
reverse-differentiating the forward *and* backward pass of the network by hand.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..model import LOG_EPS, init_classifier, n_classifier_layers, softmax
from ..numerics import ConfigurationError, OptState, RngStream, adam_step
from ..texthide import gen_mask_pool, sample_lambda

log = logging.getLogger(__name__)


@dataclass
class VictimDims:
    d_in: int = 16
    d: int = 4
    hidden: tuple = ()
    num_classes: int = 10


@dataclass
class AttackConfig:
    iterations: int = 1200
    lr: float = 0.05
    lr_decay_at: tuple = (0.5, 0.75)  # fractions of the run where lr is divided by 10
    reveal_true_label: bool = True
    fixed_single_mask: bool = True
    threshold: float = 1e-3
    trials: int = 20
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigurationError("threshold must be positive")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be >= 1")


@dataclass
class AttackOutcome:
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    grad_dist: list = field(default_factory=list)
    mask_mse: list = field(default_factory=list)
    input_mse: list = field(default_factory=list)
    iterations_logged: list = field(default_factory=list)
    success: bool = False
    final_input_mse: float = float("inf")
    final_mask_mse: float = float("inf")
    error: Optional[str] = None


@dataclass
class Victim:
    params: dict
    x0: np.ndarray
    sigma0: np.ndarray  # ones when unmasked
    target: np.ndarray  # soft label the victim gradient was computed with
    grads: dict
    lam: np.ndarray
    partners: np.ndarray  # (k-1, d_in)


def victim_params(dims: VictimDims, stream: RngStream) -> dict:
    p = {
        "proj_w": stream.child("proj_w").normal((dims.d_in, dims.d)) / np.sqrt(dims.d_in),
        "proj_b": np.zeros(dims.d),
    }
    p.update(init_classifier(dims.d, dims.hidden, dims.num_classes, stream.child("classifier")))
    return p


# ---------------------------------------------------------------------------
# first order


def example_gradients(params: dict, xs: np.ndarray, lam: np.ndarray, sigma: np.ndarray, target: np.ndarray):
    """Loss and parameter gradients for one hidden example built from ``len(xs)`` sources."""
    xs = np.atleast_2d(xs)
    a = xs @ params["proj_w"] + params["proj_b"]
    h = np.tanh(a)
    u = sigma * (lam @ h)
    n = n_classifier_layers(params)
    rs, zs = [u], []
    r = u
    for i in range(n):
        z = r @ params[f"cls_w{i}"] + params[f"cls_b{i}"]
        zs.append(z)
        r = np.maximum(z, 0.0) if i < n - 1 else z
        rs.append(r)
    p = softmax(zs[-1])
    loss = float(-np.sum(target * np.log(p + LOG_EPS)))
    w = -target / (p + LOG_EPS)
    delta = p * (w - np.dot(p, w))
    grads = {}
    for i in range(n - 1, -1, -1):
        grads[f"cls_w{i}"] = np.outer(rs[i], delta)
        grads[f"cls_b{i}"] = delta
        rho = params[f"cls_w{i}"] @ delta
        if i > 0:
            delta = rho * (zs[i - 1] > 0)
    alpha = (1.0 - h * h) * (lam[:, None] * (sigma * rho))  # (k, d)
    grads["proj_w"] = xs.T @ alpha
    grads["proj_b"] = alpha.sum(axis=0)
    return loss, {k: grads[k] for k in params}


def grad_distance(g: dict, g_hat: dict) -> float:
    return float(sum(np.sum((g[k] - g_hat[k]) ** 2) for k in g_hat))


# ---------------------------------------------------------------------------
# second order


def grad_distance_and_grad(params: dict, x, sigma, target_logits_or_probs, g_hat: dict, learn_label: bool):
    """``D(x, sigma, y)`` and its exact gradient for a single-source dummy.

    With ``learn_label`` the third argument holds label logits and the target
    is their softmax; otherwise it is the fixed target distribution.
    Returns ``(D, dx, dsigma, dy)``; ``dy`` is None without ``learn_label``.
    """
    n = n_classifier_layers(params)
    W, b = params["proj_w"], params["proj_b"]
    t = softmax(target_logits_or_probs) if learn_label else target_logits_or_probs

    # forward
    a = x @ W + b
    h = np.tanh(a)
    u = sigma * h
    rs, zs = [u], []
    r = u
    for i in range(n):
        z = r @ params[f"cls_w{i}"] + params[f"cls_b{i}"]
        zs.append(z)
        r = np.maximum(z, 0.0) if i < n - 1 else z
        rs.append(r)
    p = softmax(zs[-1])
    q = p + LOG_EPS
    w = -t / q
    s = float(np.dot(p, w))

    # backward (the gradients g themselves)
    deltas = [None] * n
    rhos = [None] * n
    deltas[n - 1] = p * (w - s)
    for i in range(n - 1, -1, -1):
        rhos[i] = params[f"cls_w{i}"] @ deltas[i]
        if i > 0:
            deltas[i - 1] = rhos[i] * (zs[i - 1] > 0)
    dh_da = 1.0 - h * h
    alpha = dh_da * sigma * rhos[0]
    g = {"proj_w": np.outer(x, alpha), "proj_b": alpha}
    for i in range(n):
        g[f"cls_w{i}"] = np.outer(rs[i], deltas[i])
        g[f"cls_b{i}"] = deltas[i]
    v = {k: g[k] - g_hat[k] for k in g_hat}
    D = float(sum(np.sum(v[k] ** 2) for k in v))

    # reverse through the backward graph: adjoints of alpha, rho_i, delta_i
    alpha_bar = v["proj_w"].T @ x + v["proj_b"]
    x_bar = v["proj_w"] @ alpha
    rho_bar0 = dh_da * sigma * alpha_bar
    sigma_bar = dh_da * rhos[0] * alpha_bar
    h_bar = -2.0 * h * sigma * rhos[0] * alpha_bar
    r_bar = [v[f"cls_w{i}"] @ deltas[i] for i in range(n)]  # direct terms on r_i
    rho_bar = rho_bar0
    delta_bar = None
    for i in range(n):
        delta_bar = rs[i] @ v[f"cls_w{i}"] + v[f"cls_b{i}"] + params[f"cls_w{i}"].T @ rho_bar
        if i < n - 1:
            rho_bar = (zs[i] > 0) * delta_bar
    # delta_{n-1} = p * (w - p.w), w = -t / q
    P = float(np.dot(p, delta_bar))
    w_bar = p * (delta_bar - P)
    p_bar = delta_bar * (w - s) - P * w + w_bar * t / (q * q)
    t_bar = -w_bar / q

    # reverse through the forward graph
    z_bar = p * (p_bar - np.dot(p, p_bar))
    for i in range(n - 1, -1, -1):
        r_bar[i] = r_bar[i] + params[f"cls_w{i}"] @ z_bar
        if i > 0:
            z_bar = (zs[i - 1] > 0) * r_bar[i]
    h_bar = h_bar + sigma * r_bar[0]
    sigma_bar = sigma_bar + h * r_bar[0]
    a_bar = dh_da * h_bar
    x_bar = x_bar + W @ a_bar

    dy = None
    if learn_label:
        dy = 2.0 * t * (t_bar - np.dot(t, t_bar))
    return D, 2.0 * x_bar, 2.0 * sigma_bar, dy


# ---------------------------------------------------------------------------
# victims and the attack loop


def make_victim(dims: VictimDims, k: int, masked: bool, stream: RngStream) -> Victim:
    """Random public model, private input, mixing partners and a single fixed mask."""
    params = victim_params(dims, stream.child("model"))
    xs = stream.child("inputs").normal((k, dims.d_in))
    labels = stream.child("labels").integers(dims.num_classes, k)
    onehots = np.eye(dims.num_classes)[labels]
    lam = sample_lambda(1, k, stream.child("lambda"))[0]
    if masked:
        sigma0 = gen_mask_pool(1, dims.d, stream.child("mask")).masks[0]
    else:
        sigma0 = np.ones(dims.d)
    target = lam @ onehots
    _, grads = example_gradients(params, xs, lam, sigma0, target)
    return Victim(params, xs[0], sigma0, target, grads, lam, xs[1:])


def grad_match_attack(
    target_grads: dict,
    params: dict,
    dims: VictimDims,
    cfg: AttackConfig,
    stream: RngStream,
    true_x=None,
    true_sigma=None,
    label=None,
    learn_mask: bool = True,
    init=None,
) -> AttackOutcome:
    """Optimize dummy input/mask (and label unless revealed) to match ``target_grads``.

    ``true_x``/``true_sigma`` are used only for logging and the success test.
    ``init`` overrides the random start with ``(x, sigma, y)``.
    """
    if init is not None:
        x, sigma, y = (np.array(v, dtype=float, copy=True) for v in init)
    else:
        x = stream.child("init-x").normal(dims.d_in)
        sigma = stream.child("init-sigma").normal(dims.d) if learn_mask else np.ones(dims.d)
        y = stream.child("init-y").normal(dims.num_classes)
    learn_label = not cfg.reveal_true_label
    if not learn_label:
        if label is None:
            raise ConfigurationError("reveal_true_label needs the victim label")
        y = np.asarray(label, dtype=float)
    true_x = np.zeros(dims.d_in) if true_x is None else np.asarray(true_x, dtype=float)
    true_sigma = np.ones(dims.d) if true_sigma is None else np.asarray(true_sigma, dtype=float)

    state = {"x": x, "sigma": sigma, "y": y}
    opt = OptState(lr=cfg.lr)
    decay_steps = sorted(int(f * cfg.iterations) for f in cfg.lr_decay_at)
    out = AttackOutcome(x, y, sigma)
    for it in range(cfg.iterations + 1):
        D, dx, ds, dy = grad_distance_and_grad(
            params, state["x"], state["sigma"], state["y"], target_grads, learn_label
        )
        if not np.isfinite(D) or not np.all(np.isfinite(dx)) or not np.all(np.isfinite(ds)):
            out.error = f"non-finite attack loss at iteration {it}"
            break
        if it % cfg.log_every == 0 or it == cfg.iterations:
            out.iterations_logged.append(it)
            out.grad_dist.append(D)
            out.mask_mse.append(float(np.mean((state["sigma"] - true_sigma) ** 2)))
            out.input_mse.append(float(np.mean((state["x"] - true_x) ** 2)))
        if it == cfg.iterations or D == 0.0:
            break
        opt.lr = cfg.lr * 0.1 ** sum(it >= s for s in decay_steps)
        grads = {
            "x": dx,
            "sigma": ds if learn_mask else np.zeros_like(ds),
            "y": dy if learn_label else np.zeros_like(state["y"]),
        }
        adam_step(state, grads, opt)
    out.x, out.sigma, out.y = state["x"], state["sigma"], (softmax(state["y"]) if learn_label else state["y"])
    if out.error is None:
        out.final_input_mse = float(np.mean((state["x"] - true_x) ** 2))
        out.final_mask_mse = float(np.mean((state["sigma"] - true_sigma) ** 2))
        out.success = out.final_input_mse <= cfg.threshold
    return out


@dataclass(frozen=True)
class Scenario:
    k: int
    d: int
    masked: bool

    @property
    def name(self) -> str:
        return f"k={self.k},d={self.d},{'mask' if self.masked else 'nomask'}"


def run_trial(scenario: Scenario, trial: int, cfg: AttackConfig, dims: VictimDims) -> tuple:
    dims = VictimDims(dims.d_in, scenario.d, tuple(dims.hidden), dims.num_classes)
    root = RngStream(cfg.seed, ["grad-match", scenario.k, scenario.d, int(scenario.masked), trial])
    victim = make_victim(dims, scenario.k, scenario.masked, root.child("victim"))
    outcome = grad_match_attack(
        victim.grads,
        victim.params,
        dims,
        cfg,
        root.child("attack"),
        true_x=victim.x0,
        true_sigma=victim.sigma0,
        label=victim.target,
        learn_mask=scenario.masked,
    )
    return victim, outcome


def attack_success_rate(
    scenarios: Sequence[Scenario], cfg: AttackConfig, dims: VictimDims = VictimDims(), workers: int = 1
) -> list:
    """Run ``cfg.trials`` independent attacks per scenario.

    Returns one dict per scenario with the success rate, mean final MSEs and
    the individual outcomes, in scenario order.
    """
    jobs = [(sc, t) for sc in scenarios for t in range(cfg.trials)]

    def work(job):
        return run_trial(job[0], job[1], cfg, dims)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    rows = []
    for i, sc in enumerate(scenarios):
        chunk = results[i * cfg.trials : (i + 1) * cfg.trials]
        outs = [o for _, o in chunk]
        finite = [o.final_input_mse for o in outs if o.error is None]
        rows.append(
            {
                "scenario": sc,
                "success_rate": sum(o.success for o in outs) / max(1, len(outs)),
                "mean_input_mse": float(np.mean(finite)) if finite else float("nan"),
                "mean_mask_mse": float(np.mean([o.final_mask_mse for o in outs if o.error is None]))
                if finite
                else float("nan"),
                "outcomes": outs,
            }
        )
    return rows
