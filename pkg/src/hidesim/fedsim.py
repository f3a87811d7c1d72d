"""In-process federated fine-tuning with per-client TextHide encryption.

Each round every client samples a batch, encodes it with the current
encoder, hides it with its own mask pool and returns gradients. The server
averages them and updates both encoder and classifier.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from .corpus import Dataset, Vocab
from .numerics import RNG_VERSION, ConfigurationError, OptState, RngStream, adam_step, sgd_step
from .texthide import (
    FRESH,
    MaskPool,
    assign_epoch_masks,
    gen_mask_pool,
    hide_batch_inter,
    hide_batch_intra,
    split_pool,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    seed: int = 0
    clients: int = 2
    rounds: int = 500
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "adam"  # adam | sgd
    weight_decay: float = 0.0
    m: object = 0  # int pool size, or "inf" for a fresh mask per use
    k: int = 1
    variant: str = "intra"  # intra | inter
    mask_schedule: str = "epoch"  # epoch | batch
    bypass_texthide: bool = False
    eval_every: int = 50
    checkpoint_every: int = 0
    workers: int = 1

    def validate(self):
        if self.clients < 1 or self.batch_size < 1 or self.k < 1 or self.rounds < 0:
            raise ConfigurationError("clients, batch_size, k must be >= 1 and rounds >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in ("intra", "inter"):
            raise ConfigurationError(f"unknown TextHide variant {self.variant!r}")
        if self.mask_schedule not in ("epoch", "batch"):
            raise ConfigurationError(f"unknown mask schedule {self.mask_schedule!r}")
        if self.m != "inf":
            if int(self.m) < 0:
                raise ConfigurationError("m must be >= 0")
            if 0 < int(self.m) < self.clients:
                raise ConfigurationError("m must be 0 or at least the number of clients (pools are disjoint)")

    @property
    def scheme(self) -> str:
        if self.bypass_texthide or (self.m == 0 and self.k == 1):
            return "baseline"
        return f"TextHide_{self.variant}"


@dataclass
class ClientState:
    cid: int
    data: Dataset
    pool: MaskPool
    stream: RngStream
    token_ids: list = field(repr=False)
    targets: np.ndarray = field(repr=False)
    rounds_per_epoch: int = 1  # mask rotation period: one pass over the client's data


@dataclass
class Gradients:
    """Everything a client sends to the server: gradient arrays and its batch loss."""

    arrays: dict
    loss: float

    def to_wire(self) -> dict:
        return {"loss": self.loss, "grads": {k: v.tolist() for k, v in self.arrays.items()}}


@dataclass
class ServerState:
    params: dict
    lr: float
    rounds: int
    optimizer: str = "adam"
    opt: OptState = field(default_factory=OptState)
    t: int = 0
    n_clients: int = 1


@dataclass
class RoundLog:
    round: int
    loss: float
    accuracy: Optional[float]
    grad_norms: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def make_clients(train: Dataset, vocab: Vocab, settings: TrainSettings, rep_dim: int) -> list:
    settings.validate()
    root = RngStream(settings.seed)
    m = FRESH if settings.m == "inf" else int(settings.m)
    full_pool = gen_mask_pool(m, rep_dim, root.child("mask-pool"), owner="clients")
    pools = split_pool(full_pool, settings.clients)
    clients = []
    for c, idx in enumerate(np.array_split(np.arange(len(train)), settings.clients)):
        if len(idx) == 0:
            raise ConfigurationError("more clients than training sentences")
        data = train.subset(idx)
        cl = ClientState(
            cid=c,
            data=data,
            pool=pools[c],
            stream=root.child("client", c),
            token_ids=[vocab.ids(s.tokens) for s in data],
            targets=M.one_hot(data.labels, train.num_classes),
            rounds_per_epoch=max(1, math.ceil(len(data) / settings.batch_size)),
        )
        clients.append(cl)
    return clients


def client_update(client: ClientState, params: dict, settings: TrainSettings, t: int, public_reps=None) -> Gradients:
    """Gradients of one client for round ``t``; the hiding key never leaves this function."""
    stream = client.stream.child("round", t)
    n = len(client.data)
    if settings.batch_size > n:
        raise ConfigurationError(f"batch size {settings.batch_size} exceeds client {client.cid} data ({n})")
    idx = stream.child("batch").integers(n, settings.batch_size)
    toks = [client.token_ids[i] for i in idx]
    targets = client.targets[idx]
    if settings.bypass_texthide:
        loss, grads = M.backward_plain(params, toks, targets)
        return Gradients(grads, loss)
    enc = M.encode_batch(params, toks)
    mask_index = None
    if settings.mask_schedule == "epoch":
        ids = [client.data[i].id for i in idx]
        epoch = t // client.rounds_per_epoch
        mask_index = assign_epoch_masks(client.pool, ids, epoch, client.stream.child("masks"))
    hide_stream = stream.child("hide")
    if settings.variant == "inter":
        hidden = hide_batch_inter(enc, targets, public_reps, client.pool, settings.k, hide_stream, mask_index)
    else:
        hidden = hide_batch_intra(enc, targets, client.pool, settings.k, hide_stream, mask_index)
    loss, grads = M.backward_batch(params, toks, hidden)
    return Gradients(grads, loss)


def server_round(server: ServerState, updates: list) -> ServerState:
    """Average client gradients and apply one update (SGD: theta -= lr * mean)."""
    if len(updates) != server.n_clients:
        raise ConfigurationError(f"expected {server.n_clients} client updates, got {len(updates)}")
    arrays = [u.arrays if isinstance(u, Gradients) else u for u in updates]
    avg = {}
    for k in server.params:
        acc = arrays[0][k].copy()
        for g in arrays[1:]:
            acc += g[k]
        avg[k] = acc / len(arrays)
    if server.optimizer == "sgd":
        sgd_step(server.params, avg, server.lr)
    else:
        server.opt.lr = server.lr
        adam_step(server.params, avg, server.opt)
    server.t += 1
    return server


def evaluate(params: dict, dataset: Dataset, vocab: Vocab) -> float:
    """Accuracy of plain (unencrypted) predictions."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    reps = M.encode_batch(params, [vocab.ids(s.tokens) for s in dataset])
    pred = np.argmax(M.logits(params, reps), axis=1)
    return float(np.mean(pred == dataset.labels))


# ---------------------------------------------------------------------------
# optimizer state file: "THMO", u32 version, u64 step, then m and v blocks
# (little-endian f64) for each parameter in checkpoint order.

_OPT_MAGIC = b"THMO"


def write_opt_state(path, opt: OptState, names: list, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(_OPT_MAGIC + struct.pack("<IQ", 1, opt.step))
        for name in names:
            for store in (opt.m, opt.v):
                arr = store.get(name, np.zeros_like(params[name]))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_opt_state(path, names: list, params: dict, template: OptState) -> OptState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _OPT_MAGIC:
        raise ConfigurationError(f"{path}: not an optimizer state file")
    _, step = struct.unpack("<IQ", blob[4:16])
    opt = OptState(template.lr, template.beta1, template.beta2, template.eps, template.weight_decay, step)
    off = 16
    for name in names:
        n = params[name].size
        for store in (opt.m, opt.v):
            store[name] = np.frombuffer(blob, "<f8", n, off).astype(float).reshape(params[name].shape)
            off += 8 * n
    if step == 0:
        opt.m.clear()
        opt.v.clear()
    return opt


def save_training_state(out_dir, server: ServerState, cfg: M.ModelConfig, config_hash: str, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = M.param_names(cfg)
    M.write_checkpoint(out / "checkpoint.thmc", server.params, cfg)
    write_opt_state(out / "optimizer.thmo", server.opt, names, server.params)
    sidecar = {"config_hash": config_hash, "round": server.t, "seed": seed, "rng": RNG_VERSION}
    (out / "checkpoint.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def run_training(
    settings: TrainSettings,
    model_cfg: M.ModelConfig,
    train: Dataset,
    test: Optional[Dataset],
    vocab: Vocab,
    public: Optional[Dataset] = None,
    out_dir=None,
    config_hash: str = "",
    resume: bool = False,
    params: Optional[dict] = None,
    round_hook=None,
):
    """Run ``settings.rounds`` federated rounds; returns ``(params, logs)``.

    With ``out_dir`` set, round logs go to ``rounds.jsonl`` and checkpoints are
    written every ``checkpoint_every`` rounds and at the end. ``resume`` picks
    up from the checkpoint in ``out_dir``. ``round_hook(t, updates)`` sees the
    client traffic of each round (used by tests).
    """
    settings.validate()
    if settings.variant == "inter" and not settings.bypass_texthide and (public is None or len(public) == 0):
        raise ConfigurationError("variant 'inter' needs a public corpus")
    clients = make_clients(train, vocab, settings, model_cfg.rep_dim)
    if params is None:
        params = M.init_params(model_cfg, RngStream(settings.seed, ["model", "init"]))
    params = M.copy_params(params)
    opt = OptState(lr=settings.lr, weight_decay=settings.weight_decay)
    server = ServerState(params, settings.lr, settings.rounds, settings.optimizer, opt, 0, settings.clients)
    logs: list = []
    out = Path(out_dir) if out_dir is not None else None
    if resume:
        if out is None or not (out / "checkpoint.thmc").exists():
            raise ConfigurationError("nothing to resume: no checkpoint in output directory")
        server.params, _ = M.read_checkpoint(out / "checkpoint.thmc")
        server.opt = read_opt_state(out / "optimizer.thmo", M.param_names(model_cfg), server.params, opt)
        side = json.loads((out / "checkpoint.json").read_text())
        if config_hash and side.get("config_hash") not in ("", config_hash):
            raise ConfigurationError("checkpoint was produced by a different configuration")
        server.t = int(side["round"])
        if (out / "rounds.jsonl").exists():
            for line in (out / "rounds.jsonl").read_text().splitlines():
                rec = json.loads(line)
                if rec["round"] <= server.t:
                    logs.append(RoundLog(**rec))
    public_tokens = [vocab.ids(s.tokens) for s in public] if public is not None else None

    pool_exec = ThreadPoolExecutor(max_workers=settings.workers) if settings.workers > 1 else None
    try:
        while server.t < settings.rounds:
            t = server.t
            public_reps = None
            if settings.variant == "inter" and public_tokens is not None:
                public_reps = M.encode_batch(server.params, public_tokens)
            snapshot = server.params

            def work(cl):
                return client_update(cl, snapshot, settings, t, public_reps)

            updates = list(pool_exec.map(work, clients)) if pool_exec else [work(c) for c in clients]
            for cl, u in zip(clients, updates):
                if not np.isfinite(u.loss) or not all(np.all(np.isfinite(g)) for g in u.arrays.values()):
                    raise TrainingError(f"non-finite loss/gradient in round {t + 1} from client {cl.cid}")
            if round_hook is not None:
                round_hook(t, updates)
            server.params = M.copy_params(server.params)
            server_round(server, updates)
            acc = None
            if (
                test is not None
                and settings.eval_every
                and (server.t % settings.eval_every == 0 or server.t == settings.rounds)
            ):
                acc = evaluate(server.params, test, vocab)
            norms = [float(np.sqrt(sum(float(np.sum(g * g)) for g in u.arrays.values()))) for u in updates]
            logs.append(RoundLog(server.t, float(np.mean([u.loss for u in updates])), acc, norms))
            if acc is not None:
                log.info("round %d loss %.4f acc %.4f", server.t, logs[-1].loss, acc)
            if out is not None and settings.checkpoint_every and server.t % settings.checkpoint_every == 0:
                save_training_state(out, server, model_cfg, config_hash, settings.seed)
                _write_logs(out, logs)
    finally:
        if pool_exec:
            pool_exec.shutdown()
    if out is not None:
        save_training_state(out, server, model_cfg, config_hash, settings.seed)
        _write_logs(out, logs)
    return server.params, logs


def _write_logs(out: Path, logs: list) -> None:
    with open(out / "rounds.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in logs:
            fh.write(rec.to_json() + "\n")
