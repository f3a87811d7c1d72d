"""Experiment configuration: strict JSON schema, defaults and a stable hash.

Every section is a dataclass. Loading walks the dataclass fields, so unknown
keys and wrongly-typed values are rejected with the dotted path of the
offending entry. ``config_hash`` is the SHA-256 of the canonical JSON form.
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Union

from .numerics import ConfigurationError


@dataclass
class SyntheticConfig:
    num_classes: int = 2
    per_class: int = 500
    test_per_class: int = 250
    public_size: int = 200
    vocab_size: int = 200
    signal_tokens_per_class: int = 5
    min_length: int = 5
    max_length: int = 12
    signal_prob: float = 0.5


@dataclass
class CorpusConfig:
    # Explicit TSV paths win over the generated corpus in ``<out_dir>/corpus``.
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    public_path: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class ModelSection:
    vocab_size: Optional[int] = None  # None: size of the training vocabulary
    embed_dim: int = 32
    rep_dim: int = 64
    hidden: list = field(default_factory=lambda: [64, 64, 64])


@dataclass
class TextHideConfig:
    enabled: bool = True
    m: Union[int, str] = 256  # "inf" = fresh mask per use
    k: int = 4
    variant: str = "intra"
    mask_schedule: str = "epoch"


@dataclass
class FederatedConfig:
    clients: int = 2
    rounds: int = 500
    batch_size: int = 32
    lr: float = 0.003
    optimizer: str = "adam"
    weight_decay: float = 0.0
    eval_every: int = 50
    checkpoint_every: int = 0


@dataclass
class GradMatchSection:
    ks: list = field(default_factory=lambda: [1, 2])
    ds: list = field(default_factory=lambda: [4, 16, 64])
    include_nomask: bool = True  # adds the undefended (k=1, no mask) cell for each d
    trials: int = 20
    iterations: int = 1200
    lr: float = 0.05
    threshold: float = 1e-3
    d_in: int = 16
    num_classes: int = 10
    log_every: int = 10


@dataclass
class RssSection:
    # (m, k) pairs; m may be "inf". (0, 1) is the unprotected baseline.
    schemes: list = field(default_factory=lambda: [[0, 1], [0, 4], [256, 4]])
    batch_size: int = 32


@dataclass
class RepReconSection:
    schemes: list = field(default_factory=lambda: [[0, 1], [256, 4]])
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-3
    final_lr_fraction: float = 0.1
    n_queries: int = 500


@dataclass
class SubsetSumSection:
    ns: list = field(default_factory=lambda: [16, 32, 64])
    ks: list = field(default_factory=lambda: [1, 2, 3])
    d: int = 8
    instances: int = 3


@dataclass
class AttacksConfig:
    grad_match: GradMatchSection = field(default_factory=GradMatchSection)
    rss: RssSection = field(default_factory=RssSection)
    reprecon: RepReconSection = field(default_factory=RepReconSection)
    subset_sum: SubsetSumSection = field(default_factory=SubsetSumSection)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    texthide: TextHideConfig = field(default_factory=TextHideConfig)
    federated: FederatedConfig = field(default_factory=FederatedConfig)
    attacks: AttacksConfig = field(default_factory=AttacksConfig)

    def validate(self) -> "ExperimentConfig":
        th, fed, syn = self.texthide, self.federated, self.corpus.synthetic
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        check_m(th.m, "texthide.m")
        if th.k < 1:
            raise ConfigurationError("texthide.k must be >= 1")
        if th.variant not in ("intra", "inter"):
            raise ConfigurationError(f"texthide.variant must be 'intra' or 'inter', got {th.variant!r}")
        if th.mask_schedule not in ("epoch", "batch"):
            raise ConfigurationError(f"texthide.mask_schedule must be 'epoch' or 'batch', got {th.mask_schedule!r}")
        if fed.clients < 1 or fed.batch_size < 1 or fed.rounds < 0:
            raise ConfigurationError("federated: clients and batch_size must be >= 1, rounds >= 0")
        if fed.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"federated.optimizer must be 'adam' or 'sgd', got {fed.optimizer!r}")
        if th.enabled and th.variant == "inter" and self.corpus.public_path is None and syn.public_size < 1:
            raise ConfigurationError("texthide.variant 'inter' requires a public corpus")
        for path in ("rss", "reprecon"):
            for i, pair in enumerate(getattr(self.attacks, path).schemes):
                if not (isinstance(pair, list) and len(pair) == 2):
                    raise ConfigurationError(f"attacks.{path}.schemes[{i}] must be an [m, k] pair")
                check_m(pair[0], f"attacks.{path}.schemes[{i}][0]")
                if not isinstance(pair[1], int) or pair[1] < 1:
                    raise ConfigurationError(f"attacks.{path}.schemes[{i}][1]: k must be an integer >= 1")
        return self

    @property
    def scheme(self) -> str:
        if not self.texthide.enabled or (self.texthide.m == 0 and self.texthide.k == 1):
            return "baseline"
        return f"TextHide_{self.texthide.variant}"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def check_m(m, where: str) -> None:
    if m == "inf":
        return
    if isinstance(m, bool) or not isinstance(m, int) or m < 0:
        raise ConfigurationError(f'{where}: m must be a non-negative integer or "inf"')


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is Union:
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _coerce(value, opt, where)
            except ConfigurationError:
                pass
        raise ConfigurationError(f"{where}: {value!r} does not match {tp}")
    if tp is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string")
        return value
    raise ConfigurationError(f"{where}: unsupported schema type {tp}")


def _build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(data[name], hints[name], f"{where}.{name}" if where else name)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON (sorted keys, no whitespace).

    ``out_dir`` is excluded: moving a run elsewhere does not change what it computes.
    """
    data = cfg.to_dict()
    data.pop("out_dir")
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
