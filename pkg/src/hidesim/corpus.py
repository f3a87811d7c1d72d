"""Tokenization, TSV datasets, vocabularies, TF-IDF and the synthetic corpus generator."""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .numerics import ConfigurationError, RngStream

UNK = "<unk>"
_PUNCT = string.punctuation


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple
    raw_text: str
    label: Optional[int] = None


@dataclass(frozen=True)
class Dataset:
    sentences: tuple
    num_classes: int
    role: str = "private"

    def __post_init__(self):
        if self.role not in ("private", "public"):
            raise ConfigurationError(f"unknown dataset role {self.role!r}")
        if self.role == "private":
            for s in self.sentences:
                if s.label is None or not 0 <= s.label < self.num_classes:
                    raise CorpusError(f"sentence {s.id} has invalid label {s.label!r}")

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.sentences], dtype=np.int64)

    def subset(self, idx: Iterable[int], role: Optional[str] = None) -> "Dataset":
        return Dataset(tuple(self.sentences[i] for i in idx), self.num_classes, role or self.role)

    def as_public(self) -> "Dataset":
        """Copy with all labels removed."""
        stripped = tuple(Sentence(s.id, s.tokens, s.raw_text, None) for s in self.sentences)
        return Dataset(stripped, self.num_classes, "public")


def load_tsv(path, num_classes: Optional[int] = None, role: str = "private") -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    sentences = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if "\t" not in line:
            raise CorpusError(f"{path}:{lineno}: expected 'label<TAB>text'")
        lab, text = line.split("\t", 1)
        try:
            label = int(lab)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
        if label < 0:
            if role != "public" or label != -1:
                raise CorpusError(f"{path}:{lineno}: negative label {label}")
            label = None  # public corpora are written with -1 for "unlabeled"
        toks = tokenize(text)
        if not toks:
            raise CorpusError(f"{path}:{lineno}: text has no tokens")
        sentences.append(Sentence(len(sentences), tuple(toks), text, label))
    if not sentences:
        raise CorpusError(f"{path}: empty dataset")
    known = [s.label for s in sentences if s.label is not None]
    n_cls = num_classes if num_classes is not None else (max(known) + 1 if known else 1)
    return Dataset(tuple(sentences), n_cls, role)


def write_tsv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset:
            fh.write(f"{-1 if s.label is None else s.label}\t{s.raw_text}\n")


def dedup(dataset: Dataset) -> Dataset:
    seen = set()
    keep = []
    for s in dataset:
        if s.tokens not in seen:
            seen.add(s.tokens)
            keep.append(s)
    return Dataset(tuple(keep), dataset.num_classes, dataset.role)


def gen_synthetic(
    num_classes: int = 2,
    per_class: int = 500,
    vocab_size: int = 200,
    signal_tokens_per_class: int = 5,
    length_range: Sequence[int] = (5, 12),
    seed: int = 0,
    signal_prob: float = 0.5,
    stream: Optional[RngStream] = None,
) -> Dataset:
    """Balanced labeled corpus where each class owns a disjoint set of signal words.

    Every position draws a class signal word with probability ``signal_prob``
    and a shared background word otherwise. No two sentences share the same
    bag of words, so mean-pooled encodings of distinct sentences never coincide.
    """
    lo, hi = int(length_range[0]), int(length_range[1])
    n_signal = num_classes * signal_tokens_per_class
    if num_classes < 1 or per_class < 1 or signal_tokens_per_class < 1:
        raise ConfigurationError("num_classes, per_class and signal_tokens_per_class must be >= 1")
    if vocab_size <= n_signal:
        raise ConfigurationError(f"vocab_size={vocab_size} must exceed num_classes*signal_tokens_per_class={n_signal}")
    if not 1 <= lo <= hi:
        raise ConfigurationError(f"bad length_range {length_range!r}")
    if not 0.0 <= signal_prob <= 1.0:
        raise ConfigurationError("signal_prob must lie in [0, 1]")
    rng = stream or RngStream(seed, ["corpus", "synthetic"])
    words = [f"w{i:04d}" for i in range(vocab_size)]
    background = np.arange(n_signal, vocab_size)

    seen: set = set()
    drafts = []
    for c in range(num_classes):
        signal = np.arange(c * signal_tokens_per_class, (c + 1) * signal_tokens_per_class)
        made = attempts = 0
        while made < per_class:
            attempts += 1
            if attempts > 50 * per_class:
                raise ConfigurationError("cannot draw enough distinct sentences; enlarge vocab or lengths")
            length = lo + int(rng.integers(hi - lo + 1))
            is_sig = rng.uniform(length) < signal_prob
            sig = signal[rng.integers(len(signal), length)]
            bg = background[rng.integers(len(background), length)]
            ids = np.where(is_sig, sig, bg)
            bag = tuple(sorted(ids.tolist()))
            if bag in seen:
                continue
            seen.add(bag)
            drafts.append((c, [words[i] for i in ids]))
            made += 1
    order = rng.permutation(len(drafts))
    sentences = tuple(
        Sentence(new_id, tuple(drafts[j][1]), " ".join(drafts[j][1]), drafts[j][0]) for new_id, j in enumerate(order)
    )
    return Dataset(sentences, num_classes, "private")


@dataclass(frozen=True)
class Vocab:
    index: dict
    df: dict = field(default_factory=dict)
    n_docs: int = 0

    def __len__(self):
        return len(self.index)

    def __contains__(self, tok):
        return tok in self.index

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        """Token ids; unknown tokens map to ``<unk>`` when the vocab has one, else are dropped."""
        unk = self.index.get(UNK)
        out = []
        for t in tokens:
            i = self.index.get(t, unk)
            if i is not None:
                out.append(i)
        return np.asarray(out, dtype=np.int64)

    def idf(self, tok: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(tok, 0))) + 1.0


def build_vocab(sentences: Iterable[Sentence], with_unk: bool = False) -> Vocab:
    df: Counter = Counter()
    n = 0
    for s in sentences:
        n += 1
        df.update(set(s.tokens))
    toks = sorted(df)
    index = {}
    if with_unk:
        index[UNK] = 0
    for t in toks:
        if t not in index:
            index[t] = len(index)
    return Vocab(index, dict(df), n)


def tfidf_vector(sentence, vocab: Vocab) -> dict:
    """L2-normalized TF-IDF weights keyed by vocab index; out-of-vocab tokens ignored."""
    tokens = sentence.tokens if isinstance(sentence, Sentence) else tuple(sentence)
    tf = Counter(t for t in tokens if t in vocab.df)
    weights = {vocab.index[t]: c * vocab.idf(t) for t, c in tf.items()}
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm == 0.0:
        return {}
    return {i: w / norm for i, w in sorted(weights.items())}


def sparse_cosine(a: dict, b: dict) -> float:
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    return float(sum(w * b.get(i, 0.0) for i, w in a.items()))
