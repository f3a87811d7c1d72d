"""Leakage metrics between a query sentence and an attack's answer, plus the random baseline."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Sentence, Vocab, sparse_cosine, tfidf_vector
from .numerics import RngStream

METRIC_NAMES = ("identity", "jaccard", "tfidf_sim", "label_agree", "semantic_sim")
# Report headers keep the usual table names; "JC_dist" is the Jaccard *similarity*.
REPORT_HEADERS = ("identity", "jc", "tfidf_sim", "label", "semantic_sim")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    identity: float
    jaccard: float
    tfidf_sim: float
    label_agree: float
    semantic_sim: float

    def as_tuple(self) -> tuple:
        return astuple(self)


def identity(x: Sentence, x_star: Sentence) -> int:
    return int(tuple(x.tokens) == tuple(x_star.tokens))


def jaccard(x: Sentence, x_star: Sentence) -> float:
    a, b = set(x.tokens), set(x_star.tokens)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def tfidf_sim(x: Sentence, x_star: Sentence, vocab: Vocab) -> float:
    if tuple(x.tokens) == tuple(x_star.tokens) and any(t in vocab.df for t in x.tokens):
        return 1.0
    return float(min(1.0, max(0.0, sparse_cosine(tfidf_vector(x, vocab), tfidf_vector(x_star, vocab)))))


def label_agree(x: Sentence, x_star: Sentence) -> int:
    if x.label is None or x_star.label is None:
        raise MetricsError("label_agree needs labeled sentences")
    return int(x.label == x_star.label)


def tfidf_scorer(reference_vocab: Vocab) -> Callable[[Sentence, Sentence], float]:
    """Stand-in semantic scorer: TF-IDF cosine over a held-out reference corpus."""
    return lambda a, b: tfidf_sim(a, b, reference_vocab)


def score_pair(x: Sentence, x_star: Sentence, vocab: Vocab, semantic: Optional[Callable] = None) -> MetricsRow:
    sem = semantic(x, x_star) if semantic is not None else tfidf_sim(x, x_star, vocab)
    return MetricsRow(
        float(identity(x, x_star)),
        jaccard(x, x_star),
        tfidf_sim(x, x_star, vocab),
        float(label_agree(x, x_star)),
        float(sem),
    )


def aggregate(rows: Sequence[MetricsRow]) -> tuple:
    """Per-metric arithmetic means and the row count."""
    if not rows:
        raise MetricsError("cannot aggregate zero rows")
    arr = np.array([r.as_tuple() for r in rows], dtype=float)
    return MetricsRow(*(float(v) for v in arr.mean(axis=0))), len(rows)


def random_baseline(
    index_sentences: Sequence[Sentence],
    queries: Sequence[Sentence],
    stream: RngStream,
    vocab: Vocab,
    semantic: Optional[Callable] = None,
) -> tuple:
    """Answer each query with a uniformly random index entry; returns ``aggregate`` output."""
    if not index_sentences:
        raise MetricsError("random baseline needs a nonempty index")
    picks = stream.integers(len(index_sentences), len(queries))
    rows = [score_pair(q, index_sentences[int(j)], vocab, semantic) for q, j in zip(queries, picks)]
    return aggregate(rows)


def metrics_csv_rows(results: dict) -> list:
    """``{scheme: (MetricsRow, n)}`` -> CSV rows with the fixed column order."""
    out = [("scheme",) + REPORT_HEADERS + ("n_queries",)]
    for scheme, (row, n) in results.items():
        out.append((scheme,) + tuple(f"{v:.6f}" for v in row.as_tuple()) + (str(n),))
    return out
