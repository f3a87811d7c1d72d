"""Representation-based similarity search: nearest raw representation by cosine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import model as M
from ..corpus import Dataset, Vocab
from ..numerics import ConfigurationError, RngStream, unit_rows
from ..texthide import gen_mask_pool, hide_batch_intra


class DegenerateQueryError(ValueError):
    pass


@dataclass(frozen=True)
class RssIndex:
    ids: np.ndarray  # sentence ids, ascending
    sentences: tuple
    vectors: np.ndarray  # raw representations, (n, d)
    unit: np.ndarray  # row-normalized copy used for search

    def __len__(self):
        return len(self.ids)


def build_index_from_vectors(sentences, vectors) -> RssIndex:
    vectors = np.asarray(vectors, dtype=float)
    if len(sentences) == 0:
        raise ConfigurationError("cannot index an empty dataset")
    order = np.argsort([s.id for s in sentences], kind="stable")
    sentences = tuple(sentences[i] for i in order)
    vectors = vectors[order]
    ids = np.array([s.id for s in sentences], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ConfigurationError("index sentence ids must be unique")
    return RssIndex(ids, sentences, vectors, unit_rows(vectors))


def rss_build_index(dataset: Dataset, params: dict, vocab: Vocab) -> RssIndex:
    """Encode every sentence with the plain encoder; the dataset must be deduplicated."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot index an empty dataset")
    if len({s.tokens for s in dataset}) != len(dataset):
        raise ConfigurationError("index corpus has duplicate sentences; run dedup first")
    reps = M.encode_batch(params, [vocab.ids(s.tokens) for s in dataset])
    return build_index_from_vectors(dataset.sentences, reps)


def rss_query_batch(index: RssIndex, queries) -> tuple:
    """Best entry position and cosine for each query row; ties go to the lowest id."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if q.shape[1] != index.vectors.shape[1]:
        raise ConfigurationError("query dimension differs from index dimension")
    if not np.all(np.any(q != 0.0, axis=1)):
        raise DegenerateQueryError("degenerate query")
    sims = unit_rows(q) @ index.unit.T
    best = np.argmax(sims, axis=1)
    return best, sims[np.arange(len(q)), best]


def rss_query(index: RssIndex, query_vec) -> tuple:
    best, sim = rss_query_batch(index, query_vec)
    return index.sentences[int(best[0])], float(sim[0])


def hidden_queries(reps, labels, num_classes: int, m, k: int, stream: RngStream, batch_size: int = 32) -> np.ndarray:
    """Intra-dataset TextHide encodings of ``reps``; row i hides example i.

    The rows are shuffled into batches so partners come from the whole set,
    then restored to input order.
    """
    reps = np.asarray(reps, dtype=float)
    n, d = reps.shape
    pool = gen_mask_pool(m, d, stream.child("pool"))
    targets = M.one_hot(labels, num_classes)
    order = stream.child("order").permutation(n)
    out = np.empty_like(reps)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        hb = hide_batch_intra(reps[idx], targets[idx], pool, k, stream.child("batch", start))
        out[idx] = hb.reps
    return out


def answer_queries(index: RssIndex, queries) -> list:
    best, _ = rss_query_batch(index, queries)
    return [index.sentences[int(b)] for b in best]


def self_identity(index: RssIndex, queries: Optional[np.ndarray] = None) -> float:
    """Fraction of index entries retrieved by their own (possibly hidden) query."""
    q = index.vectors if queries is None else queries
    best, _ = rss_query_batch(index, q)
    return float(np.mean(best == np.arange(len(index))))
