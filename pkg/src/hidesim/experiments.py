"""Experiment drivers shared by the CLI, the estimators and the acceptance tests.

These functions take already-loaded data and return plain result objects;
file layout lives in ``cli``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .attacks.gradmatch import AttackConfig, Scenario, VictimDims, attack_success_rate
from .attacks.reprecon import ReconConfig, reprecon_attack_batch, reprecon_train
from .attacks.rss import answer_queries, hidden_queries, rss_build_index
from .attacks.subset_sum import plant_instance, subset_sum_recover
from .corpus import Dataset, Sentence, Vocab, build_vocab, dedup
from .metrics import aggregate, random_baseline, score_pair, tfidf_scorer
from .numerics import RngStream


def scheme_name(m, k: int) -> str:
    if m == 0 and k == 1:
        return "baseline"
    return f"texthide_m{m}_k{k}"


def split_stratified(full: Dataset, per_class: int) -> tuple:
    """First ``per_class`` sentences of each class go to train, the rest to test."""
    seen = {}
    train_idx, test_idx = [], []
    for i, s in enumerate(full):
        n = seen.get(s.label, 0)
        (train_idx if n < per_class else test_idx).append(i)
        seen[s.label] = n + 1
    return full.subset(train_idx), full.subset(test_idx)


def concat(a: Dataset, b: Dataset) -> Dataset:
    """Join two datasets, renumbering ids so they stay unique."""
    out = list(a.sentences)
    for s in b:
        out.append(Sentence(len(out), s.tokens, s.raw_text, s.label))
    return Dataset(tuple(out), max(a.num_classes, b.num_classes), a.role)


def encode_dataset(params: dict, vocab: Vocab, data: Dataset) -> np.ndarray:
    return M.encode_batch(params, [vocab.ids(s.tokens) for s in data])


# -- gradient matching --------------------------------------------------------


def grad_match_scenarios(ks: Sequence[int], ds: Sequence[int], include_nomask: bool = True) -> list:
    cells = []
    if include_nomask:
        cells += [Scenario(1, d, False) for d in ds]
    cells += [Scenario(k, d, True) for k in ks for d in ds]
    return cells


def grad_match_grid(scenarios, cfg: AttackConfig, dims: VictimDims = VictimDims(), workers: int = 1) -> list:
    return attack_success_rate(scenarios, cfg, dims, workers)


# -- RSS ----------------------------------------------------------------------


@dataclass
class MetricsTable:
    rows: dict  # scheme -> (MetricsRow, n)
    answers: dict  # scheme -> list of (query sentence, answer sentence)
    extra: dict


def rss_experiment(
    params: dict,
    vocab: Vocab,
    corpus: Dataset,
    schemes: Sequence,
    seed: int,
    reference: Optional[Dataset] = None,
    batch_size: int = 32,
) -> MetricsTable:
    """Query the deduplicated ``corpus`` index with hidden copies of its own entries.

    ``reference`` (held-out sentences) feeds the stand-in semantic scorer.
    """
    index = rss_build_index(dedup(corpus), params, vocab)
    metric_vocab = build_vocab(index.sentences)
    semantic = tfidf_scorer(build_vocab(reference)) if reference is not None else None
    labels = [s.label for s in index.sentences]
    rows, answers = {}, {}
    for m, k in schemes:
        name = scheme_name(m, k)
        if m == 0 and k == 1:
            queries = index.vectors
        else:
            stream = RngStream(seed, ["rss", str(m), k])
            queries = hidden_queries(index.vectors, labels, corpus.num_classes, m, k, stream, batch_size)
        found = answer_queries(index, queries)
        pairs = list(zip(index.sentences, found))
        rows[name] = aggregate([score_pair(q, a, metric_vocab, semantic) for q, a in pairs])
        answers[name] = pairs
    rows["rand"] = random_baseline(
        index.sentences, index.sentences, RngStream(seed, ["rss", "rand"]), metric_vocab, semantic
    )
    return MetricsTable(rows, answers, {"index_size": len(index)})


# -- RepRecon -----------------------------------------------------------------


def reprecon_experiment(
    params: dict,
    vocab: Vocab,
    train: Dataset,
    dev: Dataset,
    schemes: Sequence,
    seed: int,
    recon: ReconConfig,
    n_queries: int = 500,
    batch_size: int = 32,
) -> MetricsTable:
    """Train one reconstruction net per scheme on train-split pairs, attack dev queries.

    The search index holds the deduplicated train and dev sentences.
    """
    index = rss_build_index(dedup(concat(train, dev)), params, vocab)
    metric_vocab = build_vocab(index.sentences)
    queries = dev.subset(range(min(n_queries, len(dev))))
    e_train = encode_dataset(params, vocab, train)
    e_dev = encode_dataset(params, vocab, queries)
    rows, answers, losses = {}, {}, {}
    for m, k in schemes:
        name = scheme_name(m, k)
        tag = [str(m), k]
        x_train = hidden_queries(
            e_train, train.labels, train.num_classes, m, k, RngStream(seed, ["reprecon", "train", *tag]), batch_size
        )
        x_dev = hidden_queries(
            e_dev, queries.labels, train.num_classes, m, k, RngStream(seed, ["reprecon", "dev", *tag]), batch_size
        )
        cfg = ReconConfig(recon.hidden, recon.epochs, recon.batch_size, recon.lr, recon.final_lr_fraction, seed)
        net = reprecon_train(x_train, e_train, cfg)
        found = reprecon_attack_batch(net, x_dev, index)
        pairs = list(zip(queries.sentences, found))
        rows[name] = aggregate([score_pair(q, a, metric_vocab) for q, a in pairs])
        answers[name] = pairs
        losses[name] = list(net.losses)
    rows["rand"] = random_baseline(
        index.sentences, queries.sentences, RngStream(seed, ["reprecon", "rand"]), metric_vocab
    )
    return MetricsTable(rows, answers, {"index_size": len(index), "losses": losses})


# -- subset sum ---------------------------------------------------------------


def subset_sum_experiment(ns: Sequence[int], ks: Sequence[int], d: int, instances: int, seed: int) -> list:
    """One record per planted instance, in (N, k, instance) order."""
    records = []
    for n in ns:
        for k in ks:
            if k > n:
                continue
            for i in range(instances):
                vecs, target, secret = plant_instance(n, d, k, RngStream(seed, ["subset-sum", n, k, i]))
                res = subset_sum_recover(vecs, target, k)
                residual = float(np.max(np.abs(vecs[list(res.indices)].sum(axis=0) - target))) if res.found else None
                records.append(
                    {
                        "n": n,
                        "k": k,
                        "instance": i,
                        "secret": list(secret),
                        "found": list(res.indices) if res.found else None,
                        "recovered": res.found and tuple(res.indices) == tuple(secret),
                        "candidates": res.candidates,
                        "total": res.total,
                        "residual": residual,
                    }
                )
    return records
