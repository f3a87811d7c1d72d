import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.feature_extraction.text import TfidfVectorizer

from hidesim.corpus import Sentence, build_vocab, tokenize
from hidesim.metrics import (
    REPORT_HEADERS,
    MetricsError,
    MetricsRow,
    aggregate,
    identity,
    jaccard,
    label_agree,
    metrics_csv_rows,
    random_baseline,
    score_pair,
    tfidf_scorer,
    tfidf_sim,
)
from hidesim.numerics import RngStream


def sent(i, text, label=0):
    return Sentence(i, tuple(tokenize(text)), text, label)


DOCS = ["the cat sat", "the dog sat", "a bird flew over the house", "cats and dogs", "the cat sat on the mat"]
CORPUS = [sent(i, t, i % 2) for i, t in enumerate(DOCS)]
VOCAB = build_vocab(CORPUS)


def test_jaccard_cat_dog():
    assert jaccard(CORPUS[0], CORPUS[1]) == 0.5


def test_identity_is_token_equality():
    assert identity(sent(0, "The cat sat."), sent(1, "the cat sat")) == 1
    assert identity(CORPUS[0], CORPUS[1]) == 0
    assert identity(sent(0, "cat sat"), sent(1, "sat cat")) == 0


def test_jaccard_empty_pair():
    assert jaccard(Sentence(0, (), ""), Sentence(1, (), "")) == 1.0
    assert jaccard(Sentence(0, (), ""), CORPUS[0]) == 0.0


def test_tfidf_matches_sklearn():
    vec = TfidfVectorizer(smooth_idf=True, norm="l2", tokenizer=tokenize, lowercase=False, token_pattern=None)
    mat = vec.fit_transform(DOCS).toarray()
    want = mat @ mat.T
    for i, a in enumerate(CORPUS):
        for j, b in enumerate(CORPUS):
            assert tfidf_sim(a, b, VOCAB) == pytest.approx(min(1.0, want[i, j]), abs=1e-12)


def test_label_agreement():
    assert label_agree(sent(0, "x", 1), sent(1, "y", 1)) == 1
    assert label_agree(sent(0, "x", 1), sent(1, "y", 0)) == 0
    with pytest.raises(MetricsError):
        label_agree(sent(0, "x", None), sent(1, "y", 0))


def test_identity_pins_the_other_metrics():
    a, b = sent(0, "the cat sat", 1), sent(9, "the cat sat", 1)
    row = score_pair(a, b, VOCAB)
    assert row == MetricsRow(1.0, 1.0, 1.0, 1.0, 1.0)


def test_semantic_scorer_uses_reference_vocab():
    ref = build_vocab([sent(0, "the cat"), sent(1, "the dog"), sent(2, "a cat")])
    semantic = tfidf_scorer(ref)
    row = score_pair(CORPUS[0], CORPUS[1], VOCAB, semantic)
    assert row.semantic_sim == pytest.approx(tfidf_sim(CORPUS[0], CORPUS[1], ref))
    assert row.semantic_sim != row.tfidf_sim


words = st.lists(st.sampled_from(["the", "cat", "dog", "sat", "mat", "a", "on"]), min_size=0, max_size=6)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_metrics_symmetric_and_bounded(x, y):
    a, b = Sentence(0, tuple(x), " ".join(x), 0), Sentence(1, tuple(y), " ".join(y), 1)
    for f in (identity, jaccard, lambda p, q: tfidf_sim(p, q, VOCAB)):
        assert f(a, b) == pytest.approx(f(b, a))
        assert 0.0 <= f(a, b) <= 1.0
    if identity(a, b):
        assert jaccard(a, b) == 1.0


def test_aggregate_means():
    rows = [MetricsRow(1, 1, 1, 1, 1), MetricsRow(0, 0.5, 0.25, 0, 0)]
    mean, n = aggregate(rows)
    assert n == 2 and mean == MetricsRow(0.5, 0.75, 0.625, 0.5, 0.5)
    with pytest.raises(MetricsError):
        aggregate([])


def test_random_baseline_identity_near_one_over_n():
    n = 50
    index = [sent(i, f"tok{i} common", i % 2) for i in range(n)]
    queries = index * 40
    vocab = build_vocab(index)
    row, count = random_baseline(index, queries, RngStream(3, ["rand"]), vocab)
    assert count == len(queries)
    assert abs(row.identity - 1 / n) < 0.01
    assert abs(row.label_agree - 0.5) < 0.05
    again, _ = random_baseline(index, queries, RngStream(3, ["rand"]), vocab)
    assert again == row
    with pytest.raises(MetricsError):
        random_baseline([], queries, RngStream(0, []), vocab)


def test_csv_columns():
    rows = metrics_csv_rows(
        {"baseline": (MetricsRow(1, 1, 1, 1, 1), 3), "rand": (MetricsRow(0, 0.1, 0.2, 0.5, 0.3), 3)}
    )
    assert rows[0] == ("scheme",) + REPORT_HEADERS + ("n_queries",)
    assert rows[0][1:6] == ("identity", "jc", "tfidf_sim", "label", "semantic_sim")
    assert rows[1] == ("baseline", "1.000000", "1.000000", "1.000000", "1.000000", "1.000000", "3")
    assert [r[0] for r in rows[1:]] == ["baseline", "rand"]
    assert all(len(r) == 7 for r in rows)
    assert np.isclose(float(rows[2][2]), 0.1)
