from itertools import combinations
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hidesim.attacks.gradmatch as G
from hidesim import model as M
from hidesim.attacks.gradmatch import (
    AttackConfig,
    Scenario,
    VictimDims,
    attack_success_rate,
    example_gradients,
    grad_distance,
    grad_distance_and_grad,
    grad_match_attack,
    make_victim,
    run_trial,
)
from hidesim.attacks.reprecon import ReconConfig, ReconNet, reprecon_attack, reprecon_attack_batch, reprecon_train
from hidesim.attacks.rss import (
    DegenerateQueryError,
    build_index_from_vectors,
    hidden_queries,
    rss_build_index,
    rss_query,
    rss_query_batch,
    self_identity,
)
from hidesim.attacks.subset_sum import MATCH_TOL, plant_instance, subset_sum_recover
from hidesim.corpus import Dataset, Sentence, dedup
from hidesim.numerics import ConfigurationError, RngStream, grad_check
from hidesim.texthide import MixKey

# -- gradient matching --------------------------------------------------------


def test_attack_config_validation():
    with pytest.raises(ConfigurationError):
        AttackConfig(threshold=0.0)
    with pytest.raises(ConfigurationError):
        AttackConfig(iterations=0)


def test_victim_gradients_match_the_model_pipeline():
    dims = VictimDims(d_in=6, d=5, hidden=(4,), num_classes=3)
    v = make_victim(dims, 1, True, RngStream(1, ["v"]))
    key = MixKey(np.array([[0]]), np.array([[1.0]]), v.sigma0[None, :], np.array([0]))
    loss, grads, _ = M.backward_from_pooled(v.params, v.x0[None, :], v.target[None, :], key)
    loss2, grads2 = example_gradients(v.params, v.x0[None, :], np.array([1.0]), v.sigma0, v.target)
    assert loss == pytest.approx(loss2, abs=1e-14)
    for k in grads:
        assert np.allclose(grads[k], grads2[k], atol=1e-14)


@pytest.mark.parametrize("learn_label", [False, True])
@pytest.mark.parametrize("hidden", [(), (5,)])
def test_attack_gradient_matches_finite_differences(learn_label, hidden):
    dims = VictimDims(d_in=5, d=4, hidden=hidden, num_classes=3)
    v = make_victim(dims, 2, True, RngStream(3, ["fd", int(learn_label), len(hidden)]))
    rng = np.random.default_rng(0)
    state = {"x": rng.normal(size=5), "sigma": rng.normal(size=4), "y": rng.normal(size=3)}
    if not learn_label:
        state["y"] = np.array([0.2, 0.5, 0.3])

    def loss_fn(s):
        D, dx, ds, dy = grad_distance_and_grad(v.params, s["x"], s["sigma"], s["y"], v.grads, learn_label)
        return D, {"x": dx, "sigma": ds, "y": dy if learn_label else np.zeros(3)}

    if not learn_label:
        state_fd = {"x": state["x"], "sigma": state["sigma"]}

        def loss_fn2(s):
            D, g = loss_fn({**s, "y": state["y"]})
            return D, {"x": g["x"], "sigma": g["sigma"]}

        assert grad_check(loss_fn2, state_fd, 1e-6) <= 1e-3
    else:
        assert grad_check(loss_fn, state, 1e-6) <= 1e-3


def test_true_triple_is_fixed_point():
    dims = VictimDims(d_in=8, d=4)
    v = make_victim(dims, 1, True, RngStream(0, ["fixed"]))
    D, dx, ds, _ = grad_distance_and_grad(v.params, v.x0, v.sigma0, v.target, v.grads, False)
    assert D == 0.0 and not dx.any() and not ds.any()
    out = grad_match_attack(
        v.grads,
        v.params,
        dims,
        AttackConfig(iterations=50),
        RngStream(0, ["a"]),
        true_x=v.x0,
        true_sigma=v.sigma0,
        label=v.target,
        init=(v.x0, v.sigma0, v.target),
    )
    assert out.grad_dist[0] == 0.0
    assert out.success and out.final_input_mse == 0.0 and out.final_mask_mse == 0.0
    assert np.array_equal(out.x, v.x0)


def test_unmasked_attack_reduces_gradient_distance():
    cfg = AttackConfig(iterations=300, trials=1, log_every=50)
    _, out = run_trial(Scenario(1, 4, False), 0, cfg, VictimDims())
    assert out.iterations_logged[0] == 0 and out.iterations_logged[-1] <= 300
    assert len(out.grad_dist) == len(out.input_mse) == len(out.mask_mse) == len(out.iterations_logged)
    assert out.grad_dist[-1] < out.grad_dist[0]
    assert out.success == (out.final_input_mse <= cfg.threshold)


def test_grad_distance_is_squared_norm():
    g = {"a": np.array([1.0, 2.0]), "b": np.array([[0.5]])}
    h = {"a": np.array([0.0, 2.0]), "b": np.array([[-0.5]])}
    assert grad_distance(g, h) == 2.0


def test_nonfinite_attack_loss_is_a_recorded_failure(monkeypatch):
    monkeypatch.setattr(G, "grad_distance_and_grad", lambda *a, **k: (float("nan"), None, None, None))
    _, out = run_trial(Scenario(1, 4, False), 0, AttackConfig(iterations=5), VictimDims())
    assert not out.success and "non-finite" in out.error


def test_success_rate_rows_are_worker_independent():
    cfg = AttackConfig(iterations=40, trials=3, log_every=10)
    cells = [Scenario(1, 4, False), Scenario(2, 4, True)]
    a = attack_success_rate(cells, cfg, VictimDims(), workers=1)
    b = attack_success_rate(cells, cfg, VictimDims(), workers=4)
    assert [r["scenario"] for r in a] == cells
    for ra, rb in zip(a, b):
        assert ra["success_rate"] == rb["success_rate"]
        assert [o.final_input_mse for o in ra["outcomes"]] == [o.final_input_mse for o in rb["outcomes"]]
        assert len(ra["outcomes"]) == 3


# -- RSS ----------------------------------------------------------------------


def sentences(n, label=0):
    return [Sentence(i, (f"w{i}",), f"w{i}", label) for i in range(n)]


def test_self_queries_retrieve_themselves(small_corpus):
    train, _, vocab = small_corpus
    params = M.init_params(M.ModelConfig(len(vocab), 8, 12, (8,), 2), RngStream(0, ["m"]))
    ds = dedup(train)
    index = rss_build_index(ds, params, vocab)
    assert len(index) == len(ds)
    assert index.ids.tolist() == sorted(s.id for s in ds)
    assert self_identity(index) == 1.0
    again = rss_build_index(ds, params, vocab)
    assert np.array_equal(index.vectors, again.vectors)
    hit, sim = rss_query(index, index.vectors[5])
    assert hit.id == index.ids[5] and sim == pytest.approx(1.0)


def test_minus_e_i_on_two_entry_index():
    vecs = np.array([[1.0, 0.0], [-0.6, 0.8]])
    index = build_index_from_vectors(sentences(2), vecs)
    assert rss_query(index, -vecs[0])[0].id == 1


def test_ties_go_to_lowest_id():
    s = [Sentence(7, ("a",), "a", 0), Sentence(3, ("b",), "b", 0)]
    index = build_index_from_vectors(s, np.array([[1.0, 0.0], [2.0, 0.0]]))
    assert rss_query(index, [3.0, 0.0])[0].id == 3


def test_degenerate_query():
    index = build_index_from_vectors(sentences(2), np.eye(2))
    with pytest.raises(DegenerateQueryError, match="degenerate query"):
        rss_query(index, [0.0, 0.0])
    with pytest.raises(ConfigurationError):
        rss_query(index, [1.0, 0.0, 0.0])


def test_tiny_query_is_not_degenerate():
    index = build_index_from_vectors(sentences(2), np.array([[1.0, 0.0], [0.0, 1.0]]))
    hit, sim = rss_query(index, [0.0, 3e-170])
    assert hit.id == 1 and sim == 1.0


def test_index_rejects_duplicates_and_empty(small_corpus):
    train, _, vocab = small_corpus
    params = M.init_params(M.ModelConfig(len(vocab), 4, 4, (), 2), RngStream(0, ["m"]))
    dup = Dataset((train[0], Sentence(999, train[0].tokens, train[0].raw_text, train[0].label)), 2)
    with pytest.raises(ConfigurationError):
        rss_build_index(dup, params, vocab)
    with pytest.raises(ConfigurationError):
        rss_build_index(Dataset((), 2), params, vocab)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_query_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    index = build_index_from_vectors(sentences(20), rng.normal(size=(20, 6)))
    q = rng.normal(size=6)
    assert rss_query_batch(index, q)[0][0] == rss_query_batch(index, scale * q)[0][0]


def test_hidden_queries_keep_row_order():
    rng = np.random.default_rng(0)
    reps = rng.normal(size=(50, 4))
    same = hidden_queries(reps, rng.integers(0, 2, 50), 2, 0, 1, RngStream(0, ["q"]), batch_size=8)
    assert np.array_equal(same, reps)


# -- RepRecon -----------------------------------------------------------------


def identity_net(d):
    eye = np.eye(d)
    return ReconNet(
        {
            "w0": np.hstack([eye, -eye]),
            "b0": np.zeros(2 * d),
            "w1": np.eye(2 * d),
            "b1": np.zeros(2 * d),
            "w2": np.vstack([eye, -eye]),
            "b2": np.zeros(d),
        }
    )


def test_identity_net_self_retrieval():
    rng = np.random.default_rng(1)
    vecs = rng.normal(size=(30, 5))
    index = build_index_from_vectors(sentences(30), vecs)
    net = identity_net(5)
    assert np.allclose(net(vecs), vecs, atol=1e-15)
    assert reprecon_attack(net, vecs[4], index)[0].id == 4
    assert [s.id for s in reprecon_attack_batch(net, vecs, index)] == list(range(30))


def test_zero_output_net_is_degenerate():
    net = identity_net(3)
    net.params["w2"][:] = 0.0
    index = build_index_from_vectors(sentences(3), np.eye(3))
    with pytest.raises(DegenerateQueryError):
        reprecon_attack(net, np.ones(3), index)


def test_reprecon_rejects_bad_pairs():
    with pytest.raises(ConfigurationError):
        reprecon_train(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ConfigurationError):
        reprecon_train(np.zeros((5, 4)), np.zeros((5, 3)))


@pytest.fixture(scope="module")
def trained_reps(small_corpus):
    from hidesim.fedsim import TrainSettings, run_training

    train, test, vocab = small_corpus
    cfg = M.ModelConfig(len(vocab))
    params, _ = run_training(TrainSettings(rounds=150, lr=0.003, eval_every=0), cfg, train, test, vocab)
    enc = M.encode_batch(params, [vocab.ids(s.tokens) for s in train])
    return enc, train.labels


def test_reprecon_loss_goes_down(trained_reps):
    enc, labels = trained_reps
    hidden = hidden_queries(enc, labels, 2, 256, 4, RngStream(0, ["rr"]))
    net = reprecon_train(hidden, enc, ReconConfig(epochs=8))
    assert len(net.losses) == 8
    assert net.final_loss < net.losses[0]


def test_reprecon_identity_scheme_reaches_near_zero_loss(default_task, desk_baseline):
    train, _, vocab = default_task
    unique = dedup(train)
    enc = M.encode_batch(desk_baseline[0], [vocab.ids(s.tokens) for s in unique])
    net = reprecon_train(enc, enc, ReconConfig())
    index = build_index_from_vectors(unique.sentences, enc)
    assert [s.id for s in reprecon_attack_batch(net, enc, index)] == [s.id for s in unique]
    assert net.final_loss < 1e-3


# -- subset sum ---------------------------------------------------------------


def test_planted_pair_recovered():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(10, 6))
    res = subset_sum_recover(vecs, vecs[3] + vecs[7], 2)
    assert res.indices == (3, 7)
    assert res.candidates == res.total == comb(10, 2)


def test_candidate_counts_grow_combinatorially():
    counts = {}
    for n in (16, 64):
        vecs, target, secret = plant_instance(n, 4, 3, RngStream(1, ["ss", n]))
        res = subset_sum_recover(vecs, target, 3)
        assert res.indices == secret
        counts[n] = res.candidates
    assert counts[64] / counts[16] == comb(64, 3) / comb(16, 3)


def test_early_exit_stops_at_first_match():
    vecs, target, secret = plant_instance(12, 3, 2, RngStream(2, ["ss"]))
    res = subset_sum_recover(vecs, target, 2, early_exit=True)
    position = list(combinations(range(12), 2)).index(secret) + 1
    assert res.indices == secret and res.candidates == position


def test_no_solution():
    vecs = np.eye(4)
    res = subset_sum_recover(vecs, np.full(4, 5.0), 2)
    assert not res.found and res.indices is None and res.candidates == 6


def test_subset_sum_argument_checks():
    with pytest.raises(ConfigurationError):
        subset_sum_recover(np.eye(3), np.zeros(3), 4)
    with pytest.raises(ConfigurationError):
        subset_sum_recover(np.eye(3), np.zeros(2), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 14), st.integers(1, 3), st.integers(0, 10**6))
def test_planted_instances_always_recovered(n, k, seed):
    k = min(k, n)
    vecs, target, secret = plant_instance(n, 5, k, RngStream(seed, ["prop"]))
    res = subset_sum_recover(vecs, target, k)
    assert res.found and res.indices == secret
    assert np.max(np.abs(vecs[list(res.indices)].sum(axis=0) - target)) <= MATCH_TOL
