import json

import numpy as np
import pytest

import hidesim.fedsim as F
from hidesim import model as M
from hidesim.corpus import Dataset, Sentence, build_vocab, gen_synthetic
from hidesim.fedsim import (
    Gradients,
    ServerState,
    TrainSettings,
    TrainingError,
    client_update,
    evaluate,
    make_clients,
    run_training,
    server_round,
)
from hidesim.numerics import ConfigurationError, OptState, RngStream


def model_cfg(vocab, hidden=(16,)):
    return M.ModelConfig(len(vocab), 8, 12, hidden, 2)


def init(cfg, seed=0):
    return M.init_params(cfg, RngStream(seed, ["model", "init"]))


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        TrainSettings(m=1, clients=2).validate()
    with pytest.raises(ConfigurationError):
        TrainSettings(optimizer="rmsprop").validate()
    TrainSettings(m="inf", clients=4).validate()
    assert TrainSettings(m=0, k=1).scheme == "baseline"
    assert TrainSettings(m=16, k=2, variant="inter").scheme == "TextHide_inter"


def test_client_gradients_congruent(small_corpus):
    train, _, vocab = small_corpus
    cfg = model_cfg(vocab)
    s = TrainSettings(m=16, k=2, batch_size=8)
    clients = make_clients(train, vocab, s, cfg.rep_dim)
    params = init(cfg)
    g = client_update(clients[0], params, s, 0)
    assert list(g.arrays) == list(params)
    assert all(g.arrays[k].shape == params[k].shape for k in params)


def test_identity_scheme_client_gradient_equals_plain(small_corpus):
    train, _, vocab = small_corpus
    cfg = model_cfg(vocab)
    params = init(cfg)
    hidden = TrainSettings(m=0, k=1, batch_size=8)
    plain = TrainSettings(m=0, k=1, batch_size=8, bypass_texthide=True)
    ch = make_clients(train, vocab, hidden, cfg.rep_dim)[1]
    cp = make_clients(train, vocab, plain, cfg.rep_dim)[1]
    for t in (0, 3):
        a, b = client_update(ch, params, hidden, t), client_update(cp, params, plain, t)
        assert a.loss == b.loss
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in params)


def test_identical_clients_identical_gradients(small_corpus):
    train, _, vocab = small_corpus
    cfg = model_cfg(vocab)
    s = TrainSettings(m=16, k=3, batch_size=8)
    c0 = make_clients(train, vocab, s, cfg.rep_dim)[0]
    twin = F.ClientState(c0.cid, c0.data, c0.pool, c0.stream, c0.token_ids, c0.targets, c0.rounds_per_epoch)
    params = init(cfg)
    a, b = client_update(c0, params, s, 4), client_update(twin, params, s, 4)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in params)


def test_batch_larger_than_client_data(small_corpus):
    train, _, vocab = small_corpus
    cfg = model_cfg(vocab)
    s = TrainSettings(batch_size=1000)
    with pytest.raises(ConfigurationError):
        client_update(make_clients(train, vocab, s, cfg.rep_dim)[0], init(cfg), s, 0)


def test_client_pools_are_disjoint(small_corpus):
    train, _, vocab = small_corpus
    clients = make_clients(train, vocab, TrainSettings(m=10, clients=3), 12)
    assert sum(c.pool.m for c in clients) == 10
    rows = np.vstack([c.pool.masks for c in clients])
    full = F.gen_mask_pool(10, 12, RngStream(0).child("mask-pool"))
    assert np.array_equal(rows, full.masks)


def grads_like(params, value):
    return {k: np.full_like(v, value) for k, v in params.items()}


def test_server_sgd_single_client():
    params = {"w": np.array([1.0, -2.0])}
    server = ServerState({"w": params["w"].copy()}, lr=0.5, rounds=1, optimizer="sgd", n_clients=1)
    server_round(server, [Gradients({"w": np.array([0.2, 0.4])}, 0.0)])
    assert server.params["w"].tolist() == [1.0 - 0.5 * 0.2, -2.0 - 0.5 * 0.4]
    assert server.t == 1


def test_server_averaging_identical_and_linear():
    p = {"w": np.array([0.3, 0.7])}
    g1, g2, g3 = (np.array([1.0, 2.0]), np.array([-3.0, 0.5]), np.array([0.25, 4.0]))
    for opt in ("sgd", "adam"):
        s3 = ServerState({"w": p["w"].copy()}, 0.1, 1, opt, OptState(lr=0.1), n_clients=3)
        server_round(s3, [{"w": g1}, {"w": g2}, {"w": g3}])
        s1 = ServerState({"w": p["w"].copy()}, 0.1, 1, opt, OptState(lr=0.1), n_clients=1)
        server_round(s1, [{"w": (g1 + g2 + g3) / 3}])
        assert np.allclose(s3.params["w"], s1.params["w"], rtol=0, atol=1e-15)
        same = ServerState({"w": p["w"].copy()}, 0.1, 1, opt, OptState(lr=0.1), n_clients=2)
        server_round(same, [{"w": g1}, {"w": g1}])
        one = ServerState({"w": p["w"].copy()}, 0.1, 1, opt, OptState(lr=0.1), n_clients=1)
        server_round(one, [{"w": g1}])
        assert np.array_equal(same.params["w"], one.params["w"])


def test_server_zero_gradients_and_count_check():
    p = {"w": np.array([0.3, 0.7])}
    s = ServerState({"w": p["w"].copy()}, 0.1, 1, "sgd", n_clients=2)
    server_round(s, [grads_like(p, 0.0), grads_like(p, 0.0)])
    assert np.array_equal(s.params["w"], p["w"])
    with pytest.raises(ConfigurationError):
        server_round(s, [grads_like(p, 0.0)])


def test_zero_rounds_returns_initial(small_corpus):
    train, test, vocab = small_corpus
    cfg = model_cfg(vocab)
    params, logs = run_training(TrainSettings(rounds=0, m=16, k=2), cfg, train, test, vocab)
    assert logs == []
    assert all(np.array_equal(params[k], init(cfg)[k]) for k in params)


def test_loss_decreases(small_corpus):
    train, test, vocab = small_corpus
    cfg = model_cfg(vocab)
    s = TrainSettings(rounds=200, m=16, k=2, batch_size=16, lr=0.003, eval_every=0)
    _, logs = run_training(s, cfg, train, test, vocab)
    assert len(logs) == 200
    assert np.mean([log.loss for log in logs[-20:]]) < np.mean([log.loss for log in logs[:20]])


def test_inter_variant_trains_and_needs_public(small_corpus):
    train, test, vocab = small_corpus
    cfg = model_cfg(vocab)
    s = TrainSettings(rounds=30, m=8, k=4, variant="inter", batch_size=8, eval_every=0)
    with pytest.raises(ConfigurationError):
        run_training(s, cfg, train, test, vocab)
    _, logs = run_training(s, cfg, train, test, vocab, public=test.as_public())
    assert len(logs) == 30 and all(np.isfinite(log.loss) for log in logs)


def test_nonfinite_loss_names_round_and_client(small_corpus, monkeypatch):
    train, test, vocab = small_corpus
    cfg = model_cfg(vocab)
    real = F.client_update

    def poisoned(client, params, settings, t, public_reps=None):
        g = real(client, params, settings, t, public_reps)
        return Gradients(g.arrays, float("nan")) if (t == 2 and client.cid == 1) else g

    monkeypatch.setattr(F, "client_update", poisoned)
    with pytest.raises(TrainingError, match="round 3 from client 1"):
        run_training(TrainSettings(rounds=5, batch_size=8), cfg, train, test, vocab)


def test_server_traffic_carries_no_key_material(small_corpus, monkeypatch):
    train, test, vocab = small_corpus
    cfg = model_cfg(vocab)
    keys = []
    real = F.hide_batch_intra

    def spy(*args, **kwargs):
        hb = real(*args, **kwargs)
        keys.append(hb.key)
        return hb

    monkeypatch.setattr(F, "hide_batch_intra", spy)
    wires = []
    run_training(
        TrainSettings(rounds=3, m=16, k=3, batch_size=8),
        cfg,
        train,
        test,
        vocab,
        round_hook=lambda t, ups: wires.extend(json.dumps(u.to_wire()) for u in ups),
    )
    assert keys and wires
    for wire in wires:
        msg = json.loads(wire)
        assert set(msg) == {"loss", "grads"}
        assert set(msg["grads"]) == set(M.param_names(cfg))
    blob = "".join(wires)
    for key in keys:
        for value in key.lam[:, 1:].ravel()[:20]:
            assert repr(float(value)) not in blob


def test_evaluate_examples():
    sents = tuple(Sentence(i, (f"t{i % 2}",), f"t{i % 2}", i % 2) for i in range(10))
    data = Dataset(sents, 2)
    vocab = build_vocab(data)
    cfg = M.ModelConfig(len(vocab), 2, 2, (), 2)
    perfect = {
        "embedding": np.array([[1.0, 0.0], [0.0, 1.0]]),
        "proj_w": np.eye(2),
        "proj_b": np.zeros(2),
        "cls_w0": 10 * np.eye(2),
        "cls_b0": np.zeros(2),
    }
    assert evaluate(perfect, data, vocab) == 1.0
    assert evaluate(perfect, Dataset(sents[::-1], 2), vocab) == 1.0
    with pytest.raises(ConfigurationError):
        evaluate(perfect, Dataset((), 2), vocab)
    assert M.param_names(cfg) == list(perfect)


def test_evaluate_random_params_near_chance():
    data = gen_synthetic(2, 500, seed=9)
    vocab = build_vocab(data, with_unk=True)
    accs = [evaluate(init(M.ModelConfig(len(vocab), 8, 12, (16,), 2), s), data, vocab) for s in range(5)]
    assert abs(np.mean(accs) - 0.5) <= 0.05


def run_dir(small_corpus, out, workers=1, rounds=20, hook=None, resume=False, checkpoint_every=5):
    train, test, vocab = small_corpus
    s = TrainSettings(
        rounds=rounds,
        m=16,
        k=2,
        batch_size=8,
        eval_every=5,
        checkpoint_every=checkpoint_every,
        workers=workers,
        clients=3,
    )
    return run_training(
        s, model_cfg(vocab), train, test, vocab, out_dir=out, config_hash="abc", round_hook=hook, resume=resume
    )


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_worker_count_does_not_change_bytes(small_corpus, tmp_path):
    run_dir(small_corpus, tmp_path / "w1", workers=1)
    run_dir(small_corpus, tmp_path / "w8", workers=8)
    assert files(tmp_path / "w1") == files(tmp_path / "w8")


def test_resume_reproduces_uninterrupted_run(small_corpus, tmp_path):
    run_dir(small_corpus, tmp_path / "full")

    class Interrupt(Exception):
        pass

    def hook(t, updates):
        if t == 12:
            raise Interrupt

    with pytest.raises(Interrupt):
        run_dir(small_corpus, tmp_path / "cut", hook=hook)
    assert json.loads((tmp_path / "cut" / "checkpoint.json").read_text())["round"] == 10
    run_dir(small_corpus, tmp_path / "cut", resume=True)
    assert files(tmp_path / "full") == files(tmp_path / "cut")


def test_resume_without_checkpoint(small_corpus, tmp_path):
    with pytest.raises(ConfigurationError):
        run_dir(small_corpus, tmp_path / "empty", resume=True)


def test_round_log_lines(small_corpus, tmp_path):
    run_dir(small_corpus, tmp_path / "r", rounds=6, checkpoint_every=0)
    lines = (tmp_path / "r" / "rounds.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert [r["round"] for r in recs] == list(range(1, 7))
    assert set(recs[0]) == {"round", "loss", "accuracy", "grad_norms"}
    assert recs[4]["accuracy"] is not None and recs[0]["accuracy"] is None
    assert len(recs[0]["grad_norms"]) == 3
    side = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
    assert side["config_hash"] == "abc" and side["round"] == 6
