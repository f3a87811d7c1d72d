import time

import numpy as np
import pytest

from hidesim import model as M
from hidesim.corpus import build_vocab, gen_synthetic
from hidesim.experiments import split_stratified
from hidesim.numerics import RngStream


@pytest.fixture(scope="session")
def small_corpus():
    """300 train / 100 test sentences, 2 classes."""
    full = gen_synthetic(2, 200, 120, 5, (4, 9), seed=11)
    train, test = split_stratified(full, 150)
    return train, test, build_vocab(train, with_unk=True)


@pytest.fixture
def tiny_params():
    cfg = M.ModelConfig(20, 5, 6, (7,), 3)
    return cfg, M.init_params(cfg, RngStream(5, ["tiny"]))


def random_token_batch(rng: np.random.Generator, b: int, vocab: int, max_len: int = 5):
    return [rng.integers(0, vocab, size=rng.integers(1, max_len + 1)).tolist() for _ in range(b)]


@pytest.fixture(scope="session")
def default_task():
    """The default synthetic 2-class task: 1000 train / 500 test."""
    full = gen_synthetic(2, 750, 200, 5, (5, 12), seed=0)
    train, test = split_stratified(full, 500)
    return train, test, build_vocab(train, with_unk=True)


@pytest.fixture(scope="session")
def desk_baseline(default_task):
    """Baseline encoder trained for the default 500 rounds; returns (params, seconds)."""
    from hidesim.fedsim import TrainSettings, run_training

    train, test, vocab = default_task
    t0 = time.perf_counter()
    params, _ = run_training(
        TrainSettings(lr=0.003, rounds=500, eval_every=0), M.ModelConfig(len(vocab)), train, test, vocab
    )
    return params, time.perf_counter() - t0
