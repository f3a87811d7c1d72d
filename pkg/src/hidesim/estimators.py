"""scikit-learn style wrappers around the simulator.

* ``TextHideEncryptor``: transformer from plain to hidden representations.
* ``TextHideClassifier``: federated TextHide training on raw sentences.
* ``RepReconRegressor``: the reconstruction net as a regressor.
* ``RssSearcher``: nearest-neighbour lookup by cosine similarity.

Hyperparameters live in ``__init__`` untouched, fitted state ends in ``_``,
so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import model as M
from .attacks.reprecon import ReconConfig, reprecon_train
from .attacks.rss import build_index_from_vectors, rss_query_batch
from .corpus import Dataset, Sentence, build_vocab, tokenize
from .fedsim import TrainSettings, run_training
from .numerics import ConfigurationError, RngStream
from .texthide import FRESH, gen_mask_pool, hide_batch_intra


def _check_features(est, X):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != est.n_features_in_:
        raise ValueError(f"X has {X.shape[1]} features, but {type(est).__name__} was fitted with {est.n_features_in_}")
    return X


class TextHideEncryptor(TransformerMixin, BaseEstimator):
    """Intra-dataset (m, k)-TextHide on precomputed representations.

    ``fit`` draws the mask pool. ``transform`` mixes rows in shuffled batches
    of ``batch_size``; row i of the output hides row i of the input. With
    ``y`` passed to :meth:`hide`, the mixed soft labels come back too.
    """

    def __init__(self, m=256, k=4, batch_size=32, n_classes=2, random_state=0):
        self.m = m
        self.k = k
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.k < 1 or self.batch_size < 1:
            raise ConfigurationError("k and batch_size must be >= 1")
        self.n_features_in_ = X.shape[1]
        m = FRESH if self.m in ("inf", float("inf")) else int(self.m)
        self.pool_ = gen_mask_pool(m, X.shape[1], RngStream(self.random_state, ["encryptor", "pool"]))
        return self

    def hide(self, X, y=None):
        check_is_fitted(self, "pool_")
        X = _check_features(self, X)
        n = len(X)
        targets = M.one_hot(np.zeros(n, dtype=int) if y is None else np.asarray(y), self.n_classes)
        stream = RngStream(self.random_state, ["encryptor", "transform"])
        order = stream.child("order").permutation(n)
        reps, labels = np.empty_like(X), np.empty_like(targets)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            hb = hide_batch_intra(X[idx], targets[idx], self.pool_, self.k, stream.child("batch", start))
            reps[idx], labels[idx] = hb.reps, hb.labels
        return reps, labels

    def transform(self, X):
        return self.hide(X)[0]


class TextHideClassifier(ClassifierMixin, BaseEstimator):
    """Federated training with per-client TextHide; ``X`` is a sequence of raw sentences.

    ``m=0, k=1`` is the unprotected baseline.
    """

    def __init__(
        self,
        m=256,
        k=4,
        clients=2,
        rounds=500,
        batch_size=32,
        lr=0.003,
        optimizer="adam",
        embed_dim=32,
        rep_dim=64,
        hidden=(64, 64, 64),
        random_state=0,
        workers=1,
    ):
        self.m = m
        self.k = k
        self.clients = clients
        self.rounds = rounds
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.embed_dim = embed_dim
        self.rep_dim = rep_dim
        self.hidden = hidden
        self.random_state = random_state
        self.workers = workers

    @staticmethod
    def _sentences(X, y=None):
        if isinstance(X, str) or not hasattr(X, "__len__"):
            raise ValueError("X must be a sequence of sentences")
        out = []
        for i, text in enumerate(X):
            if not isinstance(text, str):
                raise ValueError(f"X[{i}] is not a string")
            out.append(Sentence(i, tuple(tokenize(text)), text, None if y is None else int(y[i])))
        return out

    def fit(self, X, y):
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = Dataset(tuple(self._sentences(X, y_idx)), len(self.classes_))
        self.vocab_ = build_vocab(data, with_unk=True)
        self.model_config_ = M.ModelConfig(
            len(self.vocab_), self.embed_dim, self.rep_dim, tuple(self.hidden), len(self.classes_)
        )
        settings = TrainSettings(
            seed=self.random_state,
            clients=self.clients,
            rounds=self.rounds,
            batch_size=self.batch_size,
            lr=self.lr,
            optimizer=self.optimizer,
            m=self.m,
            k=self.k,
            eval_every=0,
            workers=self.workers,
        )
        self.params_, self.round_logs_ = run_training(settings, self.model_config_, data, None, self.vocab_)
        return self

    def transform(self, X):
        """Plain sentence representations from the trained encoder."""
        check_is_fitted(self, "params_")
        return M.encode_batch(self.params_, [self.vocab_.ids(s.tokens) for s in self._sentences(X)])

    def predict_proba(self, X):
        return M.softmax(M.logits(self.params_, self.transform(X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class RepReconRegressor(RegressorMixin, BaseEstimator):
    """MLP d -> h -> h -> d mapping hidden representations back to raw ones."""

    def __init__(self, hidden=128, epochs=20, batch_size=8, lr=3e-3, final_lr_fraction=0.1, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.final_lr_fraction = final_lr_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        if y.ndim != 2 or y.shape != X.shape:
            raise ValueError("targets must be raw representations with the same shape as X")
        self.n_features_in_ = X.shape[1]
        cfg = ReconConfig(self.hidden, self.epochs, self.batch_size, self.lr, self.final_lr_fraction, self.random_state)
        self.net_ = reprecon_train(X, y, cfg)
        self.loss_curve_ = list(self.net_.losses)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return self.net_(_check_features(self, X))


class RssSearcher(BaseEstimator):
    """Exhaustive cosine search. ``fit(X, y)`` indexes rows of ``X`` under labels ``y``.

    ``predict`` returns the label of the most similar indexed row; ties go to the
    row fitted first.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.labels_ = np.arange(len(X)) if y is None else np.asarray(y)
        if len(self.labels_) != len(X):
            raise ValueError("X and y have different lengths")
        placeholders = [Sentence(i, (), "", None) for i in range(len(X))]
        self.index_ = build_index_from_vectors(placeholders, X)
        return self

    def search(self, X):
        """Positions of the best matches and their cosine similarities."""
        check_is_fitted(self, "index_")
        return rss_query_batch(self.index_, _check_features(self, X))

    def predict(self, X):
        best, _ = self.search(X)
        return self.labels_[best]
