"""scikit-learn style facade over the interaction-trained trunk.

`InteractionRepresentation` is a Transformer whose fit() runs the
whole pipeline on its own simulator-generated data — the supervision
comes from physical interaction records, not from (X, y) — and whose
transform() maps images to trunk features. `InteractionProbe` adds a
predict() surface: a softmax probe trained on those features.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .dataio import (RunConfig, settings_hash, write_grasp_container,
                     write_identity_container, write_poke_container,
                     write_push_container)
from .errors import ConfigurationError, DomainError
from .evaluate import _standardizer, extract_features
from .network import ParameterStore
from .sim import (gen_grasp_dataset, gen_identity_dataset, gen_poke_dataset,
                  gen_push_dataset)
from .training import BatchIterator, OptimConfig, Rmsprop, train


def check_images(X, input_size: int, name: str = "X") -> np.ndarray:
    """Validate an image batch: [N,3,S,S] or flat [N, 3·S·S], finite."""
    X = np.asarray(X)
    flat_width = 3 * input_size * input_size
    if X.ndim == 2 and X.shape[1] == flat_width:
        X = X.reshape(len(X), 3, input_size, input_size)
    if X.ndim != 4 or X.shape[1:] != (3, input_size, input_size):
        raise ConfigurationError(
            f"{name} must be [N,3,{input_size},{input_size}] images or "
            f"[N,{flat_width}] flat rows; got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ConfigurationError(
            f"y must be a flat label vector of length {n}; got {y.shape}")
    return y


class InteractionRepresentation(TransformerMixin, BaseEstimator):
    """Image-to-feature transformer trained on simulated interactions.

    fit() ignores X and y: the training signal is generated internally
    (grasp/push/poke/identity records at the configured counts), run
    through the two-stage multi-task procedure. transform() then embeds
    images with the chosen trunk tap. All randomness hangs off ``seed``.
    """

    def __init__(self, input_size=32, seed=0, n_grasp=192, n_push=64,
                 n_poke=48, n_identity=128, identity_pool=32,
                 stage1_iters=60, stage2_cycles=40, batch_size=8,
                 learning_rate=1e-3, tap="fc7", exclude="none",
                 work_dir=None):
        self.input_size = input_size
        self.seed = seed
        self.n_grasp = n_grasp
        self.n_push = n_push
        self.n_poke = n_poke
        self.n_identity = n_identity
        self.identity_pool = identity_pool
        self.stage1_iters = stage1_iters
        self.stage2_cycles = stage2_cycles
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tap = tap
        self.exclude = exclude
        self.work_dir = work_dir

    def _generate(self, out_dir: str) -> dict:
        s, size = self.seed, self.input_size
        h = settings_hash({"component": "estimator", "seed": s})
        paths = {t: os.path.join(out_dir, f"{t}.bin")
                 for t in ("grasp", "push", "poke", "identity")}
        write_grasp_container(
            paths["grasp"],
            gen_grasp_dataset(self.n_grasp, seed=s, positive_rate=0.5,
                              image_size=size), s, h)
        write_push_container(
            paths["push"], gen_push_dataset(self.n_push, seed=s,
                                            image_size=size), s, h)
        write_poke_container(
            paths["poke"], gen_poke_dataset(self.n_poke, seed=s,
                                            image_size=size), s, h)
        write_identity_container(
            paths["identity"],
            gen_identity_dataset(self.n_identity, seed=s,
                                 pool_size=self.identity_pool,
                                 image_size=size), s, h)
        return paths

    def fit(self, X=None, y=None):
        out_dir = self.work_dir or tempfile.mkdtemp(prefix="curio-rep-")
        os.makedirs(out_dir, exist_ok=True)
        paths = self._generate(out_dir)
        config = RunConfig(
            seed=self.seed, input_size=self.input_size,
            batch_size=self.batch_size, stage1_iters=self.stage1_iters,
            stage2_cycles=self.stage2_cycles,
            learning_rate=self.learning_rate, exclude=self.exclude,
            eval_tap=self.tap, grasp_data=paths["grasp"],
            push_data=paths["push"], poke_data=paths["poke"],
            identity_data=paths["identity"],
            out_dir=os.path.join(out_dir, "run"))
        result = train(config)
        self.network_ = result["network"]
        self.config_ = config
        self.checkpoint_path_ = result["final"]
        self.n_features_out_ = int(self.transform(
            np.zeros((1, 3, self.input_size, self.input_size),
                     dtype=np.float32)).shape[1])
        return self

    def _require_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "this InteractionRepresentation is not fitted; call fit() "
                "before transform()")

    def transform(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_images(X, self.input_size)
        return extract_features(self.network_, X, self.tap,
                                batch_size=max(1, self.batch_size))


def check_features(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ConfigurationError(
            f"{name} must be a 2-D feature matrix; got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X, dtype=np.float32)


class InteractionProbe(ClassifierMixin, BaseEstimator):
    """Softmax probe over feature vectors.

    Standardizes features with training-set statistics, then trains
    only the probe weights. Composes with InteractionRepresentation in
    a Pipeline: the representation embeds images, the probe classifies
    the embeddings.
    """

    def __init__(self, epochs=30, learning_rate=1e-2, batch_size=16,
                 seed=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        feats = check_features(X)
        y = check_labels(y, len(feats))
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = feats.shape[1]
        self.mu_, self.sigma_ = _standardizer(feats)
        feats = (feats - self.mu_) / self.sigma_

        n_classes = len(self.classes_)
        dt = feats.dtype
        rng = np.random.default_rng([0x9B0E, self.seed])
        w = ad.Tensor(rng.normal(0.0, 0.01, (n_classes, feats.shape[1]))
                      .astype(dt), requires_grad=True)
        b = ad.Tensor(np.zeros(n_classes, dtype=dt), requires_grad=True)
        store = ParameterStore()
        store.register("probe/w", w)
        store.register("probe/b", b)
        optim = Rmsprop(store, OptimConfig(learning_rate=self.learning_rate))
        n = len(feats)
        it = BatchIterator(n, self.batch_size,
                           int(rng.integers(2 ** 31 - 1)))
        steps = self.epochs * max(1, n // min(self.batch_size, n))
        for _ in range(steps):
            ix = it.next_batch()
            logits = ad.linear(ad.Tensor(feats[ix]), w, b)
            loss = ad.softmax_cross_entropy(logits, codes[ix])
            ad.backward(loss)
            optim.step(["probe/w", "probe/b"])
        self.coef_ = w.data.copy()
        self.intercept_ = b.data.copy()
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "coef_"):
            raise NotFittedError("this InteractionProbe is not fitted")
        feats = check_features(X)
        if feats.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"expected {self.n_features_in_} features, "
                f"got {feats.shape[1]}")
        feats = (feats - self.mu_) / self.sigma_
        return feats @ self.coef_.T + self.intercept_

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
