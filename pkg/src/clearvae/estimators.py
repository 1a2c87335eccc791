"""Scikit-learn style estimators over the representation learner.

`ClearVaeTransformer` is fit on labeled images and transforms them into
latent means (content partition by default), so it drops into pipelines next
to any downstream sklearn classifier.  `LatentHeadClassifier` implements the
frozen-encoder protocol (encode to content means, train a small MLP head),
and `CnnBaselineClassifier` is the matched end-to-end baseline with the same
trunk and head shapes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autodiff import Tensor
from .datasets import LabeledImageSet
from .losses import ClearConfig
from .training import (cnn_predict_proba, head_predict_proba,
                       train_classifier_head, train_clear, train_cnn_baseline,
                       _encode_mu)
from .validation import check_image_array, check_labels


def _check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit first")


class ClearVaeTransformer(BaseEstimator, TransformerMixin):
    """Fit the split-latent VAE on (images, content labels); transform images
    to variational means.

    Parameters mirror the objective configuration; `alpha` sets both
    contrastive weights.  `latent_parts` picks what `transform` returns:
    "content", "style", or "both" (concatenated).
    """

    def __init__(self, d_c=8, d_s=8, beta=0.125, alpha=100.0, tau=0.3,
                 metric="cosine", variant="ps", epochs=30, batch_size=128,
                 lr=1e-3, seed=0, audit_every=0, latent_parts="content"):
        self.d_c = d_c
        self.d_s = d_s
        self.beta = beta
        self.alpha = alpha
        self.tau = tau
        self.metric = metric
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.audit_every = audit_every
        self.latent_parts = latent_parts

    def _config(self) -> ClearConfig:
        return ClearConfig(beta=self.beta, alpha1=self.alpha, alpha2=self.alpha,
                           tau=self.tau, metric=self.metric, variant=self.variant,
                           d_c=self.d_c, d_s=self.d_s)

    def fit(self, X, y):
        X = check_image_array(X)
        y = check_labels(y, X.shape[0])
        ds = LabeledImageSet(X, y, np.zeros(X.shape[0], dtype=np.int64))
        self.model_, self.history_ = train_clear(
            ds, self._config(), seed=self.seed, epochs=self.epochs,
            batch_size=min(self.batch_size, X.shape[0]), lr=self.lr,
            audit_every=self.audit_every)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        _check_fitted(self, "model_")
        X = check_image_array(X, self.model_.channels, self.model_.image_size)
        mu_c, mu_s = _encode_mu(self.model_, X)
        if self.latent_parts == "content":
            return mu_c
        if self.latent_parts == "style":
            return mu_s
        if self.latent_parts == "both":
            return np.concatenate([mu_c, mu_s], axis=1)
        raise ValueError(f"unknown latent_parts {self.latent_parts!r}")

    def reconstruct(self, X) -> np.ndarray:
        """Decode from the variational means (no sampling noise)."""
        _check_fitted(self, "model_")
        X = check_image_array(X, self.model_.channels, self.model_.image_size)
        code = self.model_.encode(Tensor(X), training=False)
        z_c, z_s = self.model_.reparameterize(code, None, eps=0.0)
        return self.model_.decode(z_c, z_s, training=False).data

    def score(self, X, y=None) -> float:
        """Negative mean reconstruction cross-entropy (higher is better)."""
        _check_fitted(self, "model_")
        X = check_image_array(X, self.model_.channels, self.model_.image_size)
        x_hat = np.clip(self.reconstruct(X), 1e-7, 1.0 - 1e-7)
        bce = -(X * np.log(x_hat) + (1.0 - X) * np.log(1.0 - x_hat))
        return float(-bce.mean())


class LatentHeadClassifier(BaseEstimator, ClassifierMixin):
    """Frozen-encoder classifier: content means into a 2-layer MLP head.

    `vae` is a fitted `ClearVaeTransformer` (or a bare model with the same
    interface); its weights are never updated by `fit`.
    """

    def __init__(self, vae=None, epochs=30, batch_size=128, lr=1e-3, seed=0):
        self.vae = vae
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _model(self):
        if self.vae is None:
            raise ValueError("LatentHeadClassifier needs a fitted vae")
        if hasattr(self.vae, "model_"):
            return self.vae.model_
        return self.vae

    def fit(self, X, y):
        model = self._model()
        X = check_image_array(X, model.channels, model.image_size)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        ds = LabeledImageSet(X, y, np.zeros(X.shape[0], dtype=np.int64))
        self.head_, self.fit_info_ = train_classifier_head(
            model, ds, seed=self.seed, n_classes=int(y.max()) + 1,
            epochs=self.epochs, batch_size=min(self.batch_size, X.shape[0]),
            lr=self.lr)
        return self

    def predict_proba(self, X) -> np.ndarray:
        _check_fitted(self, "head_")
        model = self._model()
        X = check_image_array(X, model.channels, model.image_size)
        return head_predict_proba(model, self.head_, X)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class CnnBaselineClassifier(BaseEstimator, ClassifierMixin):
    """End-to-end CNN with the same trunk and head shapes as the VAE path."""

    def __init__(self, d_feat=8, epochs=30, batch_size=128, lr=1e-3, seed=0):
        self.d_feat = d_feat
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = check_image_array(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        ds = LabeledImageSet(X, y, np.zeros(X.shape[0], dtype=np.int64))
        self.net_ = train_cnn_baseline(
            ds, seed=self.seed, n_classes=int(y.max()) + 1, d_feat=self.d_feat,
            epochs=self.epochs, batch_size=min(self.batch_size, X.shape[0]),
            lr=self.lr)
        return self

    def predict_proba(self, X) -> np.ndarray:
        _check_fitted(self, "net_")
        X = check_image_array(X, self.net_.encoder.channels,
                              self.net_.encoder.image_size)
        return cnn_predict_proba(self.net_, X)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)
