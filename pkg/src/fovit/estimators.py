"""scikit-learn style estimators around the foveated and full-resolution models.

Inputs are image arrays ``(n, side, side, 3)``: uint8 in ``[0, 255]`` or
floats in ``[0, 1]``.  Labels may be any hashable values; they are mapped to
``0..K-1`` through ``classes_``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .episode import (
    EpisodeConfig,
    TrainSchedule,
    compute_confidence_threshold,
    ensemble_evaluate,
    episodes_over,
    predict_unfoveated,
    softmax_np,
    train,
)
from .geometry import FoveaLayout, build_canonical_layout
from .vit import ModelConfig, VisionTransformer, load_model


def check_images(X, image_side: int | None = None) -> np.ndarray:
    """Validate an image batch and return it as a C-contiguous array."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None].repeat(3, axis=-1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, side, side, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_side is not None and X.shape[1] != image_side:
        raise ValueError(f"expected {image_side}x{image_side} images, got {X.shape[1]}x{X.shape[2]}")
    if X.shape[0] == 0:
        raise ValueError("no images")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.floating):
            raise ValueError(f"images must be uint8 or float, got {X.dtype}")
        if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
            raise ValueError("float images must be finite and within [0, 1]")
    return np.ascontiguousarray(X)


def check_labels(y, n: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    check_classification_targets(y)
    if len(y) != n:
        raise ValueError(f"{n} images but {len(y)} labels")
    return y


class _ViTBase(ClassifierMixin, BaseEstimator):
    def __init__(
        self,
        image_side=112,
        patch_side=8,
        dim=64,
        heads=4,
        depth=4,
        mlp_ratio=4,
        epochs=30,
        batch_size=64,
        lr_init=3e-4,
        lr_min=3e-5,
        weight_decay=1e-8,
        random_state=0,
        layout=None,
    ):
        self.image_side = image_side
        self.patch_side = patch_side
        self.dim = dim
        self.heads = heads
        self.depth = depth
        self.mlp_ratio = mlp_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.layout = layout

    _foveated = True

    def _layout(self) -> FoveaLayout:
        return self.layout if self.layout is not None else build_canonical_layout()

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_init=self.lr_init,
            lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            n_fixations=getattr(self, "n_fixations", 5),
            seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_images(X, self.image_side)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        layout = self._layout()
        config = ModelConfig(
            image_side=self.image_side,
            patch_side=self.patch_side,
            dim=self.dim,
            heads=self.heads,
            depth=self.depth,
            mlp_ratio=self.mlp_ratio,
            n_classes=len(self.classes_),
            capacity=layout.capacity,
        )
        torch.manual_seed(self.random_state)
        self.model_ = VisionTransformer(config, layout)
        self.history_ = train(self.model_, X, y_idx, self._schedule(), foveated=self._foveated)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_checkpoint(cls, path, classes=None, layout: FoveaLayout | None = None, **params):
        """Wrap a saved model as a fitted estimator."""
        model, meta = load_model(path, layout)
        c = model.config
        est = cls(image_side=c.image_side, patch_side=c.patch_side, dim=c.dim, heads=c.heads, depth=c.depth,
                  mlp_ratio=c.mlp_ratio, layout=layout, **params)
        est.model_ = model
        est.classes_ = np.arange(c.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = c.image_side * c.image_side * c.channels
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class UnfoveatedViTClassifier(_ViTBase):
    """Full-resolution transformer: every patch token, one pass."""

    _foveated = False

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side)
        return softmax_np(predict_unfoveated(self.model_, X))


class FoveatedViTClassifier(_ViTBase):
    """Foveated transformer making ``n_fixations`` fixations per image."""

    def __init__(
        self,
        image_side=112,
        patch_side=8,
        dim=64,
        heads=4,
        depth=4,
        mlp_ratio=4,
        epochs=30,
        batch_size=64,
        lr_init=3e-4,
        lr_min=3e-5,
        weight_decay=1e-8,
        random_state=0,
        layout=None,
        n_fixations=5,
        policy="guided",
    ):
        super().__init__(image_side, patch_side, dim, heads, depth, mlp_ratio, epochs, batch_size, lr_init, lr_min,
                         weight_decay, random_state, layout)
        self.n_fixations = n_fixations
        self.policy = policy

    def _episodes(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side)
        return episodes_over(self.model_, X, EpisodeConfig(self.n_fixations, self.policy, None, self.random_state))

    def staged_predict_proba(self, X) -> Iterator[np.ndarray]:
        """Class probabilities after fixation 1, 2, ..., all from the same episodes."""
        probs = self._episodes(X).probabilities
        for k in range(probs.shape[1]):
            yield probs[:, k]

    def predict_proba(self, X):
        return self._episodes(X).probabilities[:, -1]

    def fit_threshold(self, X, y):
        """Set ``threshold_`` to the mean confidence of correct two-fixation predictions."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_side)
        y = check_labels(y, len(X))
        idx = np.searchsorted(self.classes_, y)
        if (idx >= len(self.classes_)).any() or (self.classes_[idx.clip(max=len(self.classes_) - 1)] != y).any():
            raise ValueError("labels not seen during fit")
        self.threshold_ = compute_confidence_threshold(self.model_, X, idx, seed=self.random_state)
        return self


class FixationCascade(ClassifierMixin, BaseEstimator):
    """Early-exit cascade: 1..n fixations, then the full-resolution model.

    Both members must already be fitted on the same classes.  ``fit`` only
    computes the confidence threshold (unless one is given).
    """

    def __init__(self, foveated=None, unfoveated=None, threshold=None, n_stages=5, random_state=0):
        self.foveated = foveated
        self.unfoveated = unfoveated
        self.threshold = threshold
        self.n_stages = n_stages
        self.random_state = random_state

    def fit(self, X, y=None):
        check_is_fitted(self.foveated, "model_")
        check_is_fitted(self.unfoveated, "model_")
        if not np.array_equal(self.foveated.classes_, self.unfoveated.classes_):
            raise ValueError("cascade members were fitted on different classes")
        self.classes_ = self.foveated.classes_
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
        else:
            if y is None:
                raise ValueError("labels are needed to compute the threshold")
            self.threshold_ = self.foveated.fit_threshold(X, y).threshold_
        return self

    def run(self, X, y=None):
        check_is_fitted(self, "threshold_")
        X = check_images(X, self.foveated.image_side)
        labels = None if y is None else np.searchsorted(self.classes_, check_labels(y, len(X)))
        result = ensemble_evaluate(
            self.foveated.model_, self.unfoveated.model_, X, labels, self.threshold_, self.n_stages,
            self.random_state,
        )
        self.ledger_ = result.ledger
        self.stages_ = result.stage
        self.table_ = result.table
        return result

    def predict(self, X):
        return self.classes_[self.run(X).predictions]
