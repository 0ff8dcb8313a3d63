"""scikit-learn compatible wrappers around the detection pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import augment as aug
from . import dataio, evaluation, trainer, unet
from . import heatmap as hm
from .validation import check_images, check_is_fitted, check_landmark_sets, check_threshold


class SutureDetector(BaseEstimator):
    """Detect a variable number of suture points per image.

    ``fit`` takes images ``X`` (``N x H x W x 3``) and a list ``y`` of
    ``(k_i, 2)`` landmark arrays.  ``predict`` returns one ``(k, 2)`` array of
    ``(x, y)`` detections per image.  When no validation set is supplied the
    training set doubles as the validation set for best-epoch selection.
    """

    def __init__(self, depth=4, base_filters=16, dropout_schedule=None, sigma=1.0, epochs=200,
                 batch_size=8, learning_rate=1e-3, lr_decay_factor=0.1, lr_patience=10,
                 augment=True, threshold=0.5, match_radius=6.0, random_state=0):
        self.depth = depth
        self.base_filters = base_filters
        self.dropout_schedule = dropout_schedule
        self.sigma = sigma
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_factor = lr_decay_factor
        self.lr_patience = lr_patience
        self.augment = augment
        self.threshold = threshold
        self.match_radius = match_radius
        self.random_state = random_state

    def _train_config(self, height, width):
        augment_cfg = self.augment if isinstance(self.augment, aug.AugmentConfig) else aug.AugmentConfig()
        return trainer.TrainConfig(
            epochs_max=self.epochs,
            initial_lr=self.learning_rate,
            lr_decay_factor=self.lr_decay_factor,
            lr_patience=self.lr_patience,
            batch_size=self.batch_size,
            seed=int(self.random_state or 0),
            sigma=self.sigma,
            augment_enabled=bool(self.augment),
            augment=augment_cfg,
            unet=unet.UNetConfig(depth=self.depth, base_filters=self.base_filters,
                                 dropout_schedule=self.dropout_schedule,
                                 input_width=width, input_height=height),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        shape = X.shape[1:3]
        y = check_landmark_sets(y, len(X), shape)
        check_threshold(self.threshold)
        config = self._train_config(*shape)
        train = [dataio.Sample(img, pts, f"train:{i}") for i, (img, pts) in enumerate(zip(X, y))]
        if X_val is None:
            val = train
        else:
            X_val = check_images(X_val, shape)
            y_val = check_landmark_sets(y_val, len(X_val), shape)
            val = [dataio.Sample(img, pts, f"val:{i}") for i, (img, pts) in enumerate(zip(X_val, y_val))]
        self.checkpoint_, self.record_ = trainer.train_fold(train, val, config)
        self.model_ = self.checkpoint_.model()
        self.input_shape_ = tuple(shape)
        self.best_epoch_ = self.record_.best_epoch
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint, **params):
        """Wrap an existing checkpoint (object or path) without retraining."""
        if not isinstance(checkpoint, trainer.Checkpoint):
            checkpoint = trainer.Checkpoint.load(checkpoint)
        cfg = checkpoint.unet_config
        est = cls(depth=cfg.depth, base_filters=cfg.base_filters,
                  dropout_schedule=list(cfg.dropout_schedule), **params)
        est.checkpoint_ = checkpoint
        est.model_ = checkpoint.model()
        est.input_shape_ = (cfg.input_height, cfg.input_width)
        return est

    def predict_heatmap(self, X):
        """Foreground probability maps, ``N x H x W``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_shape_)
        return np.stack(trainer.predict_heatmaps(self.model_, list(X), self.batch_size))

    def predict(self, X):
        t = check_threshold(self.threshold)
        return [hm.decode(h, t) for h in self.predict_heatmap(X)]

    def match_counts(self, X, y):
        """Summed ``Counts`` of TP/FP/FN over the given frames."""
        pred = self.predict(X)
        y = check_landmark_sets(y, len(pred), self.input_shape_)
        counts = evaluation.Counts()
        for p, g in zip(pred, y):
            counts.add(evaluation.match(p, g, self.match_radius))
        return counts

    def score(self, X, y):
        """Harmonic mean of PPV and TPR from summed counts (0 when undefined)."""
        c = self.match_counts(X, y)
        denom = 2 * c.tp + c.fp + c.fn
        return 2.0 * c.tp / denom if denom else 0.0


class HeatmapEncoder(TransformerMixin, BaseEstimator):
    """Landmark sets -> ``N x 2 x H x W`` Gaussian label maps."""

    def __init__(self, shape=(288, 512), sigma=1.0):
        self.shape = shape
        self.sigma = sigma

    def fit(self, X=None, y=None):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        return self

    def transform(self, X):
        X = list(X)
        X = check_landmark_sets(X, len(X), self.shape)
        return hm.encode_batch(X, tuple(self.shape), self.sigma)


class HeatmapDecoder(TransformerMixin, BaseEstimator):
    """Heatmaps (``N x H x W`` or ``N x 2 x H x W``) -> list of centroid arrays."""

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        check_threshold(self.threshold)
        return self

    def transform(self, X):
        t = check_threshold(self.threshold)
        return [hm.decode(h, t) for h in X]
