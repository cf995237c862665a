"""scikit-learn style wrappers around the training and inference code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data_pipeline import AugmentSpec, prepare_case
from .losses_metrics import dsc, validate_labels
from .trainer import SliceData, TrainConfig, predict_labels, train
from .zonal_net import ModelConfig, forward_segment


def check_slices(X, input_size: int | None = None) -> np.ndarray:
    """Validate a stack of 2D slices and return it as float32 (n, S, S).

    Accepts (n, S, S) or single-channel (n, 1, S, S) input.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True,
                    ensure_2d=False)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected slices shaped (n, S, S) or (n, 1, S, S), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"slices must be square, got {X.shape[1]}x{X.shape[2]}")
    if input_size is not None and X.shape[1] != input_size:
        raise ValueError(f"slices are {X.shape[1]} px but the model expects {input_size}")
    return np.ascontiguousarray(X)


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape:
        raise ValueError(f"masks {y.shape} do not match slices {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("mask labels must be integers")
    return validate_labels(y.astype(np.uint8))


class SlicePreprocessor(BaseEstimator, TransformerMixin):
    """Crop and resample image volumes into normalized network slices."""

    def __init__(self, input_size=192, crop_mm=93.0):
        self.input_size = input_size
        self.crop_mm = crop_mm

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = [prepare_case(vol, None, self.input_size, self.crop_mm)[0] for vol in X]
        return np.concatenate(out) if out else np.empty((0, self.input_size, self.input_size),
                                                        np.float32)


class ZonalSegmenter(BaseEstimator):
    """Three-class (background/PZ/TZ) slice segmenter.

    Parameters mirror the training recipe; ``fit`` takes prepared slices
    (n, S, S) and label masks, ``predict`` returns label masks.
    """

    def __init__(self, arch="proposed", width_multiplier=1.0, input_size=192,
                 include_initial_maxpool=False, learning_rate=2.5e-3, momentum=0.9,
                 weight_decay=1e-4, epochs=100, batch_size=48, augment=True,
                 lr_schedule="constant", random_state=0):
        self.arch = arch
        self.width_multiplier = width_multiplier
        self.input_size = input_size
        self.include_initial_maxpool = include_initial_maxpool
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.augment = augment
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        model = ModelConfig(width_multiplier=self.width_multiplier, input_size=self.input_size,
                            include_initial_maxpool=self.include_initial_maxpool,
                            arch=self.arch, seed=seed)
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, model=model,
                           augment=AugmentSpec(seed=seed), augment_enabled=self.augment,
                           seed=seed, lr_schedule=self.lr_schedule).validate()

    def fit(self, X, y):
        X = check_slices(X, self.input_size)
        y = check_masks(y, X)
        config = self._train_config()
        result = train(config, SliceData(X, y, [None] * len(X)))
        self.model_ = result.model
        self.history_ = list(result.history)
        self.optimizer_buffers_ = result.optimizer.buffers
        self.classes_ = np.arange(3)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_slices(X, self.input_size)
        self.model_.eval()
        out = [forward_segment(self.model_, X[i:i + 8, None])[0] for i in range(0, len(X), 8)]
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_slices(X, self.input_size))

    def score(self, X, y) -> float:
        """Mean of the PZ and TZ Dice scores pooled over all given slices."""
        X = check_slices(X, self.input_size)
        y = check_masks(y, X)
        pred = self.predict(X)
        values = [v for v in (dsc(pred, y, "PZ"), dsc(pred, y, "TZ")) if v is not None]
        return float(np.mean(values)) if values else float("nan")

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, self.optimizer_buffers_,
                               {"history": self.history_, "estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "ZonalSegmenter":
        model, buffers, meta = load_checkpoint(path)
        est = cls(**meta.get("estimator_params", {}))
        est.model_ = model.eval()
        est.history_ = list(meta.get("history", []))
        est.optimizer_buffers_ = buffers
        est.classes_ = np.arange(3)
        return est
