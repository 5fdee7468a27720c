"""scikit-learn style wrappers around the networks, training loops and post-processing."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import REGIONS, evaluate_case
from .network import build, build_classifier, build_jcs
from .plan import default_plan
from .postproc import PostprocConfig, threshold_et
from .tensor import sigmoid
from .train import (
    LossConfig, TrainConfig, label_regions, pos_weight_from_grades, regions_to_labels,
    soft_dice, train_classifier, train_segmenter,
)
from .transfer import WeightStore, resnet18_store, transfer_all, transfer_matching

INITS = ("kaiming", "exact", "all")


def check_images(X, n_channels: int = 4) -> np.ndarray:
    """Validate a batch of multimodal volumes ``(n, C, D, H, W)`` and cast to float32."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[1] != n_channels:
        raise ValueError(f"expected images of shape (n, {n_channels}, D, H, W), got {X.shape}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_label_batch(y, spatial) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[1:] != tuple(spatial) or y.ndim != 4:
        raise ValueError(f"expected labels of shape (n, {', '.join(map(str, spatial))}), got {y.shape}")
    return y


def _predict_batches(net, X, batch_size):
    return np.concatenate([net.forward(X[i:i + batch_size])
                           for i in range(0, len(X), batch_size)])


class GradeClassifier(ClassifierMixin, BaseEstimator):
    """HGG/LGG classifier whose encoder can seed a JCS segmenter."""

    def __init__(self, channels=(32, 64, 128, 256, 320, 320), conv_kind="3d", epochs=100,
                 batch_size=5, lr=0.001, seed=0):
        self.channels = channels
        self.conv_kind = conv_kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} grades")
        self.plan_ = default_plan("jcs", conv_kind=self.conv_kind, channels=self.channels)
        self.net_ = build_classifier(self.plan_, seed=self.seed)
        cfg = TrainConfig.classifier(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                     seed=self.seed)
        loss_cfg = LossConfig(pos_weight=pos_weight_from_grades(y))
        self.curve_ = train_classifier(self.net_, X, y, cfg, loss_cfg)
        self.classes_ = np.array(["HGG", "LGG"])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        return _predict_batches(self.net_, check_images(X), self.batch_size).astype(np.float64)

    def predict_proba(self, X):
        p_hgg = sigmoid(self.decision_function(X))
        return np.stack([p_hgg, 1.0 - p_hgg], axis=1)

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, "HGG", "LGG")


class Segmenter(BaseEstimator):
    """Region-based tumor segmenter (baseline, ACS or JCS variant).

    ``init`` selects the starting weights: ``"kaiming"``, or transfer from a
    2D weight store with the ``"exact"`` (shape-matching) or ``"all"``
    (slicing) strategy. With ``store=None`` the synthetic ResNet18-shaped
    store is used. ``variant="jcs"`` needs a fitted :class:`GradeClassifier`.
    """

    def __init__(self, variant="acs", channels=(32, 64, 128, 256, 320, 320), init="kaiming",
                 store=None, classifier=None, epochs=50, iterations_per_epoch=250,
                 batch_size=4, lr=0.01, flip_augment=True, seed=0, threshold=0.5):
        self.variant = variant
        self.channels = channels
        self.init = init
        self.store = store
        self.classifier = classifier
        self.epochs = epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.flip_augment = flip_augment
        self.seed = seed
        self.threshold = threshold

    def _build(self):
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.variant == "jcs":
            if self.classifier is None:
                raise ValueError("variant='jcs' requires a fitted GradeClassifier")
            check_is_fitted(self.classifier, "net_")
            plan = self.classifier.plan_
            net = build_jcs(plan, self.classifier.net_, seed=self.seed)
        else:
            plan = default_plan(self.variant, channels=self.channels)
            net = build(plan, seed=self.seed)
        report = None
        if self.init != "kaiming":
            store = self.store if isinstance(self.store, WeightStore) else resnet18_store(self.seed)
            strategy = transfer_matching if self.init == "exact" else transfer_all
            report = strategy(net, store)
        return plan, net, report

    def fit(self, X, y):
        X = check_images(X)
        y = check_label_batch(y, X.shape[2:])
        self.plan_, self.net_, self.transfer_report_ = self._build()
        cfg = TrainConfig(epochs=self.epochs, iterations_per_epoch=self.iterations_per_epoch,
                          batch_size=self.batch_size, lr=self.lr,
                          flip_augment=self.flip_augment, seed=self.seed)
        self.curve_ = train_segmenter(self.net_, X, y, cfg)
        return self

    def predict_proba(self, X):
        """Sigmoid region maps ``(n, 3, D, H, W)`` in WT, TC, ET order."""
        check_is_fitted(self, "net_")
        return sigmoid(_predict_batches(self.net_, check_images(X), self.batch_size))

    def predict(self, X):
        return regions_to_labels(self.predict_proba(X), self.threshold)

    def soft_dice(self, X, y) -> float:
        """Mean soft Dice over regions and cases."""
        probs = self.predict_proba(X)
        return float(soft_dice(probs, label_regions(y)).mean())

    def score(self, X, y):
        """Mean hard Dice over WT/TC/ET and cases."""
        pred = self.predict(X)
        reports = [evaluate_case(p, g) for p, g in zip(pred, np.asarray(y))]
        return float(np.mean([[r.dice[k] for k in REGIONS] for r in reports]))


class ETSuppressor(TransformerMixin, BaseEstimator):
    """Stateless transformer applying the small-ET relabelling to label volumes."""

    def __init__(self, et_threshold=200, relabel_target=1):
        self.et_threshold = et_threshold
        self.relabel_target = relabel_target

    def fit(self, X, y=None):
        self.config_ = PostprocConfig(self.et_threshold, self.relabel_target)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = np.asarray(X)
        if X.ndim == 3:
            return threshold_et(X, self.config_)
        if X.ndim != 4:
            raise ValueError(f"expected a (D, H, W) volume or a stack of them, got {X.shape}")
        return np.stack([threshold_et(v, self.config_) for v in X])
