"""Losses, sampling, optimizer and the training loops."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .layers import Module, Parameter
from .metrics import REGION_LABELS, REGIONS, check_labels
from .network import make_rng

log = logging.getLogger(__name__)

GRADES = ("HGG", "LGG")


class NumericError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 50
    iterations_per_epoch: int = 250
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    poly_exponent: float = 0.9
    weight_decay: float = 0.0
    flip_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "iterations_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def classifier(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=100, batch_size=5, lr=0.001, flip_augment=False)
        base.update(overrides)
        return cls(**base)


@dataclass
class LossConfig:
    dice_smooth: float = 1e-5
    bce_weight: float = 1.0
    pos_weight: float = 1.0
    positive_class: str = "HGG"

    def __post_init__(self):
        if self.dice_smooth <= 0 or self.pos_weight <= 0:
            raise ValueError("dice_smooth and pos_weight must be positive")
        if self.positive_class not in GRADES:
            raise ValueError(f"positive_class must be one of {GRADES}")


def save_config(path, **sections) -> None:
    """Write config dataclasses as one JSON document, e.g. ``train=..., loss=...``."""
    Path(path).write_text(json.dumps({k: asdict(v) for k, v in sections.items()}, indent=2) + "\n")


def load_config(path) -> tuple[TrainConfig, LossConfig]:
    data = json.loads(Path(path).read_text())
    unknown = set(data) - {"train", "loss"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    for section, cls in (("train", TrainConfig), ("loss", LossConfig)):
        names = {f.name for f in fields(cls)}
        extra = set(data.get(section, {})) - names
        if extra:
            raise ValueError(f"unknown {section} fields {sorted(extra)}")
    return TrainConfig(**data.get("train", {})), LossConfig(**data.get("loss", {}))


# ------------------------------------------------------------------ losses

def label_regions(labels: np.ndarray) -> np.ndarray:
    """Stack WT/TC/ET masks on a new channel axis right before the spatial axes."""
    labels = np.asarray(labels)
    check_labels(labels)
    masks = [np.isin(labels, REGION_LABELS[r]) for r in REGIONS]
    return np.stack(masks, axis=-4)


def regions_to_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Inverse of :func:`label_regions`: WT -> 2, then TC -> 1, then ET -> 4."""
    probs = np.asarray(probs)
    wt, tc, et = (np.take(probs, i, axis=-4) > threshold for i in range(3))
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    return labels


def region_loss(logits: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig()):
    """Soft Dice + weighted BCE on sigmoid region channels.

    ``logits`` and ``gt`` are ``(3, D, H, W)`` or batched ``(N, 3, D, H, W)``;
    a batch loss is the mean of per-case losses. Returns ``(loss, grad)``.
    """
    if logits.shape != gt.shape:
        raise ValueError(f"logits {logits.shape} and targets {gt.shape} differ in shape")
    if logits.ndim == 4:
        loss, grad = region_loss(logits[None], gt[None], cfg)
        return loss, grad[0]
    x = logits.astype(np.float64)
    q = gt.astype(np.float64)
    n, c = x.shape[:2]
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    eps = cfg.dice_smooth
    p = expit(x)
    inter = (p * q).sum(axis=axes)
    denom = p.sum(axis=axes) + q.sum(axis=axes) + eps
    dice_term = 1.0 - (2.0 * inter + eps) / denom
    bce = np.logaddexp(0.0, x) - x * q
    loss_per_case = dice_term.mean(axis=1) + cfg.bce_weight * bce.mean(axis=axes).mean(axis=1)
    loss = float(loss_per_case.mean())

    shape = (n, c) + (1,) * len(axes)
    ddice_dp = -(2.0 * q * denom.reshape(shape) - (2.0 * inter + eps).reshape(shape)) \
        / denom.reshape(shape) ** 2
    grad = ddice_dp * p * (1.0 - p) / c
    grad += cfg.bce_weight * (p - q) / (count * c)
    grad /= n
    return loss, grad.astype(logits.dtype)


def classifier_loss(logit, label, pos_weight: float = 1.0):
    """Weighted BCE on logits: ``-[w*y*log σ(x) + (1-y)*log(1-σ(x))]``.

    Arrays are averaged over the batch. Returns ``(loss, grad)``.
    """
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    losses = -(pos_weight * y * log_expit(x) + (1.0 - y) * log_expit(-x))
    grads = (1.0 - y) * expit(x) - pos_weight * y * expit(-x)
    if x.ndim == 0:
        return float(losses), float(grads)
    return float(losses.mean()), (grads / x.size).astype(np.asarray(logit).dtype)


def pos_weight_from_grades(grades, positive_class: str = "HGG") -> float:
    """Negative-to-positive count ratio; N_LGG / N_HGG when HGG is positive."""
    grades = list(grades)
    n_pos = sum(g == positive_class for g in grades)
    n_neg = len(grades) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("pos_weight needs both grades present")
    return n_neg / n_pos


# --------------------------------------------------------------- sampling

def stratified_batches(labels, batch_size: int, rng) -> list[np.ndarray]:
    """One epoch of batches whose class mix tracks the global ratio.

    Classes are shuffled internally; cumulative per-class quotas are
    allocated by largest remainder, so each batch deviates from the global
    ratio by less than one sample per class and every index appears once.
    """
    labels = list(labels)
    n = len(labels)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    rng = make_rng(rng)
    classes = sorted(set(labels))
    pools = {c: rng.permutation([i for i, l in enumerate(labels) if l == c]) for c in classes}
    if len(classes) == 1:
        order = pools[classes[0]]
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    sizes = np.array([len(pools[c]) for c in classes])
    taken = np.zeros(len(classes), dtype=int)
    batches = []
    for end in range(batch_size, n + batch_size, batch_size):
        end = min(end, n)
        exact = sizes * end / n
        quota = np.floor(exact).astype(int)
        short = end - quota.sum()
        if short:
            order = np.argsort(-(exact - quota), kind="stable")
            quota[order[:short]] += 1
        batch = []
        for k, c in enumerate(classes):
            batch.extend(pools[c][taken[k]:quota[k]])
        taken = quota
        batches.append(rng.permutation(np.array(batch, dtype=int)))
    return batches


# -------------------------------------------------------------- optimizer

def poly_lr(epoch: int, max_epochs: int, lr0: float, exponent: float = 0.9) -> float:
    return lr0 * (1.0 - epoch / max_epochs) ** exponent


@dataclass
class SGDState:
    velocity: dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: list[Parameter], state: SGDState, lr: float, momentum: float = 0.99,
             nesterov: bool = True, weight_decay: float = 0.0) -> None:
    """In-place SGD with (Nesterov) momentum; frozen or grad-less parameters are skipped."""
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        v = state.velocity.get(id(p))
        if momentum:
            v = g.copy() if v is None else momentum * v + g
            state.velocity[id(p)] = v
            step = g + momentum * v if nesterov else v
        else:
            step = g
        p.data -= (lr * step).astype(p.data.dtype)


# ----------------------------------------------------------------- loops

@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    epochs: list[int]

    def write_curve(self, path, delimiter: str = "\t") -> None:
        rows = [delimiter.join(("iteration", "epoch", "lr", "loss"))]
        for i, (e, lr, l) in enumerate(zip(self.epochs, self.lrs, self.losses)):
            rows.append(delimiter.join((str(i), str(e), repr(lr), repr(l))))
        Path(path).write_text("\n".join(rows) + "\n")


def _flip(images, targets, rng):
    for i in range(len(images)):
        for axis in range(3):
            if rng.random() < 0.5:
                images[i] = np.flip(images[i], axis=1 + axis)
                targets[i] = np.flip(targets[i], axis=1 + axis)
    return np.ascontiguousarray(images), np.ascontiguousarray(targets)


def _check_finite(loss: float, it: int):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at iteration {it}")


def train_segmenter(net: Module, images: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
                    callback=None) -> TrainResult:
    """Region-based training on ``images (n, 4, D, H, W)`` and ``labels (n, D, H, W)``.

    Works for plain segmenters and JCS networks; frozen parameters stay put.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    targets = label_regions(labels)
    rng = make_rng(cfg.seed)
    state = SGDState()
    params = [p for p in net.parameters() if not p.frozen]
    result = TrainResult([], [], [])
    it = 0
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent)
        for _ in range(cfg.iterations_per_epoch):
            idx = rng.choice(len(images), size=cfg.batch_size,
                             replace=cfg.batch_size > len(images))
            x, y = images[idx], targets[idx]
            if cfg.flip_augment:
                x, y = _flip(list(x), list(y), rng)
            logits = net.forward(x, train=True)
            loss, grad = region_loss(logits, y, loss_cfg)
            _check_finite(loss, it)
            net.zero_grad()
            net.backward(grad)
            sgd_step(params, state, lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
            result.losses.append(loss)
            result.lrs.append(lr)
            result.epochs.append(epoch)
            if callback is not None:
                callback(it, epoch, loss)
            it += 1
        log.info("epoch %d lr %.5f loss %.5f", epoch, lr,
                 float(np.mean(result.losses[-cfg.iterations_per_epoch:])))
    net.clear_cache()
    return result


def grade_targets(grades, positive_class: str = "HGG") -> np.ndarray:
    grades = list(grades)
    bad = set(grades) - set(GRADES)
    if bad:
        raise ValueError(f"unknown grade labels {sorted(bad)}")
    return np.array([g == positive_class for g in grades], dtype=np.float64)


def train_classifier(net: Module, images: np.ndarray, grades,
                     cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None,
                     callback=None) -> TrainResult:
    """Grade-classification training with stratified batches.

    One epoch is one pass of stratified batches over the dataset.
    """
    cfg = TrainConfig.classifier() if cfg is None else cfg
    images = np.asarray(images, dtype=np.float32)
    grades = list(grades)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if loss_cfg is None:
        loss_cfg = LossConfig(pos_weight=pos_weight_from_grades(grades))
    y = grade_targets(grades, loss_cfg.positive_class)
    rng = make_rng(cfg.seed)
    state = SGDState()
    params = [p for p in net.parameters() if not p.frozen]
    result = TrainResult([], [], [])
    it = 0
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent)
        for idx in stratified_batches(grades, cfg.batch_size, rng):
            logits = net.forward(images[idx], train=True, rng=rng)
            loss, grad = classifier_loss(logits, y[idx], loss_cfg.pos_weight)
            _check_finite(loss, it)
            net.zero_grad()
            net.backward(grad)
            sgd_step(params, state, lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
            result.losses.append(loss)
            result.lrs.append(lr)
            result.epochs.append(epoch)
            if callback is not None:
                callback(it, epoch, loss)
            it += 1
    net.clear_cache()
    return result


def soft_dice(probs: np.ndarray, gt: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-channel soft Dice of probabilities ``(..., C, D, H, W)`` against binary masks."""
    axes = (-3, -2, -1)
    inter = (probs * gt).sum(axis=axes)
    return (2 * inter + eps) / (probs.sum(axis=axes) + gt.sum(axis=axes) + eps)
