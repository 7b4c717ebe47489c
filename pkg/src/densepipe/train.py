"""Epoch loop with class-weighted loss, early stopping and transfer learning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import checkpoint_from_model
from .errors import CheckpointMismatchError, ConfigError, DataError, TrainingAborted
from .model import build_model, forward, infer_logits
from .optim import KINDS, make_optimizer_state, step_model
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    optimizer: str = "adam"
    dropout_rate: float = 0.5
    seed: int = 0
    early_stop_patience: int = 5
    class_weighting: str = "inverse_frequency"

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in KINDS:
            raise ConfigError(f"optimizer must be one of {KINDS}, got {self.optimizer!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ConfigError(f"class_weighting must be 'none' or 'inverse_frequency', "
                              f"got {self.class_weighting!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    def __len__(self):
        return len(self.records)


def compute_class_weights(source, num_classes=None):
    """Inverse-frequency weights ``N / (C * N_c)``.

    ``source`` is a manifest (anything with ``labels()`` and ``classes``) or
    a sequence of integer labels.
    """
    if hasattr(source, "label_indices"):
        labels = np.asarray(source.label_indices())
        num_classes = len(source.classes) if num_classes is None else num_classes
    else:
        labels = np.asarray(source, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    if num_classes < 1 or np.any(counts == 0):
        empty = [i for i, c in enumerate(counts) if c == 0]
        raise DataError(f"cannot weight classes with no samples: {empty}")
    return counts.sum() / (num_classes * counts.astype(np.float64))


def should_stop(history, patience):
    """True once ``patience`` epochs have passed without a strictly lower validation loss."""
    losses = history.val_losses if isinstance(history, TrainHistory) else list(history)
    if patience <= 0 or not losses:
        return False
    best = 0
    for i, v in enumerate(losses):
        if v < losses[best]:
            best = i
    return (len(losses) - 1 - best) >= patience


def evaluate_loss(model, x, y, class_weights=None, batch_size=64):
    """Eval-mode weighted loss and accuracy over a full set."""
    logits = infer_logits(model, x, batch_size)
    loss, _ = ops.cross_entropy_with_grad(logits, np.asarray(y), class_weights)
    acc = float(np.mean(np.argmax(logits, axis=1) == y)) if len(y) else 0.0
    return loss, acc


def train(model, train_set, val_set, config, class_weights=None, on_epoch_end=None,
          evaluator=evaluate_loss):
    """Fit ``model`` and return ``(history, best_checkpoint)``.

    ``train_set``/``val_set`` expose ``x`` (N, C, S, S) and ``y`` (N,).
    The model is left holding the best-validation-loss weights.
    ``on_epoch_end(epoch, model, history)`` runs after each validation pass.
    ``evaluator(model, x, y, weights, batch_size) -> (loss, acc)`` scores
    the validation set; tests swap it to inject loss curves.
    """
    config.validate()
    x, y = np.asarray(train_set.x), np.asarray(train_set.y)
    vx, vy = np.asarray(val_set.x), np.asarray(val_set.y)
    if len(y) == 0 or len(vy) == 0:
        raise DataError("training and validation sets must be nonempty")
    model.set_dropout_rate(config.dropout_rate)
    num_classes = model.config.num_classes
    if class_weights is None and config.class_weighting == "inverse_frequency":
        class_weights = compute_class_weights(y, num_classes)
    weights = np.ones(num_classes) if class_weights is None else np.asarray(class_weights, float)

    rng = Rng(config.seed)
    opt = make_optimizer_state(config.optimizer, {k: t.data for k, t in model.params.items()})
    history = TrainHistory()
    best_loss = math.inf
    best_state = model.state_arrays()
    n = len(y)
    bs = config.batch_size

    for epoch in range(config.epochs):
        order = rng.stream("shuffle", epoch).permutation(n)
        drop = rng.stream("dropout", epoch)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            logits, _ = forward(model, x[idx], "train", drop)
            loss = ops.softmax_cross_entropy(logits, y[idx], weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {lo}")
            model.zero_grad()
            loss.backward()
            step_model(model, opt, config.learning_rate)
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))

        val_loss, val_acc = evaluator(model, vx, vy, weights, max(bs, 64))
        if not math.isfinite(val_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}")
        history.records.append(EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc))
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = model.state_arrays()
        log.info("epoch %d train_loss %.6f train_acc %.4f val_loss %.6f val_acc %.4f",
                 epoch, loss_sum / n, correct / n, val_loss, val_acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, history)
        if epoch + 1 < config.epochs and should_stop(history, config.early_stop_patience):
            history.stopped_early = True
            break

    model.load_state_arrays(best_state)
    model.zero_grad()
    ckpt = checkpoint_from_model(model, meta={
        "seed": config.seed, "epoch": history.best_epoch, "val_loss": best_loss,
        "class_weights": [float(w) for w in weights]})
    return history, ckpt


# ------------------------------------------------------------- transfer


@dataclass
class FreezePolicy:
    mode: str = "none"  # none | backbone | explicit
    names: list = field(default_factory=list)

    def resolve(self, model):
        if self.mode == "none":
            return []
        if self.mode == "backbone":
            return model.backbone_param_names()
        if self.mode == "explicit":
            unknown = [n for n in self.names if n not in model.params]
            if unknown:
                raise ConfigError(f"cannot freeze unknown parameters: {unknown[:5]}")
            return list(self.names)
        raise ConfigError(f"freeze mode must be none, backbone or explicit, got {self.mode!r}")


def transfer(base, new_head, num_classes, freeze, seed):
    """New model reusing ``base``'s backbone with a freshly initialized head.

    Backbone parameters and BN statistics are copied from the checkpoint;
    head layers come from ``seed``.  Frozen parameters are skipped by the
    optimizer.
    """
    new_head.validate()
    cfg = base.model_config
    cfg.head = new_head
    cfg.num_classes = int(num_classes)
    cfg.seed = int(seed)
    model = build_model(cfg, base.kind)
    copied = {}
    for name in model.backbone_param_names() + list(model.buffers):
        if name not in base.tensors:
            raise CheckpointMismatchError(f"base checkpoint lacks backbone tensor {name!r}")
        src = base.tensors[name]
        target = model.params[name].data if name in model.params else model.buffers[name]
        if src.shape != target.shape:
            raise CheckpointMismatchError(
                f"backbone tensor {name!r}: checkpoint {src.shape} vs model {target.shape}")
        copied[name] = src
    model.load_state_arrays(copied)
    model.set_frozen(freeze.resolve(model))
    return model
