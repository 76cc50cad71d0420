"""Mini-batch SGD training with Nesterov momentum, a stepped
learning-rate schedule, and per-iteration curve capture.

The schedule multiplies the rate by ``lr_decay`` every ``decay_every``
units (epochs by default; ``decay_unit="step"`` switches to mini-batch
steps). Training always runs the full epoch budget; there is no early
stopping. Mini-batches come from a seeded shuffle each epoch and the
last short batch is kept.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import TRAIN, INFER, cross_entropy, softmax_cross_entropy_grad
from .model import ModelParams, ModelSpec, backward, forward, init_params


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay: float = 0.8
    decay_every: int = 5
    decay_unit: str = "epoch"  # "epoch" | "step"
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.initial_lr:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError(f"decay_unit must be 'epoch' or 'step', "
                             f"got {self.decay_unit!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in [0, 1), "
                             f"got {self.validation_fraction}")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate in force for a 0-based epoch (or step) index."""
    if epoch < 0:
        raise ValueError(f"epoch index must be >= 0, got {epoch}")
    return config.initial_lr * config.lr_decay ** (epoch // config.decay_every)


def sgd_nesterov_step(param: np.ndarray, grad: np.ndarray,
                      velocity: np.ndarray, lr: float, momentum: float,
                      ) -> tuple[np.ndarray, np.ndarray]:
    """One Nesterov-momentum update in the look-ahead form.

    v' = mu * v + g;  p' = p - lr * (g + mu * v')

    The stored parameters track the look-ahead point, so the gradient is
    evaluated once per step. With mu = 0 this is exactly vanilla SGD.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if not param.shape == grad.shape == velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad "
                         f"{grad.shape}, velocity {velocity.shape}")
    v_new = momentum * velocity + grad
    p_new = param - lr * (grad + momentum * v_new)
    return p_new, v_new


@dataclass(frozen=True)
class LabeledSegment:
    subject_id: str
    grade: int
    samples: np.ndarray  # (length,)


@dataclass
class CurveRow:
    iteration: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float = math.nan
    val_acc: float = math.nan


@dataclass
class TrainingCurve:
    rows: list[CurveRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "lr", "train_loss", "train_acc",
                             "val_loss", "val_acc"])
            for r in self.rows:
                writer.writerow([r.iteration, f"{r.lr:.10g}",
                                 f"{r.train_loss:.10g}", f"{r.train_acc:.10g}",
                                 f"{r.val_loss:.10g}", f"{r.val_acc:.10g}"])


def _evaluate(params: ModelParams, x: np.ndarray, grades: np.ndarray,
              batch_size: int) -> tuple[float, float]:
    """Mean loss and accuracy in inference mode."""
    losses = np.empty(len(x))
    correct = 0
    for lo in range(0, len(x), batch_size):
        chunk = x[lo:lo + batch_size]
        probs = forward(params, chunk[:, :, None], mode=INFER)
        losses[lo:lo + len(chunk)] = cross_entropy(probs, grades[lo:lo + len(chunk)])
        correct += int(np.sum(np.argmax(probs, axis=1) + 1
                              == grades[lo:lo + len(chunk)]))
    return float(losses.mean()), correct / len(x)


def split_by_subject(dataset: list[LabeledSegment], fraction: float,
                     rng: np.random.Generator,
                     ) -> tuple[list[LabeledSegment], list[LabeledSegment]]:
    """Hold out whole subjects for validation; no segment-level leakage."""
    subjects = sorted({s.subject_id for s in dataset})
    n_val = int(round(len(subjects) * fraction))
    if fraction > 0 and n_val == 0 and len(subjects) > 1:
        n_val = 1
    order = rng.permutation(len(subjects))
    val_subjects = {subjects[i] for i in order[:n_val]}
    train = [s for s in dataset if s.subject_id not in val_subjects]
    val = [s for s in dataset if s.subject_id in val_subjects]
    return train, val


def train(spec: ModelSpec, dataset: list[LabeledSegment],
          config: TrainConfig) -> tuple[ModelParams, TrainingCurve]:
    """Fit the network to labeled segments for the full epoch budget.

    Batch norm runs in train mode throughout; the running statistics it
    accumulates are what inference later uses. Validation metrics are
    computed once per epoch and recorded on that epoch's last row.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for i, seg in enumerate(dataset):
        if not 1 <= seg.grade <= 4:
            raise ValueError(f"segment {i}: grade {seg.grade} out of range 1..4")
        if len(seg.samples) != spec.segment_samples:
            raise ValueError(f"segment {i}: {len(seg.samples)} samples, "
                             f"model expects {spec.segment_samples}")

    rng = np.random.default_rng(config.seed)
    train_set, val_set = split_by_subject(dataset, config.validation_fraction, rng)
    if not train_set:
        raise ValueError("validation split left no training segments")
    x_train = np.stack([s.samples for s in train_set]).astype(np.float64)
    y_train = np.array([s.grade for s in train_set])
    x_val = (np.stack([s.samples for s in val_set]).astype(np.float64)
             if val_set else None)
    y_val = np.array([s.grade for s in val_set]) if val_set else None

    params = init_params(spec, seed=config.seed)
    names = [name for name, _ in params.trainable()]
    arrays = {name: arr for name, arr in params.trainable()}
    velocity = {name: np.zeros_like(arr) for name, arr in arrays.items()}

    curve = TrainingCurve()
    iteration = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(x_train))
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb = x_train[idx][:, :, None]
            yb = y_train[idx]
            schedule_index = epoch if config.decay_unit == "epoch" else iteration
            lr = lr_at(config, schedule_index)

            probs, tape = forward(params, xb, mode=TRAIN, return_tape=True)
            batch_loss = float(np.mean(cross_entropy(probs, yb)))
            batch_acc = float(np.mean(np.argmax(probs, axis=1) + 1 == yb))
            logits_grad = softmax_cross_entropy_grad(probs, yb) / len(yb)
            grads, _ = backward(params, tape, logits_grad)
            del tape

            for name in names:
                p_new, v_new = sgd_nesterov_step(
                    arrays[name], grads[name], velocity[name],
                    lr, config.momentum)
                arrays[name][...] = p_new
                velocity[name][...] = v_new

            iteration += 1
            curve.rows.append(CurveRow(iteration, lr, batch_loss, batch_acc))
        params.epochs_trained += 1
        if x_val is not None:
            val_loss, val_acc = _evaluate(params, x_val, y_val,
                                          config.batch_size)
            curve.rows[-1].val_loss = val_loss
            curve.rows[-1].val_acc = val_acc
    return params, curve
