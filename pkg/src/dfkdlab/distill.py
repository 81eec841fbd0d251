"""Knowledge distillation of a student on synthetic data, and top-1 evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nets import SGD, ClassifierModel, TrainHistory, TrainingDivergedError, _batches, cosine_lr, cross_entropy, student_model, update_running_stats
from .tensor import Tape, Tensor


class RealDataError(ValueError):
    """Raised when non-synthetic samples are handed to the data-free student trainer."""


def kd_loss(teacher_logits, student_logits, temperature: float = 4.0) -> Tensor:
    """``tau^2 * mean_b KL(softmax(t / tau) || softmax(s / tau))``.

    The teacher side is treated as a constant; only ``student_logits`` receives gradient.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    if t.shape != s.shape or t.ndim != 2:
        raise ValueError(f"teacher logits {t.shape} and student logits {s.shape} must match (B x K)")
    log_pt = T.log_softmax(Tensor(t / temperature), axis=1).data
    log_ps = T.log_softmax(s * (1.0 / temperature), axis=1)
    pt = np.exp(log_pt)
    kl = T.sum((log_ps * -1.0 + log_pt) * pt, axis=1)
    return T.mean(kl) * (temperature ** 2)


@dataclass
class DistillConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 4.0
    label_weight: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 0


def train_student(teacher: ClassifierModel, synthetic, cfg: DistillConfig | None = None,
                  student: ClassifierModel | None = None, allow_real: bool = False):
    """Distill ``teacher`` into ``student`` on ``synthetic`` samples.

    Returns ``(student, history)``.  Sets not flagged ``synthetic`` are refused
    unless ``allow_real`` is given (used only by sanity checks).
    """
    cfg = cfg or DistillConfig()
    if not synthetic.synthetic and not allow_real:
        raise RealDataError("train_student only accepts synthetic sets (pass allow_real=True to override)")
    if student is None:
        student = student_model(teacher.d_in, teacher.n_classes, seed=cfg.seed)
    history = TrainHistory()
    x = synthetic.x
    if cfg.epochs == 0 or len(x) == 0:
        return student, history
    t_logits = teacher.logits(x)
    opt = SGD(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 51])
    steps_per_epoch = -(-len(x) // cfg.batch_size)
    total_steps, step = cfg.epochs * steps_per_epoch, 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            with Tape() as tape:
                out = student.forward(x[idx], mode="train")
                loss = kd_loss(t_logits[idx], out.logits, cfg.temperature)
                if cfg.label_weight:
                    loss = loss + cross_entropy(out.logits, synthetic.y[idx]) * cfg.label_weight
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, float(loss.data))
            opt.step(cosine_lr(cfg.lr, step, total_steps))
            step += 1
            update_running_stats(student, out.bn_stats)
            total += float(loss.data) * len(idx)
            count += len(idx)
        history.losses.append(total / max(count, 1))
    student.trained = True
    student.train_config = asdict(cfg)
    return student, history


def evaluate_accuracy(model, test) -> float:
    """Top-1 fraction of ``test`` labels recovered by ``model.predict``."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return float((model.predict(test.x) == test.y).mean())
