"""Masked, weighted cross-entropy training for unmasking predictors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .interpolant import VocabSpec, corrupt, corrupt_coupled, corrupt_smoothed
from .schedule import CouplingSpec, Schedule, SmoothingSpec, unmask_rate

WEIGHT_MODES = ("unit", "elbo")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    weight_mode: str = "unit"
    epsilon: float = 1e-3
    cond_dropout_p: float = 0.1
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 1000
    masking_ce: bool = True
    grad_clip_norm: float = 2.0
    smoothing_s: float = 0.0
    coupling_ratio: float = 0.0

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon!r}")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError(f"cond_dropout_p must lie in [0, 1], got {self.cond_dropout_p!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        # validated by their own constructors
        SmoothingSpec(self.smoothing_s)
        CouplingSpec(self.coupling_ratio)


def weight(config: TrainConfig, schedule: Schedule, t: float) -> float:
    if config.weight_mode == "unit":
        return 1.0
    return unmask_rate(schedule, t)


def _select(masked, shape, masking_ce: bool) -> np.ndarray:
    return np.asarray(masked, dtype=bool) if masking_ce else np.ones(shape, dtype=bool)


def masked_ce(logits, target, masked, w=1.0, masking_ce: bool = True):
    """``w * sum of -log softmax(logits)[target]`` over the selected positions.

    Selected positions are the masked ones, or every position when
    ``masking_ce`` is false. Batched input ``(N, L, K)`` returns one loss per
    sequence; a single ``(L, K)`` input returns a float.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 2
    if single:
        logits = logits[None]
    target = np.atleast_2d(np.asarray(target, dtype=np.int64))
    select = np.atleast_2d(_select(masked, target.shape, masking_ce))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, target[..., None], axis=-1)[..., 0]
    per_token = np.where(select, log_z - picked, 0.0)
    loss = np.asarray(w, dtype=np.float64).reshape(-1) * per_token.sum(axis=-1)
    return float(loss[0]) if single else loss


def masked_ce_grad(logits, target, masked, w=1.0, masking_ce: bool = True) -> np.ndarray:
    """Gradient of the summed :func:`masked_ce` with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    select = _select(masked, target.shape, masking_ce)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    np.put_along_axis(probs, target[..., None],
                      np.take_along_axis(probs, target[..., None], axis=-1) - 1.0, axis=-1)
    w = np.asarray(w, dtype=np.float64)
    if logits.ndim == 3:
        w = np.broadcast_to(w.reshape(-1), (logits.shape[0],))[:, None, None]
    return probs * select[..., None] * w


def sample_time(config: TrainConfig, rng: np.random.Generator, size=None):
    return rng.uniform(config.epsilon, 1.0 - config.epsilon, size=size)


def dropout_cond(cond, config: TrainConfig, rng: np.random.Generator, vocab: VocabSpec):
    """Replace the condition by the null token with probability ``cond_dropout_p``."""
    cond = np.asarray(cond)
    drop = rng.random(cond.shape) < config.cond_dropout_p
    out = np.where(drop, vocab.null_cond_id, cond)
    return int(out) if out.ndim == 0 else out


def corrupt_batch(x1: np.ndarray, ts: np.ndarray, schedule: Schedule, config: TrainConfig,
                  rng: np.random.Generator, vocab: VocabSpec) -> np.ndarray:
    """Corrupt each row of ``x1`` at its own time ``ts[i]``."""
    if config.coupling_ratio == 0 and config.smoothing_s == 0:
        keep_p = np.array([schedule.kappa(t) for t in ts])
        return np.where(rng.random(x1.shape) < keep_p[:, None], x1, vocab.mask_id)
    rows = []
    for row, t in zip(x1, ts):
        if config.coupling_ratio > 0:
            state = corrupt_coupled(row, t, schedule, CouplingSpec(config.coupling_ratio), rng, vocab)
        elif config.smoothing_s > 0:
            state = corrupt_smoothed(row, t, schedule, SmoothingSpec(config.smoothing_s), rng, vocab)
        else:
            state = corrupt(row, t, schedule, rng, vocab)
        rows.append(state.x_t)
    return np.stack(rows)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))


class Trainer:
    """SGD with momentum and global-norm clipping over a :class:`MaskedTokenNet`."""

    def __init__(self, net, config: TrainConfig, schedule: Schedule):
        self.net = net
        self.config = config
        self.schedule = schedule
        self.velocity = {name: np.zeros_like(p) for name, p in net.params.items()}
        self.step_count = 0

    def step(self, batch, rng: np.random.Generator, cond=None) -> dict:
        """One update on a batch of clean sequences; returns the step record."""
        cfg, net = self.config, self.net
        batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
        if len(batch) == 0:
            raise TrainingError("empty training batch")
        vocab = net.vocab
        ts = sample_time(cfg, rng, size=len(batch))
        x_t = corrupt_batch(batch, ts, self.schedule, cfg, rng, vocab)
        masked = x_t == vocab.mask_id
        weights = np.array([weight(cfg, self.schedule, t) for t in ts])
        conds = None if cond is None else dropout_cond(cond, cfg, rng, vocab)
        t_in = ts if net.timestep else None

        loss_sum, grads = net.loss_and_grad(x_t, batch, masked, weights, t=t_in, cond=conds,
                                            masking_ce=cfg.masking_ce)
        loss = loss_sum / len(batch)
        if not math.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss!r} at step {self.step_count}: "
                f"t={ts.tolist()}, weights={weights.tolist()}, masked={int(masked.sum())}"
            )
        for g in grads.values():
            g /= len(batch)
        norm = global_norm(grads)
        scale = min(1.0, cfg.grad_clip_norm / norm) if norm > 0 else 1.0
        for name in sorted(grads):
            g = grads[name] * scale
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            net.params[name] -= cfg.learning_rate * v
        record = {
            "step": self.step_count,
            "t_mean": float(ts.mean()),
            "loss": float(loss),
            "grad_norm": float(norm),
            "clipped_norm": float(norm * scale),
            "masked_fraction": float(masked.mean()),
        }
        self.step_count += 1
        return record


def train_step(net, batch, config: TrainConfig, schedule: Schedule, rng: np.random.Generator,
               cond=None, trainer: Trainer | None = None):
    """Single update; returns ``(net, loss)``. Pass ``trainer`` to keep momentum."""
    trainer = trainer or Trainer(net, config, schedule)
    record = trainer.step(batch, rng, cond)
    return net, record["loss"]


def training_data(dataset):
    """Sequences (and class labels, if any) a predictor is trained on."""
    if dataset.paired:
        return dataset.joint().support, None
    return dataset.support, dataset.labels


def train(net, dataset, config: TrainConfig, schedule: Schedule, rng: np.random.Generator,
          log=None) -> Trainer:
    """Run ``config.steps`` updates on batches drawn from ``dataset``."""
    support, labels = training_data(dataset)
    trainer = Trainer(net, config, schedule)
    for _ in range(config.steps):
        idx = dataset.sample(config.batch_size, rng)
        cond = None if labels is None else labels[idx]
        record = trainer.step(support[idx], rng, cond)
        if log is not None:
            log(record)
    return trainer


def masked_token_ce(predictor, dataset, n: int, schedule: Schedule, rng: np.random.Generator,
                    epsilon: float = 1e-3) -> float:
    """Mean cross-entropy per masked token on fresh corruptions of ``n`` draws."""
    support, labels = training_data(dataset)
    vocab = predictor.vocab
    idx = dataset.sample(n, rng)
    x1 = support[idx]
    ts = rng.uniform(epsilon, 1.0 - epsilon, size=n)
    x_t = corrupt_batch(x1, ts, schedule, TrainConfig(), rng, vocab)
    masked = x_t == vocab.mask_id
    cond = None if labels is None else labels[idx]
    logits = predictor.logits(x_t, ts if predictor.timestep else None, cond)
    total = masked_ce(logits, x1, masked).sum()
    return float(total / max(int(masked.sum()), 1))
