"""Imitation loss, the combined objective, and one optimizer step per objective.

Objectives share a single code path so they reduce to each other exactly:

* ``mle``         - teacher forcing, label-smoothed NLL only
* ``vanilla-ss``  - step-decayed Bernoulli mixing, NLL only
* ``dynamic-ss``  - accuracy-driven mixing, NLL only
* ``dysi``        - accuracy-driven mixing, NLL + alpha * KL(expert || learner)

The teacher-forced pass always runs (dropout off, no graph) so training
accuracy and the expert/learner gap are logged identically for every objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dysi import scheduling as S
from dysi import tensor as T
from dysi.data import ParallelBatch
from dysi.errors import ConfigError, NumericError, ShapeError
from dysi.model import StepDistributions, Transformer, greedy_predictions
from dysi.optim import OptimizerState, adam_step
from dysi.tensor import Tensor

OBJECTIVES = ("mle", "vanilla-ss", "dynamic-ss", "dysi")


@dataclass
class LossBreakdown:
    mle: float
    imitation: float
    total: float
    alpha: float
    token_count: int


@dataclass
class StepReport:
    loss: LossBreakdown
    acc: float
    mean_n: float
    epsilon: float | None
    lr: float


@dataclass
class ObjectiveConfig:
    objective: str = "dysi"
    alpha: float = 0.5
    label_smoothing: float = 0.1
    scheduler: S.SchedulerConfig | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.scheduler is None:
            self.scheduler = S.SchedulerConfig()

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.objective == "dysi" else 0.0


def imitation_loss(expert: StepDistributions, learner: StepDistributions, pad_mask=None) -> Tensor:
    """Per-token mean of KL(expert || learner) over non-pad steps.

    The expert side is a constant: gradients reach parameters only through
    the learner's log-probabilities.
    """
    if expert.probs.shape != learner.probs.shape:
        raise ShapeError(f"expert {expert.probs.shape} vs learner {learner.probs.shape}")
    if pad_mask is None:
        pad_mask = learner.pad_mask
    p = T.stop_gradient(Tensor(expert.probs, dtype=learner.log_probs.dtype))
    kl = T.kl_divergence(p, learner.log_probs, log_p=expert.log_probs.data)
    return T.masked_mean(kl, ~np.asarray(pad_mask, dtype=bool))


def mle_loss(learner: StepDistributions, target_output, pad_mask, label_smoothing: float) -> Tensor:
    nll = T.label_smoothed_nll(learner.log_probs, target_output, label_smoothing)
    return T.masked_mean(nll, ~np.asarray(pad_mask, dtype=bool))


def total_loss(mle, il, alpha: float, token_count: int = 0) -> LossBreakdown:
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    mle_v = mle.item() if isinstance(mle, Tensor) else float(mle)
    il_v = il.item() if isinstance(il, Tensor) else float(il)
    total = mle_v if alpha == 0 else mle_v + alpha * il_v
    return LossBreakdown(mle=mle_v, imitation=il_v, total=total, alpha=alpha, token_count=token_count)


def _combined(mle: Tensor, il: Tensor, alpha: float) -> Tensor:
    # alpha == 0 keeps the imitation branch out of the graph entirely
    return mle if alpha == 0 else mle + alpha * il


def build_decoder_input(cfg: ObjectiveConfig, batch: ParallelBatch, predictions: np.ndarray,
                        step: int, rng: np.random.Generator):
    """Mixed decoder input, mean replacement count, and epsilon (vanilla only)."""
    sched = cfg.scheduler
    tin, tpad = batch.target_input, batch.target_pad
    if cfg.objective == "mle" or sched.kind == S.TEACHER_FORCING:
        return tin.copy(), 0.0, None
    if cfg.objective == "vanilla-ss":
        eps = S.step_decay_epsilon(sched.decay_scheme, step, sched.k, sched.decay_unit,
                                   sched.c, sched.eps_min)
        mixed, replaced = S.bernoulli_mix(tin, predictions, eps, rng, tpad, return_mask=True)
        return mixed, float(replaced.sum(axis=-1).mean()), eps
    mixed, decisions = S.dynamic_mix_batch(tin, predictions, batch.target_output, tpad,
                                           sched.beta, rng)
    return mixed, float(np.mean([d.n for d in decisions])), None


def compute_losses(model: Transformer, batch: ParallelBatch, cfg: ObjectiveConfig, step: int,
                   sched_rng: np.random.Generator, dropout_rng: np.random.Generator | None):
    """Forward both passes; returns (total tensor, breakdown, acc, mean_N, epsilon, mixed)."""
    expert = model.forward_teacher_forced(batch.source, batch.source_pad,
                                          batch.target_input, batch.target_pad)
    predictions = greedy_predictions(expert)
    acc = S.training_accuracy(batch.target_output, predictions, batch.target_pad)
    mixed, mean_n, eps = build_decoder_input(cfg, batch, predictions, step, sched_rng)
    learner = model.forward_operative(batch.source, batch.source_pad, mixed,
                                      batch.target_pad, rng=dropout_rng)
    mle = mle_loss(learner, batch.target_output, batch.target_pad, cfg.label_smoothing)
    il = imitation_loss(expert, learner, batch.target_pad)
    alpha = cfg.effective_alpha
    total = _combined(mle, il, alpha)
    tokens = int((~batch.target_pad).sum())
    breakdown = total_loss(mle, il, alpha, tokens)
    breakdown.total = total.item()
    return total, breakdown, acc, mean_n, eps, mixed


def train_step(model: Transformer, opt: OptimizerState, batch: ParallelBatch, cfg: ObjectiveConfig,
               lr: float, step: int, sched_rng: np.random.Generator,
               dropout_rng: np.random.Generator | None) -> StepReport:
    """One full update: expert pass, mixing, learner pass, loss, backward, Adam."""
    total, breakdown, acc, mean_n, eps, _ = compute_losses(
        model, batch, cfg, step, sched_rng, dropout_rng)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss {breakdown.total} at step {step}")
    for p in model.params.values():
        p.zero_grad()
    total.backward()
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adam_step(model.params, grads, opt, lr)
    for p in model.params.values():
        p.zero_grad()
    return StepReport(loss=breakdown, acc=acc, mean_n=mean_n, epsilon=eps, lr=lr)


def dysi_train_step(model: Transformer, opt: OptimizerState, batch: ParallelBatch,
                    scheduler: S.SchedulerConfig, alpha: float, lr: float, step: int,
                    sched_rng: np.random.Generator, dropout_rng=None,
                    label_smoothing: float = 0.1) -> StepReport:
    cfg = ObjectiveConfig("dysi", alpha, label_smoothing, scheduler)
    return train_step(model, opt, batch, cfg, lr, step, sched_rng, dropout_rng)
