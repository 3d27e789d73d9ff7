"""Sampling schedulers: accuracy-driven (dynamic) and step-decay (vanilla).

All functions take an explicit ``numpy.random.Generator``.  Decoder-input
index 0 (BOS) and padding slots are never eligible for replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dysi.errors import ConfigError, DegenerateInputError

TEACHER_FORCING = "teacher-forcing"
VANILLA_SS = "vanilla-ss"
DYNAMIC = "dynamic"

EXPONENTIAL = "exponential"
LINEAR = "linear"


@dataclass
class SchedulerConfig:
    kind: str = DYNAMIC
    beta: float = 0.5
    decay_scheme: str = EXPONENTIAL
    k: float = 0.985
    decay_unit: int = 100
    c: float = 1e-4
    eps_min: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (TEACHER_FORCING, VANILLA_SS, DYNAMIC):
            raise ConfigError(f"unknown scheduler kind {self.kind!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")
        if self.decay_scheme not in (EXPONENTIAL, LINEAR):
            raise ConfigError(f"unknown decay scheme {self.decay_scheme!r}")
        if not 0.0 < self.k < 1.0:
            raise ConfigError("exponential decay k must be in (0, 1)")
        if self.decay_unit <= 0:
            raise ConfigError("decay_unit must be positive")
        if not 0.0 <= self.eps_min <= 1.0:
            raise ConfigError("eps_min must be in [0, 1]")
        if self.c < 0:
            raise ConfigError("linear decay slope c must be non-negative")


@dataclass
class SchedulerDecision:
    n: int
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    acc: float = 0.0


def training_accuracy(y, y_pred, pad_mask=None) -> float:
    """Fraction of non-pad positions where the prediction matches the target."""
    y = np.asarray(y)
    y_pred = np.asarray(y_pred)
    if y.shape != y_pred.shape:
        raise ValueError(f"length mismatch {y.shape} vs {y_pred.shape}")
    keep = np.ones(y.shape, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    total = int(keep.sum())
    if total == 0:
        raise DegenerateInputError("no non-pad positions to score")
    return int(((y == y_pred) & keep).sum()) / total


def eligible_positions(pad_mask_row) -> np.ndarray:
    """Decoder-input indices that may be replaced: 1..T-1, excluding padding."""
    pad = np.asarray(pad_mask_row, dtype=bool)
    idx = np.arange(1, pad.shape[0])
    return idx[~pad[1:]]


def dynamic_sample_count(acc: float, t_eff: int, beta: float, rng: np.random.Generator,
                         n_eligible: int | None = None) -> int:
    """N = round(beta * u), u ~ U(0, acc * t_eff), clamped to the eligible count."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError("beta must be in [0, 1]")
    if not 0.0 <= acc <= 1.0:
        raise ValueError("acc must be in [0, 1]")
    if t_eff < 1:
        raise ValueError("t_eff must be >= 1")
    u = rng.uniform(0.0, acc * t_eff)
    n = int(np.rint(beta * u))
    cap = t_eff if n_eligible is None else n_eligible
    return max(0, min(n, cap))


def select_positions(eligible, n: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random ``n``-subset of ``eligible``, returned sorted."""
    eligible = np.asarray(eligible, dtype=np.int64)
    if n > eligible.size:
        raise ValueError(f"cannot choose {n} positions from {eligible.size} eligible")
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(eligible, size=n, replace=False))


def mix_sequence(target_input, predictions, positions) -> np.ndarray:
    """Replace ``target_input[j]`` with ``predictions[j-1]`` for every j in positions.

    ``predictions[t]`` is the teacher-forced argmax at output step t, which is
    the model's guess for the token that enters the decoder at input slot t+1.
    """
    target_input = np.asarray(target_input)
    predictions = np.asarray(predictions)
    positions = np.asarray(positions, dtype=np.int64)
    out = target_input.copy()
    if positions.size == 0:
        return out
    if positions.min() < 1 or positions.max() >= target_input.shape[-1]:
        raise ValueError("mix position outside the eligible range (BOS slot is fixed)")
    out[..., positions] = predictions[..., positions - 1]
    return out


def dynamic_mix_batch(target_input, predictions, target_output, tgt_pad, beta: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, list[SchedulerDecision]]:
    """Per-instance accuracy, N, positions and mixed decoder input for a batch."""
    mixed = np.asarray(target_input).copy()
    decisions = []
    for b in range(mixed.shape[0]):
        pad = tgt_pad[b]
        acc = training_accuracy(target_output[b], predictions[b], pad)
        t_eff = int((~pad).sum())
        eligible = eligible_positions(pad)
        n = dynamic_sample_count(acc, t_eff, beta, rng, n_eligible=eligible.size)
        pos = select_positions(eligible, n, rng)
        mixed[b] = mix_sequence(mixed[b], predictions[b], pos)
        decisions.append(SchedulerDecision(n=n, positions=pos, acc=acc))
    return mixed, decisions


def step_decay_epsilon(scheme: str, step: int, k: float = 0.985, decay_unit: int = 100,
                       c: float = 1e-4, eps_min: float = 0.3) -> float:
    """Probability of keeping the ground-truth token at a training step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if scheme == EXPONENTIAL:
        if not 0.0 < k < 1.0 or decay_unit <= 0:
            raise ConfigError("exponential decay needs 0 < k < 1 and decay_unit > 0")
        return k ** (step / decay_unit)
    if scheme == LINEAR:
        if c < 0 or not 0.0 <= eps_min <= 1.0:
            raise ConfigError("linear decay needs c >= 0 and eps_min in [0, 1]")
        return max(eps_min, 1.0 - c * step)
    raise ConfigError(f"unknown decay scheme {scheme!r}")


def bernoulli_mix(target_input, predictions, epsilon: float, rng: np.random.Generator,
                  pad_mask=None, return_mask: bool = False):
    """Keep each eligible ground-truth input with probability epsilon, else use the prediction."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    target_input = np.asarray(target_input)
    predictions = np.asarray(predictions)
    out = target_input.copy()
    if epsilon >= 1.0:
        return (out, np.zeros(out.shape, dtype=bool)) if return_mask else out
    eligible = np.zeros(target_input.shape, dtype=bool)
    eligible[..., 1:] = True
    if pad_mask is not None:
        eligible &= ~np.asarray(pad_mask, dtype=bool)
    replace = (rng.random(target_input.shape) >= epsilon) & eligible
    shifted = np.zeros_like(target_input)
    shifted[..., 1:] = predictions[..., :-1]
    out[replace] = shifted[replace]
    return (out, replace) if return_mask else out


def current_epsilon(cfg: SchedulerConfig, step: int) -> float | None:
    """Current epsilon for vanilla scheduled sampling, None otherwise."""
    if cfg.kind != VANILLA_SS:
        return None
    return step_decay_epsilon(cfg.decay_scheme, step, cfg.k, cfg.decay_unit, cfg.c, cfg.eps_min)
