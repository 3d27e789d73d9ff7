"""Adam and the warmup / inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dysi.errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, beta1=0.9, beta2=0.98, eps=1e-8) -> "OptimizerState":
        m = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        v = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        return cls(m=m, v=v, step=0, beta1=beta1, beta2=beta2, eps=eps)


def _arr(p):
    # accepts raw arrays or Tensors; ndarray.data is a memoryview, not the payload
    return p if isinstance(p, np.ndarray) else p.data


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """One in-place Adam update with bias correction (no weight decay).

    Parameters without a gradient are treated as having a zero gradient so
    their moments still decay.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        w = _arr(p)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ShapeError(f"grad for {name!r} has shape {g.shape}, param {w.shape}")
        dt = w.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        w -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


def lr_inverse_sqrt(step: int, warmup: int, peak: float) -> float:
    if warmup <= 0:
        raise ConfigError("warmup must be positive")
    if step < 1:
        raise ConfigError("step must be >= 1")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)
