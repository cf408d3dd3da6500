"""Adam and learning-rate schedules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalError

log = logging.getLogger(__name__)


def lr_schedule(epoch: int, initial: float = 0.001, decay: float = 0.99) -> float:
    """``initial * decay ** epoch``."""
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    return initial * decay ** epoch


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 0.001, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, **kw)


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update. Returns ``(new_params, state)``; ``state`` is updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("parameter, gradient and moment lists differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            name = names[k] if names else f"#{k}"
            raise NumericalError(f"non-finite gradient for parameter block {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out, state


def clip_global_norm(grads, max_norm: float = 10.0):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns ``(grads, norm)``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        log.info("gradient norm %.4g clipped to %.4g", norm, max_norm)
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm
