"""Adam optimizer over named parameter lists."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["AdamState", "adam_step", "clip_global_norm"]


class AdamState:
    """Per-parameter moment buffers plus the shared step counter.

    Moments are kept by position in the parameter list, so the caller must
    pass the same ordered list on every step (named_parameters guarantees a
    stable order).
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = None
        self.v = None

    def ensure(self, params):
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ValueError("optimizer state does not match the parameter list")


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place.

    ``grads`` aligns with ``params``; a ``None`` entry means a zero gradient
    (the moments still decay).  Non-finite gradients raise immediately: no
    silent clipping.
    """
    state.ensure(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        v *= state.beta2
        if g is not None:
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient at parameter index {i}")
            m += (1.0 - state.beta1) * g
            v += (1.0 - state.beta2) * (g * g)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        p.data -= state.lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2)
                                                   + state.eps)
    return params


def clip_global_norm(grads, max_norm):
    """Scale the gradient list so its joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return [None if g is None else g * scale for g in grads], total
