"""Finite-difference gradient oracle.

The check is deliberately independent of the reverse-mode path: it re-runs
the forward function at shifted parameter values and compares central
differences against whatever ``backward`` produced.
"""

from __future__ import annotations

import numpy as np

from .tensor import no_grad

__all__ = ["finite_diff_check"]


def finite_diff_check(f, params, h=1e-5, max_coords_per_param=None, seed=0,
                      corrupt_sign=False):
    """Max relative error between autodiff and central-difference gradients.

    f:      zero-argument callable returning a scalar Tensor; it must read
            the current ``.data`` of ``params`` on every call.
    params: list of Tensors with requires_grad=True.
    h:      central-difference step.
    max_coords_per_param: probe at most this many coordinates per tensor
            (seeded subsample); None checks every coordinate.
    corrupt_sign: test hook; flips the sign of the autodiff gradient before
            comparing, which must make the check fail.

    Returns max over probed coordinates of
    |g_autodiff - g_central| / max(1, |g_central|).
    """
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise ValueError("function value is not finite at the base point")
    out.backward()
    auto = [p.grad_array().copy() for p in params]
    if corrupt_sign:
        auto = [-g for g in auto]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g_auto in zip(params, auto):
        n = p.data.size
        if n == 0:
            continue
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                up = float(f().data)
            flat[c] = orig - h
            with no_grad():
                down = float(f().data)
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("function value is not finite at a probe point")
            g_fd = (up - down) / (2.0 * h)
            err = abs(g_auto.reshape(-1)[c] - g_fd) / max(1.0, abs(g_fd))
            if err > worst:
                worst = err
    return worst
