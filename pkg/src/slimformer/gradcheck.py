"""Finite-difference validation of tape gradients.

The estimator is the plain central difference (f(x+h) - f(x-h)) / 2h applied
entry by entry, recomputing the full forward pass each time. It never touches
the backward rules it is checking.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, backward


def finite_difference_grads(f, params, step: float = 1e-5):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each param.

    ``f`` must recompute the loss from the params' current ``data``; the
    buffers are perturbed in place and restored.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_grad_error(f, params, step: float = 1e-5) -> float:
    """Largest relative discrepancy between tape and finite-difference grads.

    Per entry the error is |ad - fd| / max(1, |ad|, |fd|), i.e. relative for
    large gradients and absolute near zero.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    fd = finite_difference_grads(f, params, step=step)
    worst = 0.0
    for p, g_fd in zip(params, fd):
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
        err = np.abs(g_ad - g_fd) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def check_gradients(f, params, step: float = 1e-5, rtol: float = 1e-4) -> float:
    """Assert tape gradients of ``f`` match finite differences within rtol."""
    err = max_grad_error(f, params, step=step)
    if err > rtol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} > {rtol:.1e}")
    return err
