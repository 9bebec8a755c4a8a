"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autograd import Tensor, no_grad, zero_grads


def fd_check(f: Callable[[], Tensor], params: Iterable[Tensor],
             h: float = 1e-6) -> float:
    """Compare analytic grads of f() against central differences.

    f is re-evaluated with each element of each trainable param perturbed by
    +/-h; frozen (requires_grad=False) params are excluded from the check.
    Returns max over elements of |g_fd - g| / max(|g_fd|, |g|, 1e-8).
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"fd step h={h} outside [1e-7, 1e-4]")
    params = list(params)
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            if not p.requires_grad:
                continue
            if ga is None:
                ga = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().data.item()
                flat[i] = orig - h
                f_minus = f().data.item()
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * h)
                rel = abs(g_fd - gflat[i]) / max(abs(g_fd), abs(gflat[i]), 1e-8)
                if rel > worst:
                    worst = rel
    return worst
