"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np

from cmota.errors import DimensionError, NumericalError
from cmota.numerics.tensor import Tensor, grad, no_grad

logger = logging.getLogger("cmota")


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    *,
    samples_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    Returns the max over checked entries of
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``. ``samples_per_param`` checks a
    seeded random subset of each parameter's entries instead of all of them.

    Leaf data is perturbed in place for the duration of each difference and
    restored afterwards.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericalError("grad_check", f"needs float64 parameters, got {p.data.dtype}")
        p.data = np.ascontiguousarray(p.data)

    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = grad(out, params)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for i, (p, g_ad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        entries = np.arange(flat.size)
        if samples_per_param is not None and flat.size > samples_per_param:
            entries = np.sort(rng.choice(flat.size, size=samples_per_param, replace=False))
        param_worst = 0.0
        for j in entries:
            original = flat[j]
            with no_grad():
                flat[j] = original + h
                f_plus = f().item()
                flat[j] = original - h
                f_minus = f().item()
            flat[j] = original
            g_fd = (f_plus - f_minus) / (2.0 * h)
            a = float(g_flat[j])
            err = abs(a - g_fd) / max(1.0, abs(a), abs(g_fd))
            param_worst = max(param_worst, err)
        logger.debug("grad_check param %d %s: max rel err %.3e", i, p.shape, param_worst)
        worst = max(worst, param_worst)
    return worst
