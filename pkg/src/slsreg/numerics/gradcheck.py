"""Central finite-difference gradient checks for tape-built scalar losses."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``param.value`` (optionally a subset of flat indices)."""
    flat = param.value.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(param.value.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """``||a - b|| / (max(||a||, ||b||) + floor)``.

    Norm-wise rather than entrywise, and ``floor`` absorbs finite-difference
    round-off on parameters whose exact gradient is zero (for instance the
    output bias of a coupling shift net, which cancels in ``F(y) - F(0)``).
    """
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / (max(np.linalg.norm(a), np.linalg.norm(b)) + floor))


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst per-parameter relative error between tape and finite-difference gradients.

    ``max_entries`` limits the finite-difference probes per parameter to a
    random subset of coordinates, and the comparison is restricted to them.
    """
    analytic = backward(loss_fn(), list(params))
    worst = 0.0
    for p in params:
        index = None
        if max_entries is not None and p.value.size > max_entries:
            index = (rng or np.random.default_rng(0)).choice(p.value.size, size=max_entries, replace=False)
        fd = numerical_grad(lambda: float(loss_fn().value), p, h, index)
        a = analytic[p].reshape(-1)
        fd = fd.reshape(-1)
        if index is not None:
            a, fd = a[index], fd[index]
        worst = max(worst, relative_error(a, fd))
    return worst
