"""Central finite-difference checks for the autodiff engine.

The numerical side only ever calls the forward function, so it is independent
of the backward implementations being checked.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward

__all__ = ["numerical_grad", "relative_error", "check_gradients", "directional_check"]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def _evaluate(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> float:
    return float(fn(*[Tensor(a) for a in arrays]).data.sum())


def numerical_grad(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    wrt: int,
    eps: float = 1e-6,
    indices: Optional[Sequence[tuple]] = None,
) -> np.ndarray:
    """Central differences of ``sum(fn(*arrays))`` w.r.t. ``arrays[wrt]``.

    With ``indices`` only those entries are perturbed (others stay 0).
    """
    work = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = work[wrt]
    grad = np.zeros_like(target)
    coords = indices if indices is not None else list(np.ndindex(target.shape))
    for idx in coords:
        orig = target[idx]
        target[idx] = orig + eps
        up = _evaluate(fn, work)
        target[idx] = orig - eps
        down = _evaluate(fn, work)
        target[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    loss = out if out.size == 1 else out.sum()
    backward(loss, leaves)
    return [leaf.grad for leaf in leaves]


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-6,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[float]:
    """Relative error between analytic and central-difference gradients, per input.

    ``max_entries`` subsamples the perturbed coordinates of large inputs.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(fn, arrays)
    errors = []
    for i, a in enumerate(arrays):
        a = np.asarray(a)
        indices = None
        if max_entries is not None and a.size > max_entries:
            flat = rng.choice(a.size, size=max_entries, replace=False)
            indices = [np.unravel_index(f, a.shape) for f in flat]
        numeric = numerical_grad(fn, arrays, i, eps, indices)
        analytic = grads[i]
        if indices is not None:
            sel = tuple(np.array(ix) for ix in zip(*indices))
            errors.append(relative_error(analytic[sel], numeric[sel]))
        else:
            errors.append(relative_error(analytic, numeric))
    return errors


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-6,
) -> float:
    """Compare ``grad . v`` with the central difference of the loss along a random ``v``.

    ``params`` are mutated in place during the check and restored afterwards.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss, params)
    directions = [rng.standard_normal(p.shape) for p in params]
    analytic = float(sum(np.sum(p.grad * d) for p, d in zip(params, directions)))
    originals = [p.data.copy() for p in params]
    for p, d, o in zip(params, directions, originals):
        p.data = o + eps * d
    up = loss_fn().item()
    for p, d, o in zip(params, directions, originals):
        p.data = o - eps * d
    down = loss_fn().item()
    for p, o in zip(params, originals):
        p.data = o
        p.grad = None
    numeric = (up - down) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
