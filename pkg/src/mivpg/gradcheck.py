"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||).

    Returns 0 when both norms are below ``zero_tol``: such gradients are zero
    up to finite-difference resolution (e.g. key biases, which softmax ignores)
    and their ratio is noise over noise.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < zero_tol:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Iterable[int] | None = None) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.data`` in place.

    ``indices`` restricts the probe to a subset of flat positions; the
    remaining entries of the result are NaN.
    """
    flat = param.data.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn().item()
        flat[i] = old - h
        down = loss_fn().item()
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(param.shape)


def analytic_grads(loss_fn: Callable[[], Tensor], params: Iterable[Tensor]) -> list[np.ndarray]:
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_gradients(loss_fn: Callable[[], Tensor], named: dict[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error per named parameter.

    With ``max_entries`` only that many randomly chosen entries of each
    parameter are probed (the analytic gradient is compared on those).
    """
    names = list(named)
    grads = analytic_grads(loss_fn, [named[n] for n in names])
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, g in zip(names, grads):
        p = named[name]
        if max_entries is None or p.data.size <= max_entries:
            num = numerical_grad(loss_fn, p, h)
            errors[name] = relative_error(g, num)
        else:
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
            num = numerical_grad(loss_fn, p, h, indices=idx).reshape(-1)[idx]
            errors[name] = relative_error(g.reshape(-1)[idx], num)
    return errors
