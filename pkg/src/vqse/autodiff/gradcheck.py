"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, frozen_constants


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                 h: float = 1e-5) -> np.ndarray:
    """d fn / d inputs[index] by central differences (inputs are not modified)."""
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[k] = orig - h
        fm = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between backprop and finite differences.

    ``fn`` takes one :class:`Tensor` per input and returns a scalar tensor.
    Values passed through ``stop_gradient`` or ``constant_choice`` are
    recorded on the analytic pass and replayed during differencing, so the
    check compares against the function whose gradient backprop computes.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    with frozen_constants("record") as store:
        loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(inputs[i])

        def replayed(*args):
            with frozen_constants("replay", store):
                return fn(*args)

        numeric = numeric_grad(replayed, inputs, i, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
