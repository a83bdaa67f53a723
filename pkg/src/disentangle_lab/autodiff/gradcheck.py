"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grad


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences; ``target.data`` is perturbed in place."""
    flat = target.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    """max |a - n| (less ``atol``) divided by the largest gradient magnitude.

    Normalising by the tensor scale rather than per element keeps entries whose
    true gradient is ~0 from dominating through finite-difference noise.
    ``atol`` absorbs the rounding error of the difference quotient itself; the
    1e-6 floor covers tensors whose gradient is identically zero (e.g. a bias
    feeding a softmax, which is shift-invariant).
    """
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-6)
    return max(float(np.max(np.abs(analytic - numeric))) - atol, 0.0) / scale


def fd_rounding_bound(value: float, step: float, dtype=np.float64) -> float:
    """Worst-case rounding error of a central difference of a function of size ``value``."""
    return 4.0 * float(np.finfo(dtype).eps) * max(1.0, abs(value)) / step


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error over ``inputs`` between backward() and finite differences.

    ``fn`` must rebuild the graph on every call and return a scalar; every
    leaf it reads with ``requires_grad`` should be listed in ``inputs``.
    """
    zero_grad(inputs)
    loss = fn()
    backward(loss)
    atol = fd_rounding_bound(float(loss.data), step, loss.dtype)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic = np.array(analytic, dtype=np.float64)
        numeric = numeric_grad(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric, atol))
    zero_grad(inputs)
    return worst
