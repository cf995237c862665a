"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, arrays: list, index: int, step: float = 1e-3) -> np.ndarray:
    """d fn / d arrays[index] by central differences; ``fn`` returns a float."""
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        plus = fn(arrays)
        flat[k] = orig - step
        minus = fn(arrays)
        flat[k] = orig
        gflat[k] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor * scale).

    ``scale`` is the largest gradient magnitude in either array, so entries
    many orders below the gradient's own scale are judged on absolute error
    instead of amplifying O(step**2) truncation noise.
    """
    if not analytic.size:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(build, inputs: list, step: float = 1e-3, seed: int = 0,
                   floor: float = 1e-2) -> float:
    """Compare analytic and numerical gradients of ``build(*tensors)``.

    ``build`` maps float64 tensors to an output tensor of any shape; the
    output is contracted with a fixed random projection so that every
    output element contributes. Returns the worst relative error over all
    inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = build(*[Tensor(a) for a in arrays])
    # a separate stream, so inputs drawn from default_rng(seed) never equal the projection
    proj = np.random.default_rng([seed, 0x5EED]).standard_normal(probe.shape)

    def scalar(arrs):
        out = build(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data * proj))

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward(proj)

    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        numeric = numerical_gradient(scalar, arrays, i, step)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
