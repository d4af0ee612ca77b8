"""Central finite-difference oracle for tape gradients.

The function under test is re-evaluated in 64-bit precision so the
difference quotients are not swamped by float32 rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numerical_grad(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray],
                   step: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*tensors)`` w.r.t. each input array."""
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    grads = []
    with T.precision(np.float64), T.no_record():
        for i, x in enumerate(base):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi = fn(*[T.Tensor(a) for a in base]).item()
                flat[j] = orig - step
                lo = fn(*[T.Tensor(a) for a in base]).item()
                flat[j] = orig
                g.reshape(-1)[j] = (hi - lo) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Tape gradients of scalar ``fn`` at 32-bit precision."""
    leaves = [T.parameter(np.asarray(x, dtype=np.float32)) for x in inputs]
    with T.Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    return [grads.get(leaf, np.zeros(leaf.shape, np.float32)) for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray],
          step: float = 1e-3) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    num = numerical_grad(fn, inputs, step)
    ana = analytic_grad(fn, inputs)
    return max(relative_error(a, n) for a, n in zip(ana, num))
