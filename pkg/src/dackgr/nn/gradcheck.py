"""Central finite-difference gradient checking.

The numeric side only evaluates forward values, so it is independent of the
backward closures it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dackgr.nn.tensor import Tensor, backward


def numeric_gradient(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                     eps: float = 1e-6) -> list[np.ndarray]:
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            hi = fn(arrays)
            arr[i] = old - eps
            lo = fn(arrays)
            arr[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    eps: float = 1e-6) -> list[float]:
    """Compare autodiff against finite differences for a scalar-valued ``build``.

    ``build`` receives one leaf tensor per input array and returns a scalar.
    Returns the relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def fn(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    numeric = numeric_gradient(fn, arrays, eps)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
