"""Independent oracles shared by the test modules.

Nothing here imports the forward or backward code under test: the forward
pass is re-derived layer by layer with plain numpy, and gradients come from
central finite differences of a scalar loss.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-5


def reference_forward(layers: Sequence[tuple[np.ndarray, np.ndarray, str]], x: np.ndarray,
                      group: int = 8) -> np.ndarray:
    """Row-at-a-time forward pass from raw (weight, bias, activation) triples."""
    rows = []
    for row in np.atleast_2d(x):
        h = row.astype(np.float64)
        for W, b, act in layers:
            pre = np.array([sum(W[i, j] * h[j] for j in range(W.shape[1])) + b[i]
                            for i in range(W.shape[0])])
            if act == "relu":
                h = np.where(pre > 0, pre, 0.0)
            elif act == "tanh":
                h = np.tanh(pre)
            elif act == "identity":
                h = pre
            elif act == "simnorm":
                out = []
                for k in range(0, len(pre), group):
                    e = np.exp(pre[k:k + group] - max(pre[k:k + group]))
                    out.extend(e / sum(e))
                h = np.array(out)
            else:
                raise ValueError(act)
        rows.append(h)
    return np.array(rows)


def fd_gradients(loss: Callable[[], float], arrays: Sequence[np.ndarray],
                 step: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of ``loss()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss()
            arr[idx] = orig - step
            lo = loss()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Worst per-array ``max|a - n| / max|n|``; arrays whose numeric gradient is
    identically tiny are compared absolutely."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = float(np.max(np.abs(n)))
        err = float(np.max(np.abs(a - n)))
        worst = max(worst, err / scale if scale > 1e-8 else err)
    return worst
