"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .graph import AutodiffError, Graph, Tensor


def _evaluate(fn, arrays, params=None) -> float:
    g = Graph(params)
    out = fn(g, *[g.leaf(f"x{i}", a) for i, a in enumerate(arrays)])
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise AutodiffError("grad_check: non-finite objective")
    return val


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, step: float = 1e-5,
               skip: Callable[[int, np.ndarray], np.ndarray] | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn(graph, *tensors)`` must return a scalar tensor. ``skip(i, x)`` may
    return a boolean mask over input ``i`` marking entries to leave out
    (for example, points within a couple of steps of a kink).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    g = Graph()
    leaves = [g.leaf(f"x{i}", a) for i, a in enumerate(arrays)]
    loss = fn(g, *leaves)
    analytic = g.backward(loss)
    worst = 0.0
    for i, base in enumerate(arrays):
        grad = analytic[f"x{i}"]
        mask = np.zeros(base.shape, bool) if skip is None else np.asarray(skip(i, base), bool)
        for idx in np.ndindex(base.shape):
            if mask[idx]:
                continue
            probe = [a.copy() for a in arrays]
            probe[i][idx] = base[idx] + step
            fp = _evaluate(fn, probe)
            probe[i][idx] = base[idx] - step
            fm = _evaluate(fn, probe)
            central = (fp - fm) / (2 * step)
            a = grad[idx]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check_params(fn: Callable[[Graph], Tensor], params: dict, step: float = 1e-5,
                      names: Sequence[str] | None = None) -> tuple[float, str]:
    """Same check over entries of a named parameter store.

    Returns the worst relative error and the parameter it occurred in.
    """
    g = Graph(params)
    analytic = g.backward(fn(g))
    worst, where = 0.0, ""
    for name in names if names is not None else sorted(params):
        base = params[name]
        grad = analytic.get(name, np.zeros(base.shape))
        for idx in np.ndindex(base.shape):
            keep = base[idx]
            base[idx] = keep + step
            fp = float(fn(Graph(params)).data)
            base[idx] = keep - step
            fm = float(fn(Graph(params)).data)
            base[idx] = keep
            central = (fp - fm) / (2 * step)
            a = grad[idx]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return worst, where
