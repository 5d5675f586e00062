"""Central finite differences against traced reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, value


def analytic_grad(f, x) -> np.ndarray:
    graph = Graph()
    leaf = graph.leaf(x, name="x")
    return graph.backward(f(leaf))[leaf]


def finite_diff_check(f, x, probes: int = 50, step: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between traced and central-difference derivatives.

    ``f`` maps an array or graph node to a scalar and must be written with
    the operators in :mod:`robustseg.numerics.autodiff`. ``probes``
    coordinates are drawn without replacement (all of them if fewer exist);
    the error at each is ``|analytic - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = analytic_grad(f, x)
    rng = np.random.default_rng(seed)
    n = x.size
    coords = rng.choice(n, size=min(probes, n), replace=False) if probes < n else np.arange(n)

    def evaluate(arr):
        out = float(np.asarray(value(f(arr))).reshape(()))
        if not np.isfinite(out):
            raise ValueError("finite_diff_check: function returned a non-finite value")
        return out

    worst = 0.0
    flat = x.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = evaluate(x)
        flat[c] = orig - step
        down = evaluate(x)
        flat[c] = orig
        fd = (up - down) / (2.0 * step)
        err = abs(grad.reshape(-1)[c] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
