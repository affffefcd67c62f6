"""Finite-difference oracles shared by the test modules."""

import numpy as np

from vtae import diffcore as dc


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    """max |a-b| / (|b| + 1e-8), the scaled tolerance used throughout."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-8))) if a.size else 0.0


def grad_check(fn, *arrays, h: float = 1e-5):
    """Return the worst relative error between reverse-mode and numeric gradients."""
    analytic = dc.grad(fn, *arrays)
    if len(arrays) == 1:
        analytic = [analytic]
    worst = 0.0
    for k, arr in enumerate(arrays):
        def f(v, k=k):
            args = [np.asarray(a, dtype=np.float64) for a in arrays]
            args[k] = v
            with dc.no_grad():
                return float(fn(*[dc.Tensor(a) for a in args]).data)

        num = numeric_grad(f, arr, h)
        worst = max(worst, rel_err(analytic[k], num) if np.abs(num).max() > 1e-6 else
                    float(np.max(np.abs(analytic[k] - num))))
    return worst


def reference_text() -> str:
    from pathlib import Path

    return (Path(__file__).resolve().parents[1] / "paper.md").read_text()
