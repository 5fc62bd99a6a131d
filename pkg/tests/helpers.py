"""Shared numeric helpers for the test-suite."""
import numpy as np


def numeric_grad(f, x, eps=1e-6):
    """Central differences of the scalar function ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


# acceptance verdicts, echoed in the terminal summary by conftest
ACCEPTANCE_LINES = []
