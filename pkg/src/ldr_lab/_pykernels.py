"""Pure-numpy fallback for the compiled kernels.

Results are bit-identical to ``_kernels``: each output element is built by
adding rank-1 products in ascending inner-index order, with the multiply
and the add rounded separately.
"""

import numpy as np


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: ({m}, {k}) @ {b.shape}")
    n = b.shape[1]
    out = np.zeros((m, n))
    if k == 0 or m == 0 or n == 0:
        return out
    term = np.empty((m, n))
    for p in range(k):
        np.multiply(a[:, p, None], b[None, p, :], out=term)
        out += term
    return out
