"""Pure-NumPy versions of the compiled kernels in ``_ckernels.pyx``."""

from __future__ import annotations

import numpy as np

_LAMBDA_CHUNK = 512


def ball_min(values: np.ndarray, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Minimum of ``values`` over each CSR row of neighbour indices."""
    # every row is non-empty (a state always belongs to its own ball)
    return np.minimum.reduceat(values[indices], indptr[:-1])


def lagrangian_min(values: np.ndarray, penalty: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """``out[l, t] = min_s values[s] + lambdas[l] * penalty[s, t]``."""
    out = np.empty((lambdas.shape[0], penalty.shape[1]))
    for start in range(0, lambdas.shape[0], _LAMBDA_CHUNK):
        lam = lambdas[start:start + _LAMBDA_CHUNK]
        terms = values[None, :, None] + lam[:, None, None] * penalty[None, :, :]
        out[start:start + lam.shape[0]] = terms.min(axis=1)
    return out
