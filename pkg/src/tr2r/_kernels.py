"""Compiled inner kernels (numba)."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def group_lasso_bcd(ZtZ, ZtCy, thresh, C, tol, max_sweeps):
    """Cyclic group soft-threshold sweeps in Gram form, updating `C` in place.

    Returns ``(C, sweeps, converged)``; converged when the largest row
    change is at most ``tol * max(largest row norm, 1)``.
    """
    m, K = C.shape
    H = ZtZ @ C
    v = np.empty(K)
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        scale = 0.0
        for j in range(m):
            zz = ZtZ[j, j]
            nv2 = 0.0
            for k in range(K):
                v[k] = ZtCy[j, k] - H[j, k] + zz * C[j, k]
                nv2 += v[k] * v[k]
            nv = math.sqrt(nv2)
            f = 0.0 if (zz <= 0.0 or nv <= thresh) else (1.0 - thresh / nv) / zz
            change = 0.0
            size = 0.0
            for k in range(K):
                new = v[k] * f
                d = new - C[j, k]
                if d != 0.0:
                    for i in range(m):
                        H[i, k] += ZtZ[i, j] * d
                C[j, k] = new
                change += d * d
                size += new * new
            if change > max_change:
                max_change = change
            if size > scale:
                scale = size
        if math.sqrt(max_change) <= tol * max(math.sqrt(scale), 1.0):
            return C, sweep, True
    return C, max_sweeps, False
