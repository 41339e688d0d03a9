"""Kernel-weighted moment sums with a fixed summation order.

BLAS matrix products may pick different SIMD paths depending on array
alignment, which breaks bit-reproducibility across processes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def kernel_moments(W, y, K):
    """For each weight row b and grid point g: sums of w K, w y K and w y^2 K^2."""
    B, n = W.shape
    G = K.shape[0]
    m0 = np.zeros((B, G))
    m1 = np.zeros((B, G))
    m2 = np.zeros((B, G))
    for g in range(G):
        for i in range(n):
            k = K[g, i]
            if k == 0.0:
                continue
            yk = y[i] * k
            y2k2 = yk * yk
            for b in range(B):
                w = W[b, i]
                m0[b, g] += w * k
                m1[b, g] += w * yk
                m2[b, g] += w * y2k2
    return m0, m1, m2
