"""Independent naive-loop reference implementations used to cross-check the
vectorized kernels. Deliberately dumb: direct index arithmetic, no shared
code with the package."""

import numpy as np


def conv2d_naive(x, w, b, stride, pad):
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.zeros((h + 2 * pad, wd + 2 * pad, cin), dtype=np.float64)
    xp[pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((ho, wo, cout), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = 0.0
                for ki in range(k):
                    for kj in range(k):
                        for ci in range(cin):
                            acc += xp[i * stride + ki, j * stride + kj, ci] * w[ki, kj, ci, co]
                y[i, j, co] = acc + b[co]
    return y


def maxpool2d_naive(x, k, stride):
    h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    y = np.zeros((ho, wo, c), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            for ci in range(c):
                best = -np.inf
                for ki in range(k):
                    for kj in range(k):
                        best = max(best, x[i * stride + ki, j * stride + kj, ci])
                y[i, j, ci] = best
    return y


def pointwise_dense_naive(x, w, b):
    lead = x.shape[:-1]
    cin, cout = w.shape
    flat = x.reshape(-1, cin)
    y = np.zeros((flat.shape[0], cout), dtype=np.float64)
    for r in range(flat.shape[0]):
        for j in range(cout):
            acc = 0.0
            for i in range(cin):
                acc += flat[r, i] * w[i, j]
            y[r, j] = acc + b[j]
    return y.reshape(lead + (cout,))
