"""Independently coded reference implementations used only as oracles.

These are deliberately plain nested loops (or one-line numpy restatements
of a definition) with no code shared with the production paths.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def direct_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0, rate: int = 1) -> np.ndarray:
    """Straightforward convolution: loops over every output element and
    accumulates the kernel taps one by one."""
    b, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise DimensionError("channel mismatch")
    eff = k + (k - 1) * (rate - 1)
    out_h = (h + 2 * padding - eff) // stride + 1
    out_w = (w + 2 * padding - eff) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, o, out_h, out_w), dtype=x.dtype)
    for bi in range(b):
        for oi in range(o):
            for i in range(out_h):
                for j in range(out_w):
                    acc = x.dtype.type(0)
                    for ci in range(c):
                        for k1 in range(k):
                            for k2 in range(k):
                                acc += (weight[oi, ci, k1, k2]
                                        * xp[bi, ci, i * stride + k1 * rate,
                                             j * stride + k2 * rate])
                    if bias is not None:
                        acc += bias[oi]
                    out[bi, oi, i, j] = acc
    return out


def naive_linear(x: np.ndarray, weight: np.ndarray,
                 bias: np.ndarray | None = None) -> np.ndarray:
    """Triple-loop affine map for B×N inputs and M×N weights."""
    b, n = x.shape
    m = weight.shape[0]
    out = np.zeros((b, m), dtype=x.dtype)
    for bi in range(b):
        for mi in range(m):
            acc = x.dtype.type(0)
            for ni in range(n):
                acc += x[bi, ni] * weight[mi, ni]
            if bias is not None:
                acc += bias[mi]
            out[bi, mi] = acc
    return out


def scan_maxpool2d(x: np.ndarray, window: int) -> np.ndarray:
    """Exhaustive window scan."""
    b, c, h, w = x.shape
    oh, ow = h // window, w // window
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[bi, ci, i, j] = x[bi, ci,
                                          i * window:(i + 1) * window,
                                          j * window:(j + 1) * window].max()
    return out


def block_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Brute-force block means."""
    b, c, h, w = x.shape
    oh, ow = h // window, w // window
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[bi, ci, i, j] = x[bi, ci,
                                          i * window:(i + 1) * window,
                                          j * window:(j + 1) * window].mean()
    return out
