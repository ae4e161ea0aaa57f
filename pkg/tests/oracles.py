"""Slow, independent reference implementations used to pin down expected values.

Everything here is written with explicit python loops and no shared code with
the package, so a bug in the fast paths cannot hide in its own oracle.
"""
import numpy as np


def conv2d_same_loops(x, k, b):
    """Same-padded correlation, one multiply at a time.

    x: [H, W, Cin], k: [ksz, ksz, Cin, Cout], b: [Cout].
    """
    h, w, cin = x.shape
    ksz = k.shape[0]
    cout = k.shape[3]
    pad = (ksz - 1) // 2
    out = np.zeros((h, w, cout), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                acc = 0.0
                for di in range(ksz):
                    for dj in range(ksz):
                        ii = i + di - pad
                        jj = j + dj - pad
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * k[di, dj, ci, co]
                out[i, j, co] = acc + b[co]
    return out


def maxpool_2x2_loops(x):
    """2x2/stride-2 max pooling with ceil semantics via explicit window scans."""
    h, w, c = x.shape
    ho = (h + 1) // 2
    wo = (w + 1) // 2
    out = np.zeros((ho, wo, c), dtype=x.dtype)
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                best = -np.inf
                for di in range(2):
                    for dj in range(2):
                        ii = 2 * i + di
                        jj = 2 * j + dj
                        if ii < h and jj < w and x[ii, jj, ch] > best:
                            best = x[ii, jj, ch]
                out[i, j, ch] = best
    return out


def matvec_loops(w, x):
    m, n = w.shape
    out = np.zeros(m, dtype=np.float64)
    for i in range(m):
        for j in range(n):
            out[i] += w[i, j] * x[j]
    return out


def dense_loops(x, w, b):
    return matvec_loops(w, x) + b


def softmax_loops(z):
    m = max(float(v) for v in z)
    ex = np.array([np.exp(float(v) - m) for v in z])
    return ex / ex.sum()


def central_difference(f, x, epsilon=1e-5):
    """Gradient of scalar f at flat array x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(x)
        flat[i] = orig - epsilon
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * epsilon)
    return g
