"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops and no shared code
with the package, so agreement is meaningful.
"""

import math

import numpy as np


def matmul_loops(x, w, b):
    n, d_in = len(x), len(x[0])
    d_out = len(w[0])
    out = [[0.0] * d_out for _ in range(n)]
    for i in range(n):
        for j in range(d_out):
            acc = b[j]
            for k in range(d_in):
                acc += x[i][k] * w[k][j]
            out[i][j] = acc
    return np.array(out)


def conv2d_loops(x, kernel, bias, stride=1, padding=0):
    n, c, h, w = x.shape
    co, ci, k, _ = kernel.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for a in range(n):
        for o in range(co):
            for r in range(oh):
                for s in range(ow):
                    acc = bias[o]
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[a, ch, r * stride + i, s * stride + j] * kernel[o, ch, i, j]
                    out[a, o, r, s] = acc
    return out


def central_difference(f, params, h=1e-5):
    """Gradient of scalar ``f()`` w.r.t. each array in ``params`` (mutated in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def reference_logits(x, params, buffers, center=0.5):
    """Straight-line forward of the default conv architecture, written with loops.

    The convolutions carry no bias (batchnorm follows each one).
    """
    x = x - center
    h = conv2d_loops(x, params["0.weight"], np.zeros(8), 1, 1)
    h = _bn(h, params["1.scale"], params["1.shift"], buffers["1.running_mean"], buffers["1.running_var"])
    h = np.maximum(h, 0)
    h = conv2d_loops(h, params["3.weight"], np.zeros(16), 2, 1)
    h = _bn(h, params["4.scale"], params["4.shift"], buffers["4.running_mean"], buffers["4.running_var"])
    h = np.maximum(h, 0)
    h = h.reshape(len(h), -1)
    return matmul_loops(h.tolist(), params["7.weight"].tolist(), params["7.bias"].tolist())


def _bn(x, g, b, mu, var, eps=1e-5):
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        out[:, c] = g[c] * (x[:, c] - mu[c]) / math.sqrt(var[c] + eps) + b[c]
    return out
