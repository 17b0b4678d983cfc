import math

import numpy as np

from hyxnet import nn


def scalar_cell(x, h_prev, c_prev, Wx, Wh, b):
    """Plain-Python loop version of one xLSTM step, used as an independent reference."""
    hid = len(h_prev)
    pre = []
    for j in range(4 * hid):
        s = b[j]
        for k in range(len(x)):
            s += x[k] * Wx[k][j]
        for k in range(hid):
            s += h_prev[k] * Wh[k][j]
        pre.append(s)
    h, c = [], []
    for j in range(hid):
        i = 1 / (1 + math.exp(-pre[j]))
        f = pre[hid + j]
        softplus = max(f, 0) + math.log1p(math.exp(-abs(f)))
        alpha = math.exp(-softplus)
        o = 1 / (1 + math.exp(-pre[2 * hid + j]))
        g = math.tanh(pre[3 * hid + j])
        cj = alpha * c_prev[j] + i * g
        c.append(cj)
        h.append(o * math.tanh(cj))
    return h, c


def random_cell(rng, d_in, hid, dtype=np.float64, scale=0.5):
    return nn.CellParams(
        (rng.normal(size=(d_in, 4 * hid)) * scale).astype(dtype),
        (rng.normal(size=(hid, 4 * hid)) * scale).astype(dtype),
        (rng.normal(size=4 * hid) * scale).astype(dtype),
    )


def grad_check(f, x, analytic, eps):
    """Max elementwise relative error between ``analytic`` and central differences of ``f``."""
    numeric = nn.numerical_gradient(f, x, eps)
    return nn.relative_error(analytic, numeric)


def grad_check32(f, x, analytic, eps=1e-3):
    """32-bit variant: errors measured relative to the largest gradient entry.

    Single precision loses about seven digits in the loss itself, so entries
    far below the gradient's scale cannot be resolved elementwise by finite
    differences.
    """
    numeric = nn.numerical_gradient(f, x, eps)
    a = np.asarray(analytic, dtype=np.float64)
    return float(np.max(np.abs(a - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def five_point_gradient(f, x, eps=1e-3):
    """Fourth-order central differences; perturbs ``x`` in place and restores it."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * eps
            vals.append(f())
        flat[i] = orig
        # differences first, so an unaffected loss gives exactly zero
        grad.flat[i] = ((vals[3] - vals[0]) + 8 * (vals[1] - vals[2])) / (12 * eps)
    return grad
