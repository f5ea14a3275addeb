"""Pure numpy versions of the hot row kernels.

Every function takes C-contiguous 2-D arrays and mirrors the compiled
module signature exactly.
"""

import numpy as np


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_backward(gy, xhat, rstd, gain):
    d = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = (rstd[:, None] / d) * (
        d * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx.astype(gy.dtype), ggain.astype(gy.dtype), gbias.astype(gy.dtype)
