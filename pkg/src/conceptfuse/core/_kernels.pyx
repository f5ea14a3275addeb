# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels (softmax, layer norm) for float32 and float64."""

import numpy as np
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double


def softmax_rows(const real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef double mx, s, inv, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = exp(x[i, j] - mx)
                y[i, j] = <real>e
                s += e
            inv = 1.0 / s
            for j in range(m):
                y[i, j] = <real>(y[i, j] * inv)
    return out


def softmax_rows_backward(const real[:, ::1] y, const real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gy[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = <real>(y[i, j] * (gy[i, j] - dot))
    return out


def layer_norm_forward(const real[:, ::1] x, const real[::1] gain, const real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.float32 if real is float else np.float64
    out = np.empty((n, d), dtype=dt)
    xh = np.empty((n, d), dtype=dt)
    rs = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xhat = xh
    cdef real[::1] rstd = rs
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = <real>c
                y[i, j] = <real>(c * gain[j] + bias[j])
    return out, xh, rs


def layer_norm_backward(const real[:, ::1] gy, const real[:, ::1] xhat, const real[::1] rstd, const real[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dt = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dt)
    gg_arr = np.zeros(d, dtype=np.float64)
    gb_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double s1, s2, g
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
                g = gy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
            for j in range(d):
                g = gy[i, j] * gain[j]
                gx[i, j] = <real>((rstd[i] / d) * (d * g - s1 - xhat[i, j] * s2))
    return gx_arr, gg_arr.astype(dt), gb_arr.astype(dt)
