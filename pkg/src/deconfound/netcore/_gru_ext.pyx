# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence. Same contract as ``_gru_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def gru_forward(xw_, U_, h0_, mask_):
    cdef double[:, :, ::1] xw = np.ascontiguousarray(xw_, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_, dtype=np.float64)
    cdef double[:, ::1] h0 = np.ascontiguousarray(h0_, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_, dtype=np.float64)
    cdef Py_ssize_t B = xw.shape[0], T = xw.shape[1], H = xw.shape[2] // 3
    hs_ = np.empty((B, T, H))
    z_ = np.empty((B, T, H))
    r_ = np.empty((B, T, H))
    c_ = np.empty((B, T, H))
    cdef double[:, :, ::1] hs = hs_
    cdef double[:, :, ::1] za = z_
    cdef double[:, :, ::1] ra = r_
    cdef double[:, :, ::1] ca = c_
    cdef double[::1] h = np.empty(H)
    cdef double[::1] rh = np.empty(H)
    cdef double[::1] acc = np.empty(3 * H)
    cdef Py_ssize_t bi, t, j, k
    cdef double m, hk, hp, z, c
    with nogil:
        for bi in range(B):
            for j in range(H):
                h[j] = h0[bi, j]
            for t in range(T):
                m = mask[bi, t]
                for j in range(3 * H):
                    acc[j] = xw[bi, t, j]
                # row-major sweep over U keeps the inner loop contiguous
                for k in range(H):
                    hk = h[k]
                    for j in range(2 * H):
                        acc[j] = acc[j] + hk * U[k, j]
                for j in range(H):
                    ra[bi, t, j] = _sigmoid(acc[H + j])
                    rh[j] = ra[bi, t, j] * h[j]
                for k in range(H):
                    hk = rh[k]
                    for j in range(H):
                        acc[2 * H + j] = acc[2 * H + j] + hk * U[k, 2 * H + j]
                for j in range(H):
                    z = _sigmoid(acc[j])
                    c = tanh(acc[2 * H + j])
                    za[bi, t, j] = z
                    ca[bi, t, j] = c
                    hp = h[j]
                    hs[bi, t, j] = m * (hp + z * (c - hp)) + (1.0 - m) * hp
                for j in range(H):
                    h[j] = hs[bi, t, j]
    return hs_, (z_, r_, c_)


def gru_backward(dhs_, U_, h0_, mask_, hs_, cache):
    z_, r_, c_ = cache
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhs_, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_, dtype=np.float64)
    cdef double[:, ::1] h0 = np.ascontiguousarray(h0_, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_, dtype=np.float64)
    cdef double[:, :, ::1] za = np.ascontiguousarray(z_, dtype=np.float64)
    cdef double[:, :, ::1] ra = np.ascontiguousarray(r_, dtype=np.float64)
    cdef double[:, :, ::1] ca = np.ascontiguousarray(c_, dtype=np.float64)
    cdef Py_ssize_t B = hs.shape[0], T = hs.shape[1], H = hs.shape[2]
    dxw_ = np.empty((B, T, 3 * H))
    du_ = np.zeros((H, 3 * H))
    dh0_ = np.empty((B, H))
    cdef double[:, :, ::1] dxw = dxw_
    cdef double[:, ::1] du = du_
    cdef double[:, ::1] dh0 = dh0_
    cdef double[::1] dh = np.empty(H)
    cdef double[::1] dprev = np.empty(H)
    cdef double[::1] hprev = np.empty(H)
    cdef double[::1] drh = np.empty(H)
    cdef Py_ssize_t bi, t, j, k
    cdef double m, dhn, z, r, c, s
    with nogil:
        for bi in range(B):
            for j in range(H):
                dh[j] = 0.0
            for t in range(T - 1, -1, -1):
                m = mask[bi, t]
                for j in range(H):
                    if t > 0:
                        hprev[j] = hs[bi, t - 1, j]
                    else:
                        hprev[j] = h0[bi, j]
                    dh[j] = dh[j] + dhs[bi, t, j]
                for j in range(H):
                    z = za[bi, t, j]
                    c = ca[bi, t, j]
                    dhn = m * dh[j]
                    dprev[j] = (1.0 - m) * dh[j] + dhn * (1.0 - z)
                    dxw[bi, t, 2 * H + j] = dhn * z * (1.0 - c * c)
                    dxw[bi, t, j] = dhn * (c - hprev[j]) * z * (1.0 - z)
                # candidate block: dU_h += (r*hprev)^T dac ; drh = dac U_h^T
                for k in range(H):
                    r = ra[bi, t, k]
                    s = 0.0
                    for j in range(H):
                        du[k, 2 * H + j] += r * hprev[k] * dxw[bi, t, 2 * H + j]
                        s = s + dxw[bi, t, 2 * H + j] * U[k, 2 * H + j]
                    drh[k] = s
                for k in range(H):
                    r = ra[bi, t, k]
                    dxw[bi, t, H + k] = drh[k] * hprev[k] * r * (1.0 - r)
                    dprev[k] = dprev[k] + drh[k] * r
                for k in range(H):
                    s = 0.0
                    for j in range(2 * H):
                        du[k, j] += hprev[k] * dxw[bi, t, j]
                        s = s + dxw[bi, t, j] * U[k, j]
                    dprev[k] = dprev[k] + s
                for j in range(H):
                    dh[j] = dprev[j]
            for j in range(H):
                dh0[bi, j] = dh[j]
    return dxw_, du_, dh0_
