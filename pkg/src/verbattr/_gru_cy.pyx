# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled GRU recurrence. Same contract as ``verbattr._gru_np``.

The time loop runs in C; the per-step matrix products go through BLAS
``dgemm`` on row-major buffers (operands swapped to match column-major).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) noexcept nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       double *a, int lda, double *b, int ldb, double beta,
                       double *c, int ldc) noexcept nogil:
    # row-major C = alpha op(A) op(B) + beta C  ==  column-major C^T = op(B)^T op(A)^T
    if m == 0 or n == 0:
        return
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def gru_forward(gx, lengths, u):
    cdef double[:, :, ::1] gxv = np.ascontiguousarray(gx, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef long[::1] lens = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef int B = gxv.shape[0]
    cdef int T = gxv.shape[1]
    cdef int H = gxv.shape[2] // 3
    hs_a = np.zeros((B, T + 1, H))
    r_a = np.zeros((B, T, H))
    z_a = np.zeros((B, T, H))
    c_a = np.zeros((B, T, H))
    if B == 0 or T == 0 or H == 0:
        return hs_a, r_a, z_a, c_a
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] r = r_a
    cdef double[:, :, ::1] z = z_a
    cdef double[:, :, ::1] c = c_a
    cdef double[:, ::1] tmp_rz = np.empty((B, 2 * H))
    cdef double[:, ::1] rh = np.empty((B, H))
    cdef double[:, ::1] tmp_c = np.empty((B, H))
    cdef int t, b, j
    cdef int ldh = (T + 1) * H
    cdef double hp, rt, zt, ct
    with nogil:
        for t in range(T):
            _gemm(b'N', b'T', B, 2 * H, H, 1.0, &hs[0, t, 0], ldh,
                  &uv[0, 0], H, 0.0, &tmp_rz[0, 0], 2 * H)
            for b in range(B):
                for j in range(H):
                    rt = _sig(tmp_rz[b, j] + gxv[b, t, j])
                    r[b, t, j] = rt
                    z[b, t, j] = _sig(tmp_rz[b, H + j] + gxv[b, t, H + j])
                    rh[b, j] = rt * hs[b, t, j]
            _gemm(b'N', b'T', B, H, H, 1.0, &rh[0, 0], H,
                  &uv[2 * H, 0], H, 0.0, &tmp_c[0, 0], H)
            for b in range(B):
                if t < lens[b]:
                    for j in range(H):
                        ct = tanh(tmp_c[b, j] + gxv[b, t, 2 * H + j])
                        c[b, t, j] = ct
                        zt = z[b, t, j]
                        hp = hs[b, t, j]
                        hs[b, t + 1, j] = (1.0 - zt) * hp + zt * ct
                else:
                    for j in range(H):
                        c[b, t, j] = tanh(tmp_c[b, j] + gxv[b, t, 2 * H + j])
                        hs[b, t + 1, j] = hs[b, t, j]
    return hs_a, r_a, z_a, c_a


def gru_backward(dh_last, lengths, u, hs, r, z, c):
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef long[::1] lens = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef double[:, :, ::1] hsv = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, :, ::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef double[:, :, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, :, ::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef int B = rv.shape[0]
    cdef int T = rv.shape[1]
    cdef int H = rv.shape[2]
    dgx_a = np.zeros((B, T, 3 * H))
    du_a = np.zeros((3 * H, H))
    if B == 0 or T == 0 or H == 0:
        return dgx_a, du_a
    cdef double[:, :, ::1] dgx = dgx_a
    cdef double[:, ::1] du = du_a
    cdef double[:, ::1] dh = np.array(dh_last, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] da_c = np.empty((B, H))
    cdef double[:, ::1] da_rz = np.empty((B, 2 * H))
    cdef double[:, ::1] rh = np.empty((B, H))
    cdef double[:, ::1] drh = np.empty((B, H))
    cdef double[:, ::1] tmp = np.empty((B, H))
    cdef int t, b, j
    cdef int ldh = (T + 1) * H
    cdef double d, h, rt, zt, ct
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                if t < lens[b]:
                    for j in range(H):
                        d = dh[b, j]
                        ct = cv[b, t, j]
                        zt = zv[b, t, j]
                        h = hsv[b, t, j]
                        da_c[b, j] = d * zt * (1.0 - ct * ct)
                        da_rz[b, H + j] = d * (ct - h) * zt * (1.0 - zt)
                        rh[b, j] = rv[b, t, j] * h
                else:
                    for j in range(H):
                        da_c[b, j] = 0.0
                        da_rz[b, H + j] = 0.0
                        rh[b, j] = rv[b, t, j] * hsv[b, t, j]
            _gemm(b'T', b'N', H, H, B, 1.0, &da_c[0, 0], H,
                  &rh[0, 0], H, 1.0, &du[2 * H, 0], H)
            _gemm(b'N', b'N', B, H, H, 1.0, &da_c[0, 0], H,
                  &uv[2 * H, 0], H, 0.0, &drh[0, 0], H)
            for b in range(B):
                for j in range(H):
                    rt = rv[b, t, j]
                    da_rz[b, j] = drh[b, j] * hsv[b, t, j] * rt * (1.0 - rt)
            _gemm(b'T', b'N', 2 * H, H, B, 1.0, &da_rz[0, 0], 2 * H,
                  &hsv[0, t, 0], ldh, 1.0, &du[0, 0], H)
            _gemm(b'N', b'N', B, H, 2 * H, 1.0, &da_rz[0, 0], 2 * H,
                  &uv[0, 0], H, 0.0, &tmp[0, 0], H)
            for b in range(B):
                if t < lens[b]:
                    for j in range(H):
                        dgx[b, t, j] = da_rz[b, j]
                        dgx[b, t, H + j] = da_rz[b, H + j]
                        dgx[b, t, 2 * H + j] = da_c[b, j]
                        dh[b, j] = (dh[b, j] * (1.0 - zv[b, t, j])
                                    + drh[b, j] * rv[b, t, j] + tmp[b, j])
    return dgx_a, du_a
