# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU + sigmoid-classifier unroll with activity feedback.

Same contract as ``sedlm._recurrence_py``. Loops run in a fixed order so
results are reproducible run to run.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline double _sig(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def forward(real[:, :, ::1] xproj, real[:, ::1] wc, real[:, ::1] u,
            real[:, ::1] wo, real[::1] bo, real[:, :, ::1] y_true,
            unsigned char[:, ::1] truth, bint binarize):
    cdef Py_ssize_t B = xproj.shape[0], T = xproj.shape[1], G = xproj.shape[2]
    cdef Py_ssize_t H = G // 3, C = wo.shape[1], K = wc.shape[0]
    cdef Py_ssize_t b, t, j, k, c
    dt = np.float32 if real is float else np.float64

    hs_a = np.zeros((B, T + 1, H), dtype=dt)
    zs_a = np.empty((B, T, H), dtype=dt)
    rs_a = np.empty((B, T, H), dtype=dt)
    ns_a = np.empty((B, T, H), dtype=dt)
    yh_a = np.empty((B, T, C), dtype=dt)
    yc_a = np.zeros((B, T, K), dtype=dt)
    cdef real[:, :, ::1] hs = hs_a
    cdef real[:, :, ::1] zs = zs_a
    cdef real[:, :, ::1] rs = rs_a
    cdef real[:, :, ::1] ns = ns_a
    cdef real[:, :, ::1] yhat = yh_a
    cdef real[:, :, ::1] ycond = yc_a
    # wo transposed so the classifier reads contiguous rows
    cdef real[:, ::1] woT = np.ascontiguousarray(np.asarray(wo).T)
    a_a = np.empty(G, dtype=dt)
    rh_a = np.empty(H, dtype=dt)
    cdef real[::1] a = a_a
    cdef real[::1] rh = rh_a
    cdef real acc, hv, zv, y, v

    with nogil:
        for t in range(T):
            for b in range(B):
                for j in range(G):
                    a[j] = xproj[b, t, j]
                for k in range(K):
                    v = ycond[b, t, k]
                    if v != 0:
                        for j in range(G):
                            a[j] = a[j] + v * wc[k, j]
                # update and reset gates: a[:2H] += h @ U[:, :2H]
                for k in range(H):
                    v = hs[b, t, k]
                    for j in range(2 * H):
                        a[j] = a[j] + v * u[k, j]
                for j in range(H):
                    zs[b, t, j] = <real>_sig(a[j])
                    rs[b, t, j] = <real>_sig(a[H + j])
                    rh[j] = rs[b, t, j] * hs[b, t, j]
                # candidate: a[2H:] += (r * h) @ U[:, 2H:]
                for k in range(H):
                    v = rh[k]
                    for j in range(H):
                        a[2 * H + j] = a[2 * H + j] + v * u[k, 2 * H + j]
                for j in range(H):
                    ns[b, t, j] = <real>tanh(a[2 * H + j])
                    zv = zs[b, t, j]
                    hv = hs[b, t, j]
                    hs[b, t + 1, j] = (1 - zv) * hv + zv * ns[b, t, j]
                for c in range(C):
                    acc = bo[c]
                    for k in range(H):
                        acc = acc + hs[b, t + 1, k] * woT[c, k]
                    y = <real>_sig(acc)
                    yhat[b, t, c] = y
                    if K > 0 and t + 1 < T:
                        if truth[b, t]:
                            ycond[b, t + 1, c] = y_true[b, t, c]
                        elif binarize:
                            ycond[b, t + 1, c] = 1 if y >= 0.5 else 0
                        else:
                            ycond[b, t + 1, c] = y
    return yh_a, hs_a, zs_a, rs_a, ns_a, yc_a


def backward(real[:, :, ::1] gy, real[:, :, ::1] yhat, real[:, :, ::1] hs,
             real[:, :, ::1] zs, real[:, :, ::1] rs, real[:, :, ::1] ns,
             real[:, :, ::1] ycond, real[:, ::1] wc, real[:, ::1] u, real[:, ::1] wo):
    """Only the state recursion runs in the compiled loop; weight gradients are
    single matrix products over all (batch, step) pairs afterwards."""
    cdef Py_ssize_t B = zs.shape[0], T = zs.shape[1], H = zs.shape[2]
    cdef Py_ssize_t G = 3 * H, C = wo.shape[1], K = wc.shape[0]
    cdef Py_ssize_t b, t, j, k, c
    dt = np.float32 if real is float else np.float64

    yh = np.asarray(yhat)
    dlog_a = np.ascontiguousarray(np.asarray(gy) * yh * (1 - yh))
    dx_a = np.empty((B, T, G), dtype=dt)
    dh_a = np.zeros((B, H), dtype=dt)
    dhp_a = np.empty(H, dtype=dt)
    drh_a = np.empty(H, dtype=dt)
    cdef real[:, :, ::1] dlog = dlog_a
    cdef real[:, :, ::1] dx = dx_a
    cdef real[:, ::1] dh = dh_a
    cdef real[::1] dhp = dhp_a
    cdef real[::1] drh = drh_a
    # transposed weights so every inner loop is a contiguous axpy
    cdef real[:, ::1] uT = np.ascontiguousarray(np.asarray(u).T)
    cdef real[:, ::1] woT = np.ascontiguousarray(np.asarray(wo).T)
    cdef real acc, z, r, n, h, dz, dn, v

    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for c in range(C):
                    v = dlog[b, t, c]
                    for k in range(H):
                        dh[b, k] = dh[b, k] + v * woT[c, k]
                for j in range(H):
                    z = zs[b, t, j]
                    n = ns[b, t, j]
                    h = hs[b, t, j]
                    dz = dh[b, j] * (n - h)
                    dn = dh[b, j] * z
                    dhp[j] = dh[b, j] * (1 - z)
                    dx[b, t, j] = dz * z * (1 - z)
                    dx[b, t, 2 * H + j] = dn * (1 - n * n)
                # candidate path through (r * h) @ U_n
                for k in range(H):
                    drh[k] = 0
                for j in range(H):
                    v = dx[b, t, 2 * H + j]
                    for k in range(H):
                        drh[k] = drh[k] + v * uT[2 * H + j, k]
                for k in range(H):
                    r = rs[b, t, k]
                    dhp[k] = dhp[k] + drh[k] * r
                    dx[b, t, H + k] = drh[k] * hs[b, t, k] * r * (1 - r)
                for j in range(2 * H):
                    v = dx[b, t, j]
                    for k in range(H):
                        dhp[k] = dhp[k] + v * uT[j, k]
                for k in range(H):
                    dh[b, k] = dhp[k]

    hs_np = np.asarray(hs)
    h_in = hs_np[:, :T].reshape(-1, H)
    dx2 = dx_a.reshape(-1, G)
    du_a = np.empty((H, G), dtype=dt)
    du_a[:, :2 * H] = h_in.T @ dx2[:, :2 * H]
    du_a[:, 2 * H:] = (np.asarray(rs).reshape(-1, H) * h_in).T @ dx2[:, 2 * H:]
    dwc_a = np.asarray(ycond).reshape(B * T, K).T @ dx2 if K > 0 else np.zeros((0, G), dtype=dt)
    dl2 = dlog_a.reshape(-1, C)
    dwo_a = hs_np[:, 1:].reshape(-1, H).T @ dl2
    dbo_a = dl2.sum(axis=0)
    return dx_a, dwc_a, du_a, dwo_a, dbo_a
