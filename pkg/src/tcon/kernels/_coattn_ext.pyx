# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pair co-attention kernels (same contract as ``_fallback``)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def pair_forward(const double[:, :, ::1] fs, const double[:, :, ::1] ft,
                 const double[:, ::1] ass, const double[:, ::1] att,
                 const cnp.intp_t[::1] si, const cnp.intp_t[::1] ti):
    cdef Py_ssize_t P = si.shape[0], Ks = fs.shape[1], Kt = ft.shape[1], D = fs.shape[2]
    ast_arr = np.empty((P, Ks, Kt))
    raw_arr = np.empty((P, Ks, Kt))
    cdef double[:, :, ::1] ast = ast_arr
    cdef double[:, :, ::1] raw = raw_arr
    cdef Py_ssize_t p, j, k, c, s, t
    cdef double acc
    with nogil:
        for p in range(P):
            s = si[p]
            t = ti[p]
            for j in range(Ks):
                for k in range(Kt):
                    acc = 0.0
                    for c in range(D):
                        acc = acc + fs[s, j, c] * ft[t, k, c]
                    ast[p, j, k] = acc
                    raw[p, j, k] = ass[s, j] * att[t, k] * acc
    return ast_arr, raw_arr


def pair_backward(const double[:, :, ::1] fs, const double[:, :, ::1] ft,
                  const double[:, ::1] ass, const double[:, ::1] att,
                  const cnp.intp_t[::1] si, const cnp.intp_t[::1] ti,
                  const double[:, :, ::1] ast, const double[:, :, ::1] g_raw):
    cdef Py_ssize_t P = si.shape[0], Ks = fs.shape[1], Kt = ft.shape[1], D = fs.shape[2]
    g_fs_arr = np.zeros((P, Ks, D))
    g_ft_arr = np.zeros((P, Kt, D))
    g_u_arr = np.zeros((P, Ks))
    g_v_arr = np.zeros((P, Kt))
    cdef double[:, :, ::1] g_fs = g_fs_arr
    cdef double[:, :, ::1] g_ft = g_ft_arr
    cdef double[:, ::1] g_u = g_u_arr
    cdef double[:, ::1] g_v = g_v_arr
    cdef Py_ssize_t p, j, k, c, s, t
    cdef double g, u, v, w, gs
    with nogil:
        for p in range(P):
            s = si[p]
            t = ti[p]
            for j in range(Ks):
                u = ass[s, j]
                for k in range(Kt):
                    v = att[t, k]
                    g = g_raw[p, j, k]
                    w = g * ast[p, j, k]
                    g_u[p, j] += w * v
                    g_v[p, k] += w * u
                    gs = g * u * v
                    for c in range(D):
                        g_fs[p, j, c] += gs * ft[t, k, c]
                        g_ft[p, k, c] += gs * fs[s, j, c]
    return g_fs_arr, g_ft_arr, g_u_arr, g_v_arr
