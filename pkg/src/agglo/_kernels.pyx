# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled prefix-average kernels for masked agglomerative attention.

Layouts (all C-contiguous):
    cr, cq, n : [b, t, m]
    v, a, out : [b, t, m, dm]

Forward:  n[i]   = sum_{tau <= i} cr[tau] + eps
          a[i]   = sum_{tau <= i} cr[tau] * v[tau] / n[i]
          out[i] = cq[i] * a[i]
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def prefix_average_forward(const floating[:, :, ::1] cr,
                           const floating[:, :, :, ::1] v,
                           const floating[:, :, ::1] cq,
                           double eps,
                           floating[:, :, :, ::1] a,
                           floating[:, :, :, ::1] out,
                           floating[:, :, ::1] n):
    cdef Py_ssize_t B = v.shape[0], T = v.shape[1], M = v.shape[2], D = v.shape[3]
    cdef Py_ssize_t bi, ti, k, l
    cdef floating c, q, inv, s
    cdef floating[:, ::1] acc
    cdef floating[::1] mass
    if floating is float:
        acc = np.empty((M, D), dtype=np.float32)
        mass = np.empty(M, dtype=np.float32)
    else:
        acc = np.empty((M, D), dtype=np.float64)
        mass = np.empty(M, dtype=np.float64)
    with nogil:
        for bi in range(B):
            acc[:, :] = 0
            mass[:] = 0
            for ti in range(T):
                for k in range(M):
                    c = cr[bi, ti, k]
                    q = cq[bi, ti, k]
                    mass[k] = mass[k] + c
                    n[bi, ti, k] = <floating>(mass[k] + eps)
                    inv = 1 / n[bi, ti, k]
                    for l in range(D):
                        acc[k, l] = acc[k, l] + c * v[bi, ti, k, l]
                        s = acc[k, l] * inv
                        a[bi, ti, k, l] = s
                        out[bi, ti, k, l] = q * s


def prefix_average_backward(const floating[:, :, :, ::1] grad,
                            const floating[:, :, ::1] cr,
                            const floating[:, :, :, ::1] v,
                            const floating[:, :, ::1] cq,
                            const floating[:, :, :, ::1] a,
                            const floating[:, :, ::1] n,
                            floating[:, :, ::1] dcr,
                            floating[:, :, :, ::1] dv,
                            floating[:, :, ::1] dcq):
    cdef Py_ssize_t B = v.shape[0], T = v.shape[1], M = v.shape[2], D = v.shape[3]
    cdef Py_ssize_t bi, ti, k, l
    cdef floating g, ga, inv, q, c, gq, gn, gc
    cdef floating[:, ::1] racc
    cdef floating[::1] rmass
    if floating is float:
        racc = np.empty((M, D), dtype=np.float32)
        rmass = np.empty(M, dtype=np.float32)
    else:
        racc = np.empty((M, D), dtype=np.float64)
        rmass = np.empty(M, dtype=np.float64)
    with nogil:
        for bi in range(B):
            racc[:, :] = 0
            rmass[:] = 0
            for ti in range(T - 1, -1, -1):
                for k in range(M):
                    q = cq[bi, ti, k]
                    c = cr[bi, ti, k]
                    inv = 1 / n[bi, ti, k]
                    gq = 0
                    gn = 0
                    for l in range(D):
                        g = grad[bi, ti, k, l]
                        gq = gq + g * a[bi, ti, k, l]
                        ga = g * q * inv
                        racc[k, l] = racc[k, l] + ga
                        gn = gn - ga * a[bi, ti, k, l]
                    dcq[bi, ti, k] = gq
                    rmass[k] = rmass[k] + gn
                    gc = rmass[k]
                    for l in range(D):
                        gc = gc + racc[k, l] * v[bi, ti, k, l]
                        dv[bi, ti, k, l] = racc[k, l] * c
                    dcr[bi, ti, k] = gc
