# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the tabular state-conservative operators.

Both kernels mirror :mod:`scpo._pykernels` operation for operation, so the two
backends return bit-identical arrays.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def ball_min(const double[::1] values, const cnp.intp_t[::1] indptr,
             const cnp.intp_t[::1] indices):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t s, k
    cdef double best, v
    for s in range(n):
        best = values[indices[indptr[s]]]
        for k in range(indptr[s] + 1, indptr[s + 1]):
            v = values[indices[k]]
            if v < best:
                best = v
        out[s] = best
    return out_arr


def lagrangian_min(const double[::1] values, const double[:, ::1] penalty,
                   const double[::1] lambdas):
    cdef Py_ssize_t n_states = penalty.shape[0]
    cdef Py_ssize_t n_targets = penalty.shape[1]
    cdef Py_ssize_t n_lam = lambdas.shape[0]
    out_arr = np.empty((n_lam, n_targets), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t l, s, t
    cdef double lam, best, v
    for l in range(n_lam):
        lam = lambdas[l]
        for t in range(n_targets):
            best = values[0] + lam * penalty[0, t]
            for s in range(1, n_states):
                v = values[s] + lam * penalty[s, t]
                if v < best:
                    best = v
            out[l, t] = best
    return out_arr
