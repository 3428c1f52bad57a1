# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled quadratic-form kernels (hot loops of measurement evaluation)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def quad_values(const double[::1] vals, const cnp.int64_t[::1] rows,
                const cnp.int64_t[::1] cols, const cnp.int64_t[::1] starts,
                const double[::1] v, double[::1] out):
    cdef Py_ssize_t m, t, n_meters = starts.shape[0] - 1
    cdef double acc
    for m in range(n_meters):
        acc = 0.0
        for t in range(starts[m], starts[m + 1]):
            acc += vals[t] * v[rows[t]] * v[cols[t]]
        out[m] = acc


def quad_jacobian(const double[::1] vals, const cnp.int64_t[::1] rows,
                  const cnp.int64_t[::1] cols, const cnp.int64_t[::1] starts,
                  const double[::1] v, double[:, ::1] out):
    cdef Py_ssize_t m, t, n_meters = starts.shape[0] - 1
    out[:, :] = 0.0
    for m in range(n_meters):
        for t in range(starts[m], starts[m + 1]):
            out[m, rows[t]] += vals[t] * v[cols[t]]
            out[m, cols[t]] += vals[t] * v[rows[t]]


def quad_values_batch(const double[::1] vals, const cnp.int64_t[::1] rows,
                      const cnp.int64_t[::1] cols, const cnp.int64_t[::1] starts,
                      const double[:, ::1] V, double[:, ::1] out):
    cdef Py_ssize_t b, m, t, n_batch = V.shape[0], n_meters = starts.shape[0] - 1
    cdef double acc
    for b in range(n_batch):
        for m in range(n_meters):
            acc = 0.0
            for t in range(starts[m], starts[m + 1]):
                acc += vals[t] * V[b, rows[t]] * V[b, cols[t]]
            out[b, m] = acc


def quad_vjp_batch(const double[::1] vals, const cnp.int64_t[::1] rows,
                   const cnp.int64_t[::1] cols, const cnp.int64_t[::1] starts,
                   const double[:, ::1] V, const double[:, ::1] G,
                   double[:, ::1] out):
    cdef Py_ssize_t b, m, t, n_batch = V.shape[0], n_meters = starts.shape[0] - 1
    cdef double g
    out[:, :] = 0.0
    for b in range(n_batch):
        for m in range(n_meters):
            g = G[b, m]
            if g == 0.0:
                continue
            for t in range(starts[m], starts[m + 1]):
                out[b, rows[t]] += g * vals[t] * V[b, cols[t]]
                out[b, cols[t]] += g * vals[t] * V[b, rows[t]]
