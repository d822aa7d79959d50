# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels.  Imported through :mod:`ldr_lab.kernels` only."""

import numpy as np

cdef extern from "seqgemm.h":
    int seq_gemm(const double *A, long a_rs, long a_cs,
                 const double *B, long b_rs, long b_cs,
                 double *C, long m, long k, long n) nogil


def matmul(const double[:, :] a, const double[:, :] b):
    cdef long m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef int rc
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: ({m}, {k}) @ ({b.shape[0]}, {n})")
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    if m == 0 or n == 0:
        return out
    cdef long isz = sizeof(double)
    # k == 0 leaves a/b with no addressable element
    cdef const double *pa = &a[0, 0] if k > 0 else NULL
    cdef const double *pb = &b[0, 0] if k > 0 else NULL
    with nogil:
        rc = seq_gemm(pa, a.strides[0] // isz, a.strides[1] // isz,
                      pb, b.strides[0] // isz, b.strides[1] // isz,
                      &c[0, 0], m, k, n)
    if rc != 0:
        raise MemoryError("seq_gemm scratch allocation failed")
    return out
