#ifndef LDR_LAB_SEQGEMM_H
#define LDR_LAB_SEQGEMM_H

/*
 * C[m, n] = A[m, k] @ B[k, n] for arbitrarily strided A and B (strides in
 * elements).  C is row-major contiguous.  Each C[i, j] is summed over
 * p = 0 .. k-1 in ascending order with separate multiply and add, so the
 * result is bit-identical to the naive loop.  Returns 0, or -1 if scratch
 * allocation fails.
 */
int seq_gemm(const double *A, long a_rs, long a_cs,
             const double *B, long b_rs, long b_cs,
             double *C, long m, long k, long n);

#endif
