#include <stdlib.h>
#include <string.h>

#include "seqgemm.h"

/* 4x8 register tile; larger tiles spill on common x86-64 targets. */
#define MR 4
#define NR 8

static void tile(const double *ap, const double *bp, double *c, long ldc, long k)
{
    double acc[MR][NR];
    long p, r, j;

    memset(acc, 0, sizeof(acc));
    for (p = 0; p < k; p++) {
        const double *a = ap + p * MR;
        const double *b = bp + p * NR;
        for (r = 0; r < MR; r++)
            for (j = 0; j < NR; j++)
                acc[r][j] += a[r] * b[j];
    }
    for (r = 0; r < MR; r++)
        memcpy(c + r * ldc, acc[r], sizeof(acc[r]));
}

int seq_gemm(const double *A, long a_rs, long a_cs,
             const double *B, long b_rs, long b_cs,
             double *C, long m, long k, long n)
{
    long i, j, p, r, c;
    double *ap, *bp, edge[MR * NR];

    if (m == 0 || n == 0)
        return 0;
    if (k == 0) {
        memset(C, 0, sizeof(double) * m * n);
        return 0;
    }
    ap = malloc(sizeof(double) * k * MR);
    bp = malloc(sizeof(double) * k * NR);
    if (ap == NULL || bp == NULL) {
        free(ap);
        free(bp);
        return -1;
    }
    for (j = 0; j < n; j += NR) {
        long nr = (n - j < NR) ? n - j : NR;
        for (p = 0; p < k; p++)
            for (c = 0; c < NR; c++)
                bp[p * NR + c] = c < nr ? B[p * b_rs + (j + c) * b_cs] : 0.0;
        for (i = 0; i < m; i += MR) {
            long mr = (m - i < MR) ? m - i : MR;
            for (p = 0; p < k; p++)
                for (r = 0; r < MR; r++)
                    ap[p * MR + r] = r < mr ? A[(i + r) * a_rs + p * a_cs] : 0.0;
            if (mr == MR && nr == NR) {
                tile(ap, bp, C + i * n + j, n, k);
            } else {
                tile(ap, bp, edge, NR, k);
                for (r = 0; r < mr; r++)
                    memcpy(C + (i + r) * n + j, edge + r * NR, sizeof(double) * nr);
            }
        }
    }
    free(ap);
    free(bp);
    return 0;
}
