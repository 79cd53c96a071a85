/* Hot-loop kernels compiled on first import when a C compiler is present.
 *
 * Everything here is a plain sequential loop over contiguous (or explicitly
 * strided) buffers; no threads, no global state, so results are reproducible
 * on a given build.  Built with -ffast-math so gcc can use libmvec's vector
 * tanh/exp; callers must therefore never pass +-inf sentinels (the causal
 * softmax takes prefix lengths instead of masked scores for this reason).
 *
 * Each kernel is instantiated for float and double via FOR_EACH_DTYPE.
 */

#include <math.h>
#include <stddef.h>

#define FOR_EACH_DTYPE(X) \
    X(f32, float, tanhf, expf, sqrtf, 0.5f, 1.0f) \
    X(f64, double, tanh, exp, sqrt, 0.5, 1.0)

/* gelu, tanh form: out = 0.5 x (1 + tanh(a (x + b x^3))).  phi keeps the
 * 0.5(1+tanh(.)) factor so the backward pass avoids a second tanh. */
#define GELU(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void gelu_fwd_##SUF(const T *x, T *out, T *phi, ptrdiff_t n) { \
    const T a = (T)0.7978845608028654, b = (T)0.044715; \
    for (ptrdiff_t i = 0; i < n; i++) { \
        T xi = x[i]; \
        T p = HALF * (ONE + TANH(a * (xi + b * xi * xi * xi))); \
        phi[i] = p; \
        out[i] = xi * p; \
    } \
} \
void gelu_bwd_##SUF(const T *x, const T *phi, const T *g, T *dx, ptrdiff_t n) { \
    const T a = (T)0.7978845608028654, b = (T)0.044715; \
    for (ptrdiff_t i = 0; i < n; i++) { \
        T xi = x[i], p = phi[i]; \
        T d = p + xi * (T)2.0 * a * p * (ONE - p) * (ONE + (T)3.0 * b * xi * xi); \
        dx[i] = g[i] * d; \
    } \
}
FOR_EACH_DTYPE(GELU)

/* max-shifted softmax over the last axis */
#define SOFTMAX(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void softmax_fwd_##SUF(const T *s, T *y, ptrdiff_t rows, ptrdiff_t cols) { \
    for (ptrdiff_t r = 0; r < rows; r++) { \
        const T *sr = s + r * cols; \
        T *yr = y + r * cols; \
        T m = sr[0]; \
        for (ptrdiff_t j = 1; j < cols; j++) if (sr[j] > m) m = sr[j]; \
        T tot = (T)0.0; \
        for (ptrdiff_t j = 0; j < cols; j++) { T e = EXP(sr[j] - m); yr[j] = e; tot += e; } \
        T inv = ONE / tot; \
        for (ptrdiff_t j = 0; j < cols; j++) yr[j] *= inv; \
    } \
} \
/* causal rows: in batch b, query i sees keys [0, nk-nq+i]; the rest are
 * written as exact zeros, which also zeroes their backward signal. */ \
void softmax_causal_fwd_##SUF(const T *s, T *y, ptrdiff_t B, ptrdiff_t nq, ptrdiff_t nk) { \
    ptrdiff_t off = nk - nq; \
    for (ptrdiff_t b = 0; b < B; b++) { \
        for (ptrdiff_t i = 0; i < nq; i++) { \
            const T *sr = s + (b * nq + i) * nk; \
            T *yr = y + (b * nq + i) * nk; \
            ptrdiff_t v = off + i + 1; \
            T m = sr[0]; \
            for (ptrdiff_t j = 1; j < v; j++) if (sr[j] > m) m = sr[j]; \
            T tot = (T)0.0; \
            for (ptrdiff_t j = 0; j < v; j++) { T e = EXP(sr[j] - m); yr[j] = e; tot += e; } \
            T inv = ONE / tot; \
            for (ptrdiff_t j = 0; j < v; j++) yr[j] *= inv; \
            for (ptrdiff_t j = v; j < nk; j++) yr[j] = (T)0.0; \
        } \
    } \
} \
void softmax_bwd_##SUF(const T *y, const T *g, T *ds, ptrdiff_t rows, ptrdiff_t cols) { \
    for (ptrdiff_t r = 0; r < rows; r++) { \
        const T *yr = y + r * cols, *gr = g + r * cols; \
        T *dr = ds + r * cols; \
        T dot = (T)0.0; \
        for (ptrdiff_t j = 0; j < cols; j++) dot += gr[j] * yr[j]; \
        for (ptrdiff_t j = 0; j < cols; j++) dr[j] = (gr[j] - dot) * yr[j]; \
    } \
}
FOR_EACH_DTYPE(SOFTMAX)

/* row layer norm; mean/rstd are saved for the backward pass */
#define LAYERNORM(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void layer_norm_fwd_##SUF(const T *x, const T *gain, const T *bias, T eps, \
                          T *out, T *mean, T *rstd, ptrdiff_t rows, ptrdiff_t cols) { \
    for (ptrdiff_t r = 0; r < rows; r++) { \
        const T *xr = x + r * cols; \
        T *yr = out + r * cols; \
        T mu = (T)0.0; \
        for (ptrdiff_t j = 0; j < cols; j++) mu += xr[j]; \
        mu /= (T)cols; \
        T var = (T)0.0; \
        for (ptrdiff_t j = 0; j < cols; j++) { T d = xr[j] - mu; var += d * d; } \
        T rs = ONE / SQRT(var / (T)cols + eps); \
        mean[r] = mu; rstd[r] = rs; \
        for (ptrdiff_t j = 0; j < cols; j++) \
            yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j]; \
    } \
} \
/* dgain/dbias must arrive zeroed; rows accumulate into them */ \
void layer_norm_bwd_##SUF(const T *g, const T *x, const T *mean, const T *rstd, \
                          const T *gain, T *dx, T *dgain, T *dbias, \
                          ptrdiff_t rows, ptrdiff_t cols) { \
    for (ptrdiff_t r = 0; r < rows; r++) { \
        const T *gr = g + r * cols, *xr = x + r * cols; \
        T *dr = dx + r * cols; \
        T mu = mean[r], rs = rstd[r]; \
        T sg = (T)0.0, sgx = (T)0.0; \
        for (ptrdiff_t j = 0; j < cols; j++) { \
            T xh = (xr[j] - mu) * rs; \
            T dh = gr[j] * gain[j]; \
            sg += dh; sgx += dh * xh; \
            dgain[j] += gr[j] * xh; \
            dbias[j] += gr[j]; \
        } \
        sg /= (T)cols; sgx /= (T)cols; \
        for (ptrdiff_t j = 0; j < cols; j++) { \
            T xh = (xr[j] - mu) * rs; \
            dr[j] = rs * (gr[j] * gain[j] - sg - xh * sgx); \
        } \
    } \
}
FOR_EACH_DTYPE(LAYERNORM)

/* head split for attention: src rows are token vectors, possibly a column
 * window of a wider packed buffer (stride s1 elements between tokens); dst is
 * the contiguous (B*h, n, dh) layout batched GEMM wants.  scale folds the
 * 1/sqrt(dh) query scaling into the copy. */
#define PACK(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void pack_heads_##SUF(const T *src, ptrdiff_t s0, ptrdiff_t s1, T *dst, \
                      ptrdiff_t B, ptrdiff_t n, ptrdiff_t h, ptrdiff_t dh, T scale) { \
    for (ptrdiff_t b = 0; b < B; b++) \
        for (ptrdiff_t hd = 0; hd < h; hd++) \
            for (ptrdiff_t i = 0; i < n; i++) { \
                const T *sp = src + b * s0 + i * s1 + hd * dh; \
                T *dp = dst + ((b * h + hd) * n + i) * dh; \
                for (ptrdiff_t d = 0; d < dh; d++) dp[d] = sp[d] * scale; \
            } \
} \
void unpack_heads_##SUF(const T *src, T *dst, ptrdiff_t s0, ptrdiff_t s1, \
                        ptrdiff_t B, ptrdiff_t n, ptrdiff_t h, ptrdiff_t dh, T scale) { \
    for (ptrdiff_t b = 0; b < B; b++) \
        for (ptrdiff_t hd = 0; hd < h; hd++) \
            for (ptrdiff_t i = 0; i < n; i++) { \
                const T *sp = src + ((b * h + hd) * n + i) * dh; \
                T *dp = dst + b * s0 + i * s1 + hd * dh; \
                for (ptrdiff_t d = 0; d < dh; d++) dp[d] = sp[d] * scale; \
            } \
}
FOR_EACH_DTYPE(PACK)

/* Batched GEMMs for the attention tiles.  Every ladder rung has head width
 * 16 and token counts 16/64, so each (m, n) tile lives in L1; the j-vector
 * rank-1 update loop lets the compiler keep whole C rows in registers.  BLAS
 * batches these shapes a call at a time and loses most of the time to
 * per-call overhead.  Callers guarantee k*n and m*n <= 4096. */
#define BMM(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void bmm_nn_##SUF(const T *restrict A, const T *restrict B, T *restrict C, \
                  ptrdiff_t R, ptrdiff_t m, ptrdiff_t k, ptrdiff_t n) { \
    for (ptrdiff_t r = 0; r < R; r++) { \
        const T *restrict Ar = A + r * m * k, *restrict Br = B + r * k * n; \
        T *restrict Cr = C + r * m * n; \
        for (ptrdiff_t i = 0; i < m; i++) { \
            const T *restrict a = Ar + i * k; \
            T *restrict c = Cr + i * n; \
            for (ptrdiff_t j = 0; j < n; j++) c[j] = (T)0.0; \
            for (ptrdiff_t kk = 0; kk < k; kk++) { \
                T av = a[kk]; \
                const T *restrict b = Br + kk * n; \
                for (ptrdiff_t j = 0; j < n; j++) c[j] += av * b[j]; \
            } \
        } \
    } \
} \
/* C = A @ B^T with B stored (n, k): transpose each B tile once per batch */ \
void bmm_nt_##SUF(const T *restrict A, const T *restrict B, T *restrict C, \
                  ptrdiff_t R, ptrdiff_t m, ptrdiff_t k, ptrdiff_t n) { \
    T bt[4096]; \
    for (ptrdiff_t r = 0; r < R; r++) { \
        const T *restrict Ar = A + r * m * k, *restrict Br = B + r * n * k; \
        T *restrict Cr = C + r * m * n; \
        for (ptrdiff_t j = 0; j < n; j++) \
            for (ptrdiff_t kk = 0; kk < k; kk++) \
                bt[kk * n + j] = Br[j * k + kk]; \
        for (ptrdiff_t i = 0; i < m; i++) { \
            const T *restrict a = Ar + i * k; \
            T *restrict c = Cr + i * n; \
            for (ptrdiff_t j = 0; j < n; j++) c[j] = (T)0.0; \
            for (ptrdiff_t kk = 0; kk < k; kk++) { \
                T av = a[kk]; \
                const T *restrict b = bt + kk * n; \
                for (ptrdiff_t j = 0; j < n; j++) c[j] += av * b[j]; \
            } \
        } \
    } \
} \
/* C = A^T @ B with A stored (k, m) */ \
void bmm_tn_##SUF(const T *restrict A, const T *restrict B, T *restrict C, \
                  ptrdiff_t R, ptrdiff_t m, ptrdiff_t k, ptrdiff_t n) { \
    for (ptrdiff_t r = 0; r < R; r++) { \
        const T *restrict Ar = A + r * k * m, *restrict Br = B + r * k * n; \
        T *restrict Cr = C + r * m * n; \
        for (ptrdiff_t i = 0; i < m * n; i++) Cr[i] = (T)0.0; \
        for (ptrdiff_t kk = 0; kk < k; kk++) { \
            const T *restrict av = Ar + kk * m; \
            const T *restrict b = Br + kk * n; \
            for (ptrdiff_t i = 0; i < m; i++) { \
                T ai = av[i]; \
                T *restrict c = Cr + i * n; \
                for (ptrdiff_t j = 0; j < n; j++) c[j] += ai * b[j]; \
            } \
        } \
    } \
}
FOR_EACH_DTYPE(BMM)

/* column sum of a (rows, cols) matrix into a zeroed (cols,) vector */
#define COLSUM(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void colsum_##SUF(const T *a, T *out, ptrdiff_t rows, ptrdiff_t cols) { \
    for (ptrdiff_t r = 0; r < rows; r++) { \
        const T *ar = a + r * cols; \
        for (ptrdiff_t j = 0; j < cols; j++) out[j] += ar[j]; \
    } \
}
FOR_EACH_DTYPE(COLSUM)

/* squared l2 norm in a double accumulator; doubles as the finiteness probe
 * since any nan/inf in g lands in the result */
double sqsum_f32(const float *g, ptrdiff_t n) {
    double t = 0.0;
    for (ptrdiff_t i = 0; i < n; i++) t += (double)g[i] * (double)g[i];
    return t;
}
double sqsum_f64(const double *g, ptrdiff_t n) {
    double t = 0.0;
    for (ptrdiff_t i = 0; i < n; i++) t += g[i] * g[i];
    return t;
}

/* batched squared norms: one call for a whole parameter set */
void sqsum_multi_f32(const float **gs, const ptrdiff_t *ns, double *out, ptrdiff_t count) {
    for (ptrdiff_t k = 0; k < count; k++) out[k] = sqsum_f32(gs[k], ns[k]);
}
void sqsum_multi_f64(const double **gs, const ptrdiff_t *ns, double *out, ptrdiff_t count) {
    for (ptrdiff_t k = 0; k < count; k++) out[k] = sqsum_f64(gs[k], ns[k]);
}

/* one fused pass: grad clip scale, AdamW moment update with bias correction,
 * decoupled weight decay, then the EMA fold.  ib1/ib2 are the reciprocal
 * bias-correction factors 1/(1-b^t). */
#define ADAMW(SUF, T, TANH, EXP, SQRT, HALF, ONE) \
void adamw_ema_##SUF(T *p, const T *g, T *m, T *v, T *ema, \
                     T gscale, T lr, T b1, T b2, T eps, T wd, \
                     T ib1, T ib2, T decay, ptrdiff_t n) { \
    for (ptrdiff_t i = 0; i < n; i++) { \
        T gi = g[i] * gscale; \
        T mi = b1 * m[i] + (ONE - b1) * gi; \
        T vi = b2 * v[i] + (ONE - b2) * gi * gi; \
        m[i] = mi; v[i] = vi; \
        T pi = p[i]; \
        pi -= lr * ((mi * ib1) / (SQRT(vi * ib2) + eps) + wd * pi); \
        p[i] = pi; \
        ema[i] = decay * ema[i] + (ONE - decay) * pi; \
    } \
} \
void adamw_ema_multi_##SUF(T **ps, const T **gs, T **ms, T **vs, T **es, \
                           const ptrdiff_t *ns, T gscale, T lr, T b1, T b2, \
                           T eps, T wd, T ib1, T ib2, T decay, ptrdiff_t count) { \
    for (ptrdiff_t k = 0; k < count; k++) \
        adamw_ema_##SUF(ps[k], gs[k], ms[k], vs[k], es[k], \
                        gscale, lr, b1, b2, eps, wd, ib1, ib2, decay, ns[k]); \
}
FOR_EACH_DTYPE(ADAMW)
