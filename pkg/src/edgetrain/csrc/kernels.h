/* Reference training kernels. Every reduction runs in ascending index order
 * and every product is rounded before it is added, mirroring the Python
 * interpreter; transcendentals are evaluated in double precision. */
#ifndef ET_KERNELS_H
#define ET_KERNELS_H

#include <stddef.h>

#include "et_config.h"

#ifndef ET_REAL
#define ET_REAL float
#endif
typedef ET_REAL real;

/* Gemm: Y[b] = op(A[b]) op(B[b]) (+ bias[n]); batch dims are leading. */
void k_gemm(const real *a, const real *b, const real *bias, real *y,
            int batch, int m, int n, int k, int trans_a, int trans_b);
/* Same arithmetic, iterated over (Mt, Nt, Kt) tiles staged through l1. */
void k_gemm_tiled(const real *a, const real *b, const real *bias, real *y,
                  int batch, int m, int n, int k, int trans_a, int trans_b,
                  int mt, int nt, int kt, real *l1, size_t l1_elems);

void k_conv2d(const real *x, const real *w, real *y, int n, int c, int h, int wd,
              int co, int kk, int s, int p);
void k_conv2d_grad_weight(const real *x, const real *dy, real *dw, int n, int c, int h, int wd,
                          int co, int kk, int s, int p);
void k_conv2d_grad_input(const real *w, const real *dy, real *dx, real *cols, int n, int c, int h, int wd,
                         int co, int kk, int s, int p);
void k_maxpool(const real *x, real *y, int n, int c, int h, int w, int kk, int s, int p);
void k_maxpool_grad(const real *x, const real *dy, real *dx, int n, int c, int h, int w, int kk, int s, int p);

void k_add(const real *a, const real *b, real *y, size_t len);
void k_mul(const real *a, const real *b, real *y, size_t len);
void k_scale(const real *a, real f, real *y, size_t len);
void k_copy(const real *a, real *y, size_t len);
void k_relu(const real *x, real *y, size_t len);
void k_relu_grad(const real *x, const real *dy, real *dx, size_t len);
void k_gelu(const real *x, real *y, size_t len);
void k_gelu_grad(const real *x, const real *dy, real *dx, size_t len);
void k_transpose(const real *x, real *y, int rank, const int *shape, const int *perm);

/* axis-wise ops see the tensor as [outer, len, inner] */
void k_softmax(const real *x, real *y, int outer, int len, int inner);
void k_softmax_grad(const real *y, const real *dy, real *dx, int outer, int len, int inner);
void k_reduce_sum(const real *x, real *y, int outer, int len, int inner);
void k_split(const real *x, real *const *ys, int nparts, const int *sizes, int outer, int len, int inner);
void k_concat(const real *const *xs, real *y, int nparts, const int *sizes, const int *present,
              int outer, int inner);

void k_layernorm(const real *x, const real *g, const real *b, real *y, int rows, int n, real eps);
void k_layernorm_grad(const real *x, const real *g, const real *dy, real *dx, real *dg, real *db,
                      int rows, int n, real eps);

void k_cross_entropy(const real *logits, const real *labels, real *loss, int rows, int classes);
void k_cross_entropy_grad(const real *logits, const real *labels, real *dx, int rows, int classes);
void k_mse(const real *y, const real *t, real *loss, size_t len);
void k_mse_grad(const real *y, const real *t, real *dy, size_t len);
void k_accumulate(const real *const *xs, int count, real *y, size_t len);
void k_sgd(const real *w, const real *g, real lr, real *out, size_t len);

double k_sum(const real *x, size_t len);

/* GEMM-like kernels are dispatched through this table so that an accelerator
 * driver can replace the scalar reference implementations. */
typedef struct {
    void (*gemm)(const real *, const real *, const real *, real *, int, int, int, int, int, int);
    void (*gemm_tiled)(const real *, const real *, const real *, real *, int, int, int, int, int, int,
                       int, int, int, real *, size_t);
    void (*conv2d)(const real *, const real *, real *, int, int, int, int, int, int, int, int);
    void (*conv2d_grad_input)(const real *, const real *, real *, real *, int, int, int, int, int, int,
                              int, int);
    void (*conv2d_grad_weight)(const real *, const real *, real *, int, int, int, int, int, int, int, int);
} et_gemm_table;

extern const et_gemm_table et_offload;

#endif
