#include "kernels.h"

#include <math.h>
#include <string.h>

#define GELU_C 0.7978845608028654 /* sqrt(2/pi) */
#ifndef ET_LN_MAX
#define ET_LN_MAX 4096
#endif

static size_t a_index(int trans, int rows, int cols, int i, int k)
{
    /* element (i, k) of op(A) where op(A) is rows x cols */
    return trans ? (size_t)k * rows + i : (size_t)i * cols + k;
}

void k_gemm(const real *a, const real *b, const real *bias, real *y,
            int batch, int m, int n, int k, int trans_a, int trans_b)
{
    int t, i, j, q;
    for (t = 0; t < batch; ++t) {
        const real *at = a + (size_t)t * m * k;
        const real *bt = b + (size_t)t * k * n;
        real *yt = y + (size_t)t * m * n;
        for (i = 0; i < m; ++i) {
            for (j = 0; j < n; ++j) {
                real acc = 0;
                for (q = 0; q < k; ++q) {
                    real prod = at[a_index(trans_a, m, k, i, q)] * bt[a_index(trans_b, k, n, q, j)];
                    acc = acc + prod;
                }
                if (bias)
                    acc = acc + bias[j];
                yt[(size_t)i * n + j] = acc;
            }
        }
    }
}

void k_gemm_tiled(const real *a, const real *b, const real *bias, real *y,
                  int batch, int m, int n, int k, int trans_a, int trans_b,
                  int mt, int nt, int kt, real *l1, size_t l1_elems)
{
    /* one buffer set: A tile | B tile | accumulator; two sets alternate */
    size_t set = (size_t)mt * kt + (size_t)kt * nt + (size_t)mt * nt;
    int t, m0, n0, k0, i, j, q, tile = 0;
    if (2 * set > l1_elems) {
        /* the planner never emits such a tile; stay correct anyway */
        k_gemm(a, b, bias, y, batch, m, n, k, trans_a, trans_b);
        return;
    }
    for (t = 0; t < batch; ++t) {
        const real *at = a + (size_t)t * m * k;
        const real *bt = b + (size_t)t * k * n;
        real *yt = y + (size_t)t * m * n;
        for (m0 = 0; m0 < m; m0 += mt) {
            int m1 = m0 + mt < m ? m0 + mt : m;
            for (n0 = 0; n0 < n; n0 += nt) {
                int n1 = n0 + nt < n ? n0 + nt : n;
                real *acc = l1 + (size_t)(tile & 1) * set + (size_t)mt * kt + (size_t)kt * nt;
                for (i = 0; i < m1 - m0; ++i)
                    for (j = 0; j < n1 - n0; ++j)
                        acc[(size_t)i * nt + j] = 0;
                for (k0 = 0; k0 < k; k0 += kt) {
                    int k1 = k0 + kt < k ? k0 + kt : k;
                    real *base = l1 + (size_t)(tile & 1) * set;
                    real *ta = base, *tb = base + (size_t)mt * kt;
                    acc = base + (size_t)mt * kt + (size_t)kt * nt;
                    if (k0 > 0) {
                        /* carry the accumulator into the buffer set now in use */
                        real *prev = l1 + (size_t)((tile + 1) & 1) * set + (size_t)mt * kt + (size_t)kt * nt;
                        for (i = 0; i < m1 - m0; ++i)
                            for (j = 0; j < n1 - n0; ++j)
                                acc[(size_t)i * nt + j] = prev[(size_t)i * nt + j];
                    }
                    for (i = m0; i < m1; ++i)
                        for (q = k0; q < k1; ++q)
                            ta[(size_t)(i - m0) * kt + (q - k0)] = at[a_index(trans_a, m, k, i, q)];
                    for (q = k0; q < k1; ++q)
                        for (j = n0; j < n1; ++j)
                            tb[(size_t)(q - k0) * nt + (j - n0)] = bt[a_index(trans_b, k, n, q, j)];
                    for (i = 0; i < m1 - m0; ++i)
                        for (j = 0; j < n1 - n0; ++j) {
                            real s = acc[(size_t)i * nt + j];
                            for (q = 0; q < k1 - k0; ++q) {
                                real prod = ta[(size_t)i * kt + q] * tb[(size_t)q * nt + j];
                                s = s + prod;
                            }
                            acc[(size_t)i * nt + j] = s;
                        }
                    ++tile;
                }
                acc = l1 + (size_t)((tile + 1) & 1) * set + (size_t)mt * kt + (size_t)kt * nt;
                for (i = m0; i < m1; ++i)
                    for (j = n0; j < n1; ++j) {
                        real v = acc[(size_t)(i - m0) * nt + (j - n0)];
                        if (bias)
                            v = v + bias[j];
                        yt[(size_t)i * n + j] = v;
                    }
            }
        }
    }
}

/* patch element (c, ki, kj) at output position (oh, ow); zero in the padding */
static real patch(const real *xb, int h, int wd, int c, int ki, int kj, int oh, int ow, int s, int p)
{
    int ih = oh * s + ki - p, iw = ow * s + kj - p;
    if (ih < 0 || ih >= h || iw < 0 || iw >= wd)
        return 0;
    return xb[((size_t)c * h + ih) * wd + iw];
}

void k_conv2d(const real *x, const real *w, real *y, int n, int c, int h, int wd,
              int co, int kk, int s, int p)
{
    int ho = (h + 2 * p - kk) / s + 1, wo = (wd + 2 * p - kk) / s + 1;
    int b, o, oh, ow, ci, ki, kj;
    for (b = 0; b < n; ++b) {
        const real *xb = x + (size_t)b * c * h * wd;
        for (o = 0; o < co; ++o)
            for (oh = 0; oh < ho; ++oh)
                for (ow = 0; ow < wo; ++ow) {
                    real acc = 0;
                    const real *wo_ = w + (size_t)o * c * kk * kk;
                    for (ci = 0; ci < c; ++ci)
                        for (ki = 0; ki < kk; ++ki)
                            for (kj = 0; kj < kk; ++kj) {
                                real prod = patch(xb, h, wd, ci, ki, kj, oh, ow, s, p) *
                                            wo_[((size_t)ci * kk + ki) * kk + kj];
                                acc = acc + prod;
                            }
                    y[(((size_t)b * co + o) * ho + oh) * wo + ow] = acc;
                }
    }
}

void k_conv2d_grad_weight(const real *x, const real *dy, real *dw, int n, int c, int h, int wd,
                          int co, int kk, int s, int p)
{
    int ho = (h + 2 * p - kk) / s + 1, wo = (wd + 2 * p - kk) / s + 1;
    int o, ci, ki, kj, b, oh, ow;
    for (o = 0; o < co; ++o)
        for (ci = 0; ci < c; ++ci)
            for (ki = 0; ki < kk; ++ki)
                for (kj = 0; kj < kk; ++kj) {
                    real acc = 0;
                    for (b = 0; b < n; ++b) {
                        const real *xb = x + (size_t)b * c * h * wd;
                        const real *db = dy + ((size_t)b * co + o) * ho * wo;
                        for (oh = 0; oh < ho; ++oh)
                            for (ow = 0; ow < wo; ++ow) {
                                real prod = db[(size_t)oh * wo + ow] * patch(xb, h, wd, ci, ki, kj, oh, ow, s, p);
                                acc = acc + prod;
                            }
                    }
                    dw[(((size_t)o * c + ci) * kk + ki) * kk + kj] = acc;
                }
}

void k_conv2d_grad_input(const real *w, const real *dy, real *dx, real *cols, int n, int c, int h, int wd,
                         int co, int kk, int s, int p)
{
    /* cols is scratch of (ho*wo) x (c*kk*kk); column gradients, then col2im in (ki, kj) order */
    int ho = (h + 2 * p - kk) / s + 1, wo = (wd + 2 * p - kk) / s + 1;
    int ckk = c * kk * kk, b, pos, j, o, ci, ki, kj, oh, ow;
    for (b = 0; b < n; ++b) {
        const real *db = dy + (size_t)b * co * ho * wo;
        real *xb = dx + (size_t)b * c * h * wd;
        for (pos = 0; pos < ho * wo; ++pos)
            for (j = 0; j < ckk; ++j) {
                real acc = 0;
                for (o = 0; o < co; ++o) {
                    real prod = db[(size_t)o * ho * wo + pos] * w[(size_t)o * ckk + j];
                    acc = acc + prod;
                }
                cols[(size_t)pos * ckk + j] = acc;
            }
        memset(xb, 0, sizeof(real) * (size_t)c * h * wd);
        for (ci = 0; ci < c; ++ci)
            for (ki = 0; ki < kk; ++ki)
                for (kj = 0; kj < kk; ++kj)
                    for (oh = 0; oh < ho; ++oh)
                        for (ow = 0; ow < wo; ++ow) {
                            int ih = oh * s + ki - p, iw = ow * s + kj - p;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= wd)
                                continue;
                            xb[((size_t)ci * h + ih) * wd + iw] +=
                                cols[(size_t)(oh * wo + ow) * ckk + ((size_t)ci * kk + ki) * kk + kj];
                        }
    }
}

static int pool_argmax(const real *xc, int h, int w, int kk, int s, int p, int oh, int ow, real *best)
{
    int ki, kj, idx = 0, first = 1;
    for (ki = 0; ki < kk; ++ki)
        for (kj = 0; kj < kk; ++kj) {
            int ih = oh * s + ki - p, iw = ow * s + kj - p;
            real v;
            if (ih < 0 || ih >= h || iw < 0 || iw >= w)
                continue;
            v = xc[(size_t)ih * w + iw];
            if (first || v > *best) {
                *best = v;
                idx = ki * kk + kj;
                first = 0;
            }
        }
    return idx;
}

void k_maxpool(const real *x, real *y, int n, int c, int h, int w, int kk, int s, int p)
{
    int ho = (h + 2 * p - kk) / s + 1, wo = (w + 2 * p - kk) / s + 1;
    int b, ci, oh, ow;
    for (b = 0; b < n; ++b)
        for (ci = 0; ci < c; ++ci) {
            const real *xc = x + ((size_t)b * c + ci) * h * w;
            real *yc = y + ((size_t)b * c + ci) * ho * wo;
            for (oh = 0; oh < ho; ++oh)
                for (ow = 0; ow < wo; ++ow) {
                    real best = 0;
                    pool_argmax(xc, h, w, kk, s, p, oh, ow, &best);
                    yc[(size_t)oh * wo + ow] = best;
                }
        }
}

void k_maxpool_grad(const real *x, const real *dy, real *dx, int n, int c, int h, int w, int kk, int s, int p)
{
    int ho = (h + 2 * p - kk) / s + 1, wo = (w + 2 * p - kk) / s + 1;
    int b, ci, oh, ow, ki, kj;
    for (b = 0; b < n; ++b)
        for (ci = 0; ci < c; ++ci) {
            const real *xc = x + ((size_t)b * c + ci) * h * w;
            const real *dc = dy + ((size_t)b * c + ci) * ho * wo;
            real *gc = dx + ((size_t)b * c + ci) * h * w;
            memset(gc, 0, sizeof(real) * (size_t)h * w);
            /* window offsets outermost, as in the interpreter */
            for (ki = 0; ki < kk; ++ki)
                for (kj = 0; kj < kk; ++kj)
                    for (oh = 0; oh < ho; ++oh)
                        for (ow = 0; ow < wo; ++ow) {
                            real best = 0;
                            int ih = oh * s + ki - p, iw = ow * s + kj - p;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= w)
                                continue;
                            if (pool_argmax(xc, h, w, kk, s, p, oh, ow, &best) == ki * kk + kj)
                                gc[(size_t)ih * w + iw] += dc[(size_t)oh * wo + ow];
                        }
        }
}

void k_add(const real *a, const real *b, real *y, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        y[i] = a[i] + b[i];
}

void k_mul(const real *a, const real *b, real *y, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        y[i] = a[i] * b[i];
}

void k_scale(const real *a, real f, real *y, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        y[i] = a[i] * f;
}

void k_copy(const real *a, real *y, size_t len)
{
    memcpy(y, a, sizeof(real) * len);
}

void k_relu(const real *x, real *y, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        y[i] = x[i] > 0 ? x[i] : 0;
}

void k_relu_grad(const real *x, const real *dy, real *dx, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        dx[i] = x[i] > 0 ? dy[i] : 0;
}

void k_gelu(const real *x, real *y, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i) {
        double xd = x[i];
        double inner = GELU_C * (xd + 0.044715 * (xd * xd * xd));
        y[i] = (real)(0.5 * xd * (1.0 + tanh(inner)));
    }
}

void k_gelu_grad(const real *x, const real *dy, real *dx, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i) {
        double xd = x[i];
        double t = tanh(GELU_C * (xd + 0.044715 * (xd * xd * xd)));
        double d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * (xd * xd));
        dx[i] = (real)((double)dy[i] * d);
    }
}

void k_transpose(const real *x, real *y, int rank, const int *shape, const int *perm)
{
    size_t in_stride[8], total = 1, i;
    int out_shape[8], idx[8], d;
    for (d = rank - 1; d >= 0; --d) {
        in_stride[d] = total;
        total *= (size_t)shape[d];
    }
    for (d = 0; d < rank; ++d) {
        out_shape[d] = shape[perm[d]];
        idx[d] = 0;
    }
    for (i = 0; i < total; ++i) {
        size_t src = 0;
        for (d = 0; d < rank; ++d)
            src += (size_t)idx[d] * in_stride[perm[d]];
        y[i] = x[src];
        for (d = rank - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d])
                break;
            idx[d] = 0;
        }
    }
}

void k_softmax(const real *x, real *y, int outer, int len, int inner)
{
    int o, j, i;
    for (o = 0; o < outer; ++o)
        for (i = 0; i < inner; ++i) {
            const real *xr = x + (size_t)o * len * inner + i;
            real *yr = y + (size_t)o * len * inner + i;
            real m = xr[0], sum = 0;
            for (j = 1; j < len; ++j)
                if (xr[(size_t)j * inner] > m)
                    m = xr[(size_t)j * inner];
            for (j = 0; j < len; ++j) {
                real e = (real)exp((double)(xr[(size_t)j * inner] - m));
                yr[(size_t)j * inner] = e;
                sum = sum + e;
            }
            for (j = 0; j < len; ++j)
                yr[(size_t)j * inner] = yr[(size_t)j * inner] / sum;
        }
}

void k_softmax_grad(const real *y, const real *dy, real *dx, int outer, int len, int inner)
{
    int o, j, i;
    for (o = 0; o < outer; ++o)
        for (i = 0; i < inner; ++i) {
            size_t base = (size_t)o * len * inner + i;
            real dot = 0;
            for (j = 0; j < len; ++j) {
                real prod = dy[base + (size_t)j * inner] * y[base + (size_t)j * inner];
                dot = dot + prod;
            }
            for (j = 0; j < len; ++j)
                dx[base + (size_t)j * inner] = (dy[base + (size_t)j * inner] - dot) * y[base + (size_t)j * inner];
        }
}

void k_reduce_sum(const real *x, real *y, int outer, int len, int inner)
{
    int o, j, i;
    for (o = 0; o < outer; ++o)
        for (i = 0; i < inner; ++i) {
            real acc = 0;
            for (j = 0; j < len; ++j)
                acc = acc + x[((size_t)o * len + j) * inner + i];
            y[(size_t)o * inner + i] = acc;
        }
}

void k_split(const real *x, real *const *ys, int nparts, const int *sizes, int outer, int len, int inner)
{
    int o, q, start = 0;
    for (q = 0; q < nparts; ++q) {
        for (o = 0; o < outer; ++o)
            memcpy(ys[q] + (size_t)o * sizes[q] * inner, x + ((size_t)o * len + start) * inner,
                   sizeof(real) * (size_t)sizes[q] * inner);
        start += sizes[q];
    }
}

void k_concat(const real *const *xs, real *y, int nparts, const int *sizes, const int *present,
              int outer, int inner)
{
    int o, q, len = 0, start, used;
    for (q = 0; q < nparts; ++q)
        len += sizes[q];
    for (o = 0; o < outer; ++o) {
        start = 0;
        used = 0;
        for (q = 0; q < nparts; ++q) {
            real *dst = y + ((size_t)o * len + start) * inner;
            size_t cnt = (size_t)sizes[q] * inner;
            if (present[q])
                memcpy(dst, xs[used++] + (size_t)o * cnt, sizeof(real) * cnt);
            else
                memset(dst, 0, sizeof(real) * cnt);
            start += sizes[q];
        }
    }
}

static void ln_stats(const real *xr, int n, real eps, real *xc, real *rstd)
{
    real mean = 0, var = 0;
    int j;
    for (j = 0; j < n; ++j)
        mean = mean + xr[j];
    mean = mean / (real)n;
    for (j = 0; j < n; ++j) {
        real sq;
        xc[j] = xr[j] - mean;
        sq = xc[j] * xc[j];
        var = var + sq;
    }
    var = var / (real)n;
    *rstd = (real)1 / (real)sqrt((double)(var + eps));
}

void k_layernorm(const real *x, const real *g, const real *b, real *y, int rows, int n, real eps)
{
    int r, j;
    for (r = 0; r < rows; ++r) {
        real rstd;
        real *yr = y + (size_t)r * n;
        ln_stats(x + (size_t)r * n, n, eps, yr, &rstd);
        for (j = 0; j < n; ++j)
            yr[j] = yr[j] * rstd * g[j] + b[j];
    }
}

void k_layernorm_grad(const real *x, const real *g, const real *dy, real *dx, real *dg, real *db,
                      int rows, int n, real eps)
{
    int r, j;
    if (dg) {
        for (j = 0; j < n; ++j) {
            dg[j] = 0;
            db[j] = 0;
        }
    }
    for (r = 0; r < rows; ++r) {
        const real *dyr = dy + (size_t)r * n;
        real rstd, a = 0, bs = 0;
        real xhat[ET_LN_MAX];
        ln_stats(x + (size_t)r * n, n, eps, xhat, &rstd);
        for (j = 0; j < n; ++j)
            xhat[j] = xhat[j] * rstd;
        if (dx) {
            real *dxr = dx + (size_t)r * n;
            for (j = 0; j < n; ++j) {
                real dxh = dyr[j] * g[j];
                real prod = dxh * xhat[j];
                a = a + dxh;
                bs = bs + prod;
            }
            for (j = 0; j < n; ++j) {
                real dxh = dyr[j] * g[j];
                dxr[j] = ((dxh * (real)n - a) - xhat[j] * bs) * (rstd / (real)n);
            }
        }
        if (dg) {
            for (j = 0; j < n; ++j) {
                real prod = dyr[j] * xhat[j];
                dg[j] = dg[j] + prod;
                db[j] = db[j] + dyr[j];
            }
        }
    }
}

void k_cross_entropy(const real *logits, const real *labels, real *loss, int rows, int classes)
{
    double total = 0;
    int r, j;
    for (r = 0; r < rows; ++r) {
        const real *lr = logits + (size_t)r * classes;
        const real *tr = labels + (size_t)r * classes;
        double m = lr[0], s = 0, lse, row = 0;
        for (j = 1; j < classes; ++j)
            if ((double)lr[j] > m)
                m = lr[j];
        for (j = 0; j < classes; ++j)
            s = s + exp((double)lr[j] - m);
        lse = m + log(s);
        for (j = 0; j < classes; ++j)
            row = row + (-(double)tr[j]) * ((double)lr[j] - lse);
        total = total + row;
    }
    loss[0] = (real)(total / rows);
}

void k_cross_entropy_grad(const real *logits, const real *labels, real *dx, int rows, int classes)
{
    int r, j;
    for (r = 0; r < rows; ++r) {
        const real *lr = logits + (size_t)r * classes;
        double m = lr[0], s = 0;
        for (j = 1; j < classes; ++j)
            if ((double)lr[j] > m)
                m = lr[j];
        for (j = 0; j < classes; ++j)
            s = s + exp((double)lr[j] - m);
        for (j = 0; j < classes; ++j) {
            double pj = exp((double)lr[j] - m) / s;
            dx[(size_t)r * classes + j] = (real)((pj - (double)labels[(size_t)r * classes + j]) / rows);
        }
    }
}

void k_mse(const real *y, const real *t, real *loss, size_t len)
{
    double acc = 0;
    size_t i;
    for (i = 0; i < len; ++i) {
        double d = (double)y[i] - (double)t[i];
        acc = acc + d * d;
    }
    loss[0] = (real)(acc / (double)len);
}

void k_mse_grad(const real *y, const real *t, real *dy, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        dy[i] = (real)(2.0 * ((double)y[i] - (double)t[i]) / (double)len);
}

void k_accumulate(const real *const *xs, int count, real *y, size_t len)
{
    size_t i;
    int q;
    for (i = 0; i < len; ++i) {
        real acc = xs[0][i];
        for (q = 1; q < count; ++q)
            acc = acc + xs[q][i];
        y[i] = acc;
    }
}

void k_sgd(const real *w, const real *g, real lr, real *out, size_t len)
{
    size_t i;
    for (i = 0; i < len; ++i)
        out[i] = w[i] - lr * g[i];
}

double k_sum(const real *x, size_t len)
{
    double acc = 0;
    size_t i;
    for (i = 0; i < len; ++i)
        acc += (double)x[i];
    return acc;
}

const et_gemm_table et_offload = {k_gemm, k_gemm_tiled, k_conv2d, k_conv2d_grad_input, k_conv2d_grad_weight};
