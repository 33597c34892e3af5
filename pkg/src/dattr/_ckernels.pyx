# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels; same signatures and layout as ``dattr._pykernels``."""

from libc.math cimport erf, exp, log, sqrt, isfinite, M_SQRT1_2
from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

import numpy as np

BACKEND = "c"

cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline void gemm_rm(bint ta, bint tb, int M, int N, int K, double alpha,
                         const double* A, int lda, const double* B, int ldb,
                         double beta, double* C, int ldc) noexcept nogil:
    # row-major C = alpha*op(A)@op(B) + beta*C, via column-major C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if tb else b'N'
    cdef char cb = b'T' if ta else b'N'
    cdef int i, j
    if M == 0 or N == 0:
        return
    if K == 0:
        for i in range(M):
            for j in range(N):
                C[i * ldc + j] = beta * C[i * ldc + j] if beta != 0.0 else 0.0
        return
    dgemm(&ca, &cb, &N, &M, &K, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef struct Net:
    int L              # number of affine layers
    int n              # rows in the current batch
    int64_t* dims
    int64_t* woff      # offset of W_l in theta
    int64_t* boff      # offset of b_l in theta
    int maxw           # widest layer
    double** acts      # acts[l]: input to layer l, n x dims[l]
    double** pre       # pre[l]: pre-activation of layer l, n x dims[l+1]
    double** d1        # GeLU' at pre[l], hidden layers only
    double** d2        # GeLU'' at pre[l]
    double* xbuf       # gathered batch features
    double* ybuf       # gathered targets
    double* delta      # n x maxw scratch
    double* tmp        # n x maxw scratch
    double* losses     # n


cdef int net_alloc(Net* net, const int64_t* dims, int ndims, int n) noexcept nogil:
    cdef int l
    cdef int64_t off = 0
    net.L = ndims - 1
    net.n = n
    net.dims = <int64_t*>malloc(ndims * sizeof(int64_t))
    net.woff = <int64_t*>malloc(net.L * sizeof(int64_t))
    net.boff = <int64_t*>malloc(net.L * sizeof(int64_t))
    net.acts = <double**>calloc(net.L, sizeof(double*))
    net.pre = <double**>calloc(net.L, sizeof(double*))
    net.d1 = <double**>calloc(net.L, sizeof(double*))
    net.d2 = <double**>calloc(net.L, sizeof(double*))
    net.maxw = 1
    for l in range(ndims):
        net.dims[l] = dims[l]
        if dims[l] > net.maxw:
            net.maxw = <int>dims[l]
    for l in range(net.L):
        net.woff[l] = off
        off += dims[l] * dims[l + 1]
        net.boff[l] = off
        off += dims[l + 1]
        if l > 0:
            net.acts[l] = <double*>malloc(n * dims[l] * sizeof(double))
        net.pre[l] = <double*>malloc(n * dims[l + 1] * sizeof(double))
        if l < net.L - 1:
            net.d1[l] = <double*>malloc(n * dims[l + 1] * sizeof(double))
            net.d2[l] = <double*>malloc(n * dims[l + 1] * sizeof(double))
    net.xbuf = <double*>malloc(n * dims[0] * sizeof(double))
    net.ybuf = <double*>malloc(n * dims[ndims - 1] * sizeof(double))
    net.acts[0] = net.xbuf
    net.delta = <double*>malloc(n * net.maxw * sizeof(double))
    net.tmp = <double*>malloc(n * net.maxw * sizeof(double))
    net.losses = <double*>malloc(n * sizeof(double))
    return 0


cdef void net_free(Net* net) noexcept nogil:
    cdef int l
    for l in range(net.L):
        if l > 0:
            free(net.acts[l])
        free(net.pre[l])
        free(net.d1[l])
        free(net.d2[l])
    free(net.acts); free(net.pre); free(net.d1); free(net.d2)
    free(net.dims); free(net.woff); free(net.boff)
    free(net.xbuf); free(net.ybuf); free(net.delta); free(net.tmp); free(net.losses)


cdef void gather(Net* net, const double* X, const double* Y, const int64_t* idx) noexcept nogil:
    cdef int j
    cdef int64_t d0 = net.dims[0]
    cdef int64_t dl = net.dims[net.L]
    for j in range(net.n):
        memcpy(net.xbuf + j * d0, X + idx[j] * d0, d0 * sizeof(double))
        if Y != NULL:
            memcpy(net.ybuf + j * dl, Y + idx[j] * dl, dl * sizeof(double))


cdef void net_forward(Net* net, const double* theta) noexcept nogil:
    cdef int l, j, i
    cdef int n = net.n
    cdef int fin, fout
    cdef double a, cdf, pdf
    cdef double* P
    cdef const double* b
    for l in range(net.L):
        fin = <int>net.dims[l]
        fout = <int>net.dims[l + 1]
        P = net.pre[l]
        b = theta + net.boff[l]
        gemm_rm(False, True, n, fout, fin, 1.0, net.acts[l], fin, theta + net.woff[l], fin,
                0.0, P, fout)
        for j in range(n):
            for i in range(fout):
                P[j * fout + i] += b[i]
        if l < net.L - 1:
            for j in range(n * fout):
                a = P[j]
                cdf = 0.5 * (1.0 + erf(a * M_SQRT1_2))
                pdf = exp(-0.5 * a * a) * INV_SQRT_2PI
                net.acts[l + 1][j] = a * cdf
                net.d1[l][j] = cdf + a * pdf
                net.d2[l][j] = pdf * (2.0 - a * a)


cdef void loss_terms(Net* net, int loss, double* G, double* P) noexcept nogil:
    """Per-example losses into net.losses, output gradients into G, softmax into P."""
    cdef int j, i
    cdef int dl = <int>net.dims[net.L]
    cdef double* F = net.pre[net.L - 1]
    cdef double* Y = net.ybuf
    cdef double s, r, mx, z, ysum, yf
    for j in range(net.n):
        if loss == 0:
            s = 0.0
            for i in range(dl):
                r = F[j * dl + i] - Y[j * dl + i]
                G[j * dl + i] = r
                s += r * r
            net.losses[j] = 0.5 * s
        else:
            mx = F[j * dl]
            for i in range(1, dl):
                if F[j * dl + i] > mx:
                    mx = F[j * dl + i]
            z = 0.0
            for i in range(dl):
                P[j * dl + i] = exp(F[j * dl + i] - mx)
                z += P[j * dl + i]
            ysum = 0.0
            yf = 0.0
            for i in range(dl):
                P[j * dl + i] /= z
                ysum += Y[j * dl + i]
                yf += Y[j * dl + i] * F[j * dl + i]
            net.losses[j] = (log(z) + mx) * ysum - yf
            for i in range(dl):
                G[j * dl + i] = P[j * dl + i] * ysum - Y[j * dl + i]


cdef double weighted_backward(Net* net, int loss, const double* theta, const double* coef,
                              double* grad) noexcept nogil:
    """Gradient of sum_j coef_j * l_j into grad; returns the weighted loss."""
    cdef int l, j, i
    cdef int n = net.n
    cdef int dl = <int>net.dims[net.L]
    cdef int fin, fout
    cdef double value = 0.0
    cdef double* delta = net.delta
    cdef double* tmp = net.tmp
    cdef double* sw
    cdef double* P = <double*>malloc(n * dl * sizeof(double))
    loss_terms(net, loss, delta, P)
    free(P)
    for j in range(n):
        value += coef[j] * net.losses[j]
        for i in range(dl):
            delta[j * dl + i] *= coef[j]
    for l in range(net.L - 1, -1, -1):
        fin = <int>net.dims[l]
        fout = <int>net.dims[l + 1]
        gemm_rm(True, False, fout, fin, n, 1.0, delta, fout, net.acts[l], fin, 0.0,
                grad + net.woff[l], fin)
        for i in range(fout):
            grad[net.boff[l] + i] = 0.0
        for j in range(n):
            for i in range(fout):
                grad[net.boff[l] + i] += delta[j * fout + i]
        if l > 0:
            gemm_rm(False, False, n, fin, fout, 1.0, delta, fout, theta + net.woff[l], fin,
                    0.0, tmp, fin)
            for j in range(n * fin):
                tmp[j] *= net.d1[l - 1][j]
            sw = delta
            delta = tmp
            tmp = sw
    return value


cdef void update(double* theta, double* vel, double* g, int64_t d, double lr, double mom,
                 double clip, double* norm_out, double* scale_out) noexcept nogil:
    cdef int64_t i
    cdef double s = 0.0
    cdef double scale = 1.0
    for i in range(d):
        s += g[i] * g[i]
    s = sqrt(s)
    if clip > 0.0 and s > clip:
        scale = clip / s
        for i in range(d):
            vel[i] = mom * vel[i] + g[i] * scale
    else:
        for i in range(d):
            vel[i] = mom * vel[i] + g[i]
    for i in range(d):
        theta[i] = theta[i] - lr * vel[i]
    norm_out[0] = s
    scale_out[0] = scale


cdef double step(Net* net, int loss, double* theta, double* vel, const double* X, const double* Y,
                 const int64_t* idx, const double* coef, double wd, double lr, double mom,
                 double clip, double* g, int64_t d) noexcept nogil:
    cdef int64_t i
    cdef double value, norm, scale
    gather(net, X, Y, idx)
    net_forward(net, theta)
    value = weighted_backward(net, loss, theta, coef, g)
    for i in range(d):
        g[i] = g[i] + wd * theta[i]
    update(theta, vel, g, d, lr, mom, clip, &norm, &scale)
    return value


def n_params(dims):
    return sum((int(a) + 1) * int(b) for a, b in zip(dims[:-1], dims[1:]))


def forward(const int64_t[::1] dims, const double[::1] theta, const double[:, ::1] X):
    cdef Net net
    cdef int n = X.shape[0]
    cdef int dl = <int>dims[dims.shape[0] - 1]
    out = np.empty((n, dl))
    cdef double[:, ::1] o = out
    if n == 0:
        return out
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], n)
        memcpy(net.xbuf, &X[0, 0], n * dims[0] * sizeof(double))
        net_forward(&net, &theta[0])
        memcpy(&o[0, 0], net.pre[net.L - 1], n * dl * sizeof(double))
        net_free(&net)
    return out


def loss_grad(const int64_t[::1] dims, int loss, const double[::1] theta, const double[:, ::1] X,
              const double[:, ::1] Y, const int64_t[::1] idx, const double[::1] coef,
              double[::1] grad_out):
    cdef Net net
    cdef double value
    cdef int n = idx.shape[0]
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], n)
        gather(&net, &X[0, 0], &Y[0, 0], &idx[0])
        net_forward(&net, &theta[0])
        value = weighted_backward(&net, loss, &theta[0], &coef[0], &grad_out[0])
        net_free(&net)
    return value


def per_example_losses(const int64_t[::1] dims, int loss, const double[::1] theta,
                       const double[:, ::1] X, const double[:, ::1] Y, const int64_t[::1] idx):
    cdef Net net
    cdef int n = idx.shape[0]
    cdef int dl = <int>dims[dims.shape[0] - 1]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double* G
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], n)
        gather(&net, &X[0, 0], &Y[0, 0], &idx[0])
        net_forward(&net, &theta[0])
        G = <double*>malloc(2 * n * dl * sizeof(double))
        loss_terms(&net, loss, G, G + n * dl)
        memcpy(&o[0], net.losses, n * sizeof(double))
        free(G)
        net_free(&net)
    return out


def per_example_grads(const int64_t[::1] dims, int loss, const double[::1] theta,
                      const double[:, ::1] X, const double[:, ::1] Y, const int64_t[::1] idx,
                      double[:, ::1] out):
    cdef Net net
    cdef int n = idx.shape[0]
    cdef int dl = <int>dims[dims.shape[0] - 1]
    cdef int l, j, i, k, fin, fout
    cdef double* P
    cdef double* delta
    cdef double* tmp
    cdef double* sw
    cdef double* row
    cdef const double* a
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], n)
        gather(&net, &X[0, 0], &Y[0, 0], &idx[0])
        net_forward(&net, &theta[0])
        delta = net.delta
        tmp = net.tmp
        P = <double*>malloc(n * dl * sizeof(double))
        loss_terms(&net, loss, delta, P)
        free(P)
        for l in range(net.L - 1, -1, -1):
            fin = <int>net.dims[l]
            fout = <int>net.dims[l + 1]
            for j in range(n):
                row = &out[j, 0]
                a = net.acts[l] + j * fin
                for i in range(fout):
                    for k in range(fin):
                        row[net.woff[l] + i * fin + k] = delta[j * fout + i] * a[k]
                    row[net.boff[l] + i] = delta[j * fout + i]
            if l > 0:
                gemm_rm(False, False, n, fin, fout, 1.0, delta, fout, &theta[0] + net.woff[l],
                        fin, 0.0, tmp, fin)
                for j in range(n * fin):
                    tmp[j] *= net.d1[l - 1][j]
                sw = delta
                delta = tmp
                tmp = sw
        net_free(&net)


def hvp(const int64_t[::1] dims, int loss, const double[::1] theta, const double[:, ::1] X,
        const double[:, ::1] Y, const int64_t[::1] idx, const double[::1] coef,
        const double[:, ::1] V, double[:, ::1] out):
    """out[k] = sum_j coef_j * Hess(l_{idx_j}) @ V[k], by the R-operator."""
    cdef Net net
    cdef int n = idx.shape[0]
    cdef int K = V.shape[0]
    cdef int L
    cdef int dl = <int>dims[dims.shape[0] - 1]
    cdef int l, j, i, k, fin, fout, mw
    cdef double s, yf
    cdef double** deltas
    cdef double** ghs
    cdef double** RA
    cdef double** RH
    cdef double* P
    cdef double* G
    cdef double* Rd
    cdef double* Rn
    cdef double* sw
    cdef const double* v
    cdef double* o
    cdef const double* W
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], n)
        L = net.L
        mw = net.maxw
        gather(&net, &X[0, 0], &Y[0, 0], &idx[0])
        net_forward(&net, &theta[0])
        G = <double*>malloc(n * dl * sizeof(double))
        P = <double*>malloc(n * dl * sizeof(double))
        loss_terms(&net, loss, G, P)
        # base backward deltas (weighted) and gh = delta_l @ W_l per layer
        deltas = <double**>calloc(L, sizeof(double*))
        ghs = <double**>calloc(L, sizeof(double*))
        RA = <double**>calloc(L, sizeof(double*))
        RH = <double**>calloc(L, sizeof(double*))
        deltas[L - 1] = <double*>malloc(n * dl * sizeof(double))
        for j in range(n):
            for i in range(dl):
                deltas[L - 1][j * dl + i] = G[j * dl + i] * coef[j]
        for l in range(L - 1, 0, -1):
            fin = <int>net.dims[l]
            fout = <int>net.dims[l + 1]
            ghs[l] = <double*>malloc(n * fin * sizeof(double))
            deltas[l - 1] = <double*>malloc(n * fin * sizeof(double))
            gemm_rm(False, False, n, fin, fout, 1.0, deltas[l], fout,
                    &theta[0] + net.woff[l], fin, 0.0, ghs[l], fin)
            for j in range(n * fin):
                deltas[l - 1][j] = ghs[l][j] * net.d1[l - 1][j]
        for l in range(L):
            RA[l] = <double*>malloc(n * net.dims[l + 1] * sizeof(double))
            if l > 0:
                RH[l] = <double*>malloc(n * net.dims[l] * sizeof(double))
        Rd = <double*>malloc(n * mw * sizeof(double))
        Rn = <double*>malloc(n * mw * sizeof(double))

        for k in range(K):
            v = &V[k, 0]
            o = &out[k, 0]
            # R-forward
            for l in range(L):
                fin = <int>net.dims[l]
                fout = <int>net.dims[l + 1]
                W = &theta[0] + net.woff[l]
                gemm_rm(False, True, n, fout, fin, 1.0, net.acts[l], fin, v + net.woff[l], fin,
                        0.0, RA[l], fout)
                if l > 0:
                    gemm_rm(False, True, n, fout, fin, 1.0, RH[l], fin, W, fin, 1.0, RA[l], fout)
                for j in range(n):
                    for i in range(fout):
                        RA[l][j * fout + i] += v[net.boff[l] + i]
                if l < L - 1:
                    for j in range(n * fout):
                        RH[l + 1][j] = net.d1[l][j] * RA[l][j]
            # R of the weighted output gradient
            for j in range(n):
                if loss == 0:
                    for i in range(dl):
                        Rd[j * dl + i] = RA[L - 1][j * dl + i] * coef[j]
                else:
                    s = 0.0
                    for i in range(dl):
                        s += P[j * dl + i] * RA[L - 1][j * dl + i]
                    yf = 0.0
                    for i in range(dl):
                        yf += net.ybuf[j * dl + i]
                    for i in range(dl):
                        Rd[j * dl + i] = (P[j * dl + i] * RA[L - 1][j * dl + i]
                                          - P[j * dl + i] * s) * (coef[j] * yf)
            # R-backward
            for l in range(L - 1, -1, -1):
                fin = <int>net.dims[l]
                fout = <int>net.dims[l + 1]
                W = &theta[0] + net.woff[l]
                gemm_rm(True, False, fout, fin, n, 1.0, Rd, fout, net.acts[l], fin, 0.0,
                        o + net.woff[l], fin)
                if l > 0:
                    gemm_rm(True, False, fout, fin, n, 1.0, deltas[l], fout, RH[l], fin, 1.0,
                            o + net.woff[l], fin)
                for i in range(fout):
                    o[net.boff[l] + i] = 0.0
                for j in range(n):
                    for i in range(fout):
                        o[net.boff[l] + i] += Rd[j * fout + i]
                if l > 0:
                    gemm_rm(False, False, n, fin, fout, 1.0, Rd, fout, W, fin, 0.0, Rn, fin)
                    gemm_rm(False, False, n, fin, fout, 1.0, deltas[l], fout, v + net.woff[l],
                            fin, 1.0, Rn, fin)
                    for j in range(n * fin):
                        Rn[j] = (Rn[j] * net.d1[l - 1][j]
                                 + ghs[l][j] * net.d2[l - 1][j] * RA[l - 1][j])
                    sw = Rd
                    Rd = Rn
                    Rn = sw

        for l in range(L):
            free(deltas[l]); free(ghs[l]); free(RA[l]); free(RH[l])
        free(deltas); free(ghs); free(RA); free(RH)
        free(Rd); free(Rn); free(G); free(P)
        net_free(&net)


def sgd_update(double[::1] theta, double[::1] velocity, const double[::1] g, double lr,
               double momentum, double clip):
    cdef double norm, scale
    with nogil:
        update(&theta[0], &velocity[0], <double*>&g[0], theta.shape[0], lr, momentum, clip,
               &norm, &scale)
    return norm, scale


def train_step(const int64_t[::1] dims, int loss, double[::1] theta, double[::1] velocity,
               const double[:, ::1] X, const double[:, ::1] Y, const int64_t[::1] idx,
               const double[::1] coef, double wd, double lr, double momentum, double clip,
               double[::1] gbuf):
    cdef Net net
    cdef double value
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], idx.shape[0])
        value = step(&net, loss, &theta[0], &velocity[0], &X[0, 0], &Y[0, 0], &idx[0], &coef[0],
                     wd, lr, momentum, clip, &gbuf[0], theta.shape[0])
        net_free(&net)
    return value


def train_loop(const int64_t[::1] dims, int loss, double[::1] theta, double[::1] velocity,
               const double[:, ::1] X, const double[:, ::1] Y, const int64_t[:, ::1] schedule,
               const double[::1] w, const double[::1] lr, double wd, double momentum,
               double clip):
    """Run every step of ``schedule`` in place; return the diverging step or -1."""
    cdef Net net
    cdef int T = schedule.shape[0]
    cdef int B = schedule.shape[1]
    cdef int t, j
    cdef int status = -1
    cdef double value
    cdef int64_t d = theta.shape[0]
    cdef double* g
    cdef double* coef
    with nogil:
        net_alloc(&net, &dims[0], <int>dims.shape[0], B)
        g = <double*>malloc(d * sizeof(double))
        coef = <double*>malloc(B * sizeof(double))
        for t in range(T):
            for j in range(B):
                coef[j] = w[schedule[t, j]] / B
            value = step(&net, loss, &theta[0], &velocity[0], &X[0, 0], &Y[0, 0],
                         &schedule[t, 0], coef, wd, lr[t], momentum, clip, g, d)
            if not isfinite(value):
                status = t
                break
        free(g)
        free(coef)
        net_free(&net)
    return status
