# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels; same contracts as ``_kernels_py``.

Row-major float64 arrays are handed to column-major BLAS by treating every
matrix as its own transpose.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _affine(const double[:, ::1] X, const double[:, ::1] W, const double[::1] b,
                  double[:, ::1] out, bint relu) noexcept nogil:
    # out = X @ W.T + b, optionally rectified
    cdef int n = X.shape[0], k = X.shape[1], m = W.shape[0]
    cdef int i, j
    cdef char ta = b'T', tb = b'N'
    cdef double one = 1.0
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j]
    dgemm(&ta, &tb, &m, &n, &k, &one, <double*>&W[0, 0], &k, <double*>&X[0, 0], &k,
          &one, &out[0, 0], &m)
    if relu:
        for i in range(n):
            for j in range(m):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0


cdef void _weight_grad(const double[:, ::1] G, const double[:, ::1] H, double[:, ::1] dW,
                       double[::1] db) noexcept nogil:
    # dW = G.T @ H, db = column sums of G
    cdef int n = G.shape[0], m = G.shape[1], k = H.shape[1]
    cdef int i, j
    cdef char ta = b'N', tb = b'T'
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &k, &m, &n, &one, <double*>&H[0, 0], &k, <double*>&G[0, 0], &m,
          &zero, &dW[0, 0], &k)
    for j in range(m):
        db[j] = 0.0
    for i in range(n):
        for j in range(m):
            db[j] += G[i, j]


cdef void _input_grad(const double[:, ::1] G, const double[:, ::1] W, const double[:, ::1] H,
                      double[:, ::1] out, bint mask) noexcept nogil:
    # out = (G @ W) * (H > 0) when mask, else G @ W
    cdef int n = G.shape[0], m = G.shape[1], k = W.shape[1]
    cdef int i, j
    cdef char ta = b'N', tb = b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &k, &n, &m, &one, <double*>&W[0, 0], &k, <double*>&G[0, 0], &m,
          &zero, &out[0, 0], &k)
    if mask:
        for i in range(n):
            for j in range(k):
                if H[i, j] <= 0.0:
                    out[i, j] = 0.0


cdef list _activations(list params, cnp.ndarray X):
    cdef list acts = [X]
    cdef Py_ssize_t last = len(params) - 1
    cdef Py_ssize_t i
    cdef cnp.ndarray h = X, out
    for i in range(len(params)):
        W, b = params[i]
        out = np.empty((h.shape[0], W.shape[0]))
        _affine(h, np.ascontiguousarray(W), np.ascontiguousarray(b), out, i < last)
        acts.append(out)
        h = out
    return acts


cdef tuple _backprop(list params, list acts, cnp.ndarray g, bint need_input):
    cdef Py_ssize_t L = len(params)
    cdef list grads = [None] * L
    cdef Py_ssize_t i
    cdef cnp.ndarray dW, db, h_in, nxt
    for i in range(L - 1, -1, -1):
        W = np.ascontiguousarray(params[i][0])
        h_in = acts[i]
        dW = np.empty_like(W)
        db = np.empty(W.shape[0])
        _weight_grad(g, h_in, dW, db)
        grads[i] = (dW, db)
        if i == 0 and not need_input:
            return grads, None
        nxt = np.empty((g.shape[0], W.shape[1]))
        _input_grad(g, W, h_in, nxt, i > 0)
        g = nxt
    return grads, g


def mlp_forward(list params, X):
    cdef cnp.ndarray x = np.ascontiguousarray(X, dtype=np.float64)
    cdef list acts = _activations(params, x)
    return acts[len(acts) - 1]


def td_grad(list params, X, actions, y):
    """Loss mean((y - Q[i, a_i])**2) and its gradient for every (W, b)."""
    cdef cnp.ndarray x = np.ascontiguousarray(X, dtype=np.float64)
    cdef list acts = _activations(params, x)
    cdef double[:, ::1] Q = acts[len(acts) - 1]
    cdef Py_ssize_t[::1] a = np.ascontiguousarray(actions, dtype=np.intp)
    cdef double[::1] t = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Q.shape[0], i
    cdef cnp.ndarray gq_arr = np.zeros((n, Q.shape[1]))
    cdef double[:, ::1] gq = gq_arr
    cdef double d, loss = 0.0, scale = -2.0 / n
    for i in range(n):
        d = t[i] - Q[i, a[i]]
        loss += d * d
        gq[i, a[i]] = scale * d
    grads, _ = _backprop(params, acts, gq_arr, False)
    return loss / n, grads


def input_grad(list params, x, gq):
    """Gradient of dot(gq, Q(x)) with respect to a single observation ``x``."""
    cdef cnp.ndarray xb = np.ascontiguousarray(x, dtype=np.float64).reshape(1, -1)
    cdef list acts = _activations(params, xb)
    cdef cnp.ndarray g = np.ascontiguousarray(gq, dtype=np.float64).reshape(1, -1)
    _, gx = _backprop(params, acts, g, True)
    return gx[0]


def noisy_weights(mu, sigma, f_out, f_in):
    """mu + sigma * outer(f_out, f_in) in one pass."""
    cdef const double[:, ::1] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, ::1] s = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef const double[::1] fo = np.ascontiguousarray(f_out, dtype=np.float64)
    cdef const double[::1] fi = np.ascontiguousarray(f_in, dtype=np.float64)
    cdef Py_ssize_t r = m.shape[0], c = m.shape[1], i, j
    out_arr = np.empty((r, c))
    cdef double[:, ::1] out = out_arr
    cdef double a
    with nogil:
        for i in range(r):
            a = fo[i]
            for j in range(c):
                out[i, j] = m[i, j] + s[i, j] * (a * fi[j])
    return out_arr
