# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Elman recurrence scans.

Arrays are time-major ``(T, B, h)`` and C-contiguous so every timestep is one
contiguous ``B x h`` block handed straight to BLAS. The recurrent product is the
only sequential part of the network; input projections are batched upstream.
"""
from libc.math cimport tanh, tanhf
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void _gemm(char* transa, int m, int n, int k, real* a, real* b,
                       real beta, real* c) noexcept nogil:
    # Column-major view: C(m x n) = op(A) B + beta C, all leading dims = m.
    cdef char transb = b'N'
    cdef real one = 1
    cdef float fbeta
    cdef double dbeta
    if real is float:
        fbeta = beta
        sgemm(transa, &transb, &m, &n, &k, <float*>&one, <float*>a, &m,
              <float*>b, &k, &fbeta, <float*>c, &m)
    else:
        dbeta = beta
        dgemm(transa, &transb, &m, &n, &k, <double*>&one, <double*>a, &m,
              <double*>b, &k, &dbeta, <double*>c, &m)


def scan_forward(real[:, :, ::1] pre, real[:, ::1] w_h, real[:, :, ::1] out):
    """out[t] = tanh(pre[t] + out[t-1] @ w_h.T), out[-1] = 0."""
    cdef Py_ssize_t T = pre.shape[0], B = pre.shape[1], H = pre.shape[2]
    cdef Py_ssize_t t, i, n = B * H
    cdef char trans = b'T'
    cdef real* src
    cdef real* dst
    if T == 0:
        return
    with nogil:
        for t in range(T):
            src = &pre[t, 0, 0]
            dst = &out[t, 0, 0]
            for i in range(n):
                dst[i] = src[i]
            if t > 0:
                _gemm(&trans, <int>H, <int>B, <int>H, &w_h[0, 0],
                      &out[t - 1, 0, 0], <real>1, dst)
            for i in range(n):
                if real is float:
                    dst[i] = tanhf(dst[i])
                else:
                    dst[i] = tanh(dst[i])


def scan_backward(real[:, :, ::1] states, real[:, :, ::1] grad_states,
                  real[:, ::1] w_h, real[:, :, ::1] grad_pre, real[:, ::1] carry):
    """Reverse-time BPTT through the scan.

    ``grad_states`` holds the loss gradient landing directly on each state;
    ``grad_pre`` receives the gradient w.r.t. each pre-activation. ``carry`` is
    a ``(B, h)`` scratch buffer.
    """
    cdef Py_ssize_t T = states.shape[0], B = states.shape[1], H = states.shape[2]
    cdef Py_ssize_t t, i, n = B * H
    cdef char trans = b'N'
    cdef real* y
    cdef real* g
    cdef real* d
    cdef real* c = &carry[0, 0]
    if T == 0:
        return
    with nogil:
        for i in range(n):
            c[i] = 0
        for t in range(T - 1, -1, -1):
            y = &states[t, 0, 0]
            g = &grad_states[t, 0, 0]
            d = &grad_pre[t, 0, 0]
            for i in range(n):
                d[i] = (g[i] + c[i]) * (1 - y[i] * y[i])
            if t > 0:
                _gemm(&trans, <int>H, <int>B, <int>H, &w_h[0, 0],
                      &grad_pre[t, 0, 0], <real>0, &carry[0, 0])
