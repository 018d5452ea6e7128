# Compiled twins of fedfair.kernels.pure. Same call signatures, same
# elementwise expression structure; reductions run in ascending index order.
# Must be compiled with -ffp-contract=off so a*b+c never fuses into an FMA,
# otherwise the update step rounds differently from the numpy path.

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "math.h" nogil:
    double exp(double)

BACKEND_NAME = "cython"


cdef void _quad_grad(const double[:, ::1] hess, const double[::1] dtheta,
                     double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = dtheta.shape[0]
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc = acc + hess[i, j] * dtheta[j]
        out[i] = acc


def quad_gradient(const double[:, ::1] hess, const double[::1] dtheta):
    cdef Py_ssize_t n = dtheta.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    _quad_grad(hess, dtheta, out)
    return out_arr


def quad_local_sgd(const double[:, ::1] hess, const double[::1] optimum,
                   const double[::1] theta0, const double[::1] etas,
                   double weight, step_noise=None):
    cdef Py_ssize_t n = theta0.shape[0]
    cdef Py_ssize_t steps = etas.shape[0]
    theta_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] theta = theta_arr
    cdef double[::1] dtheta = np.empty(n, dtype=np.float64)
    cdef double[::1] grad = np.empty(n, dtype=np.float64)
    cdef const double[:, ::1] noise
    cdef bint has_noise = step_noise is not None
    if has_noise:
        noise = step_noise
    cdef Py_ssize_t t, i
    cdef double s
    for i in range(n):
        theta[i] = theta0[i]
    with nogil:
        for t in range(steps):
            for i in range(n):
                dtheta[i] = theta[i] - optimum[i]
            _quad_grad(hess, dtheta, grad)
            if has_noise:
                for i in range(n):
                    grad[i] = grad[i] + noise[t, i]
            s = etas[t] * weight
            for i in range(n):
                theta[i] = theta[i] - s * grad[i]
    return theta_arr


cdef inline double _sigmoid_scalar(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef void _logistic_batch_grad(const double[:, ::1] features,
                               const double[::1] labels,
                               const double[::1] theta, double ridge,
                               const long[::1] idx, double[::1] out) noexcept nogil:
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t batch = idx.shape[0]
    cdef Py_ssize_t b, j
    cdef long row
    cdef double z, r
    for j in range(m):
        out[j] = 0.0
    for b in range(batch):
        row = idx[b]
        z = 0.0
        for j in range(m):
            z = z + features[row, j] * theta[j]
        r = _sigmoid_scalar(z) - labels[row]
        for j in range(m):
            out[j] = out[j] + r * features[row, j]
    for j in range(m):
        out[j] = out[j] / batch
    if ridge != 0.0:
        for j in range(m):
            out[j] = out[j] + ridge * theta[j]


def logistic_batch_gradient(const double[:, ::1] features,
                            const double[::1] labels,
                            const double[::1] theta, double ridge,
                            const long[::1] idx):
    cdef Py_ssize_t m = theta.shape[0]
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    _logistic_batch_grad(features, labels, theta, ridge, idx, out)
    return out_arr


def logistic_local_sgd(const double[:, ::1] features, const double[::1] labels,
                       const double[::1] theta0, const double[::1] etas,
                       double weight, double ridge, const long[:, ::1] batches):
    cdef Py_ssize_t m = theta0.shape[0]
    cdef Py_ssize_t steps = etas.shape[0]
    theta_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] theta = theta_arr
    cdef double[::1] grad = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t t, j
    cdef double s
    for j in range(m):
        theta[j] = theta0[j]
    with nogil:
        for t in range(steps):
            _logistic_batch_grad(features, labels, theta, ridge, batches[t], grad)
            s = etas[t] * weight
            for j in range(m):
                theta[j] = theta[j] - s * grad[j]
    return theta_arr
