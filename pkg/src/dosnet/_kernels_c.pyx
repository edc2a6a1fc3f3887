# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, hypot, INFINITY, M_PI

cnp.import_array()

cdef int BISECTION_ITERS = 200


def mahalanobis(const double[::1] cx, const double[::1] cy, const double[::1] l,
                const double[::1] w, const double[::1] theta,
                const double[::1] px, const double[::1] py):
    cdef Py_ssize_t n = cx.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double c, s, dx, dy, u, v, a, b
    with nogil:
        for i in range(n):
            c = cos(theta[i])
            s = sin(theta[i])
            dx = px[i] - cx[i]
            dy = py[i] - cy[i]
            u = (c * dx + s * dy) / (0.5 * l[i])
            v = (-s * dx + c * dy) / (0.5 * w[i])
            o[i] = sqrt(u * u + v * v)
    return out


cdef inline double _distance(double u, double v, double a, double b) noexcept nogil:
    cdef double e0, e1, y0, y1, z0, z1, g, r0, n0, s0, s1, s, gs, x0, x1, t
    cdef int k
    if a >= b:
        e0 = a; e1 = b; y0 = fabs(u); y1 = fabs(v)
    else:
        e0 = b; e1 = a; y0 = fabs(v); y1 = fabs(u)
    z0 = y0 / e0
    z1 = y1 / e1
    g = z0 * z0 + z1 * z1 - 1.0
    if g <= 0.0:
        return 0.0
    if y0 == 0.0:
        return fabs(y1 - e1)
    if y1 == 0.0:
        return fabs(y0 - e0)
    r0 = (e0 / e1) * (e0 / e1)
    n0 = r0 * z0
    s0 = z1 - 1.0
    s1 = hypot(n0, z1) - 1.0
    s = 0.5 * (s0 + s1)
    for k in range(BISECTION_ITERS):
        s = 0.5 * (s0 + s1)
        if s == s0 or s == s1:
            break
        t = n0 / (s + r0)
        gs = t * t
        t = z1 / (s + 1.0)
        gs = gs + t * t - 1.0
        if gs > 0.0:
            s0 = s
        elif gs < 0.0:
            s1 = s
        else:
            break
    x0 = r0 * y0 / (s + r0)
    x1 = y1 / (s + 1.0)
    return hypot(x0 - y0, x1 - y1)


def ellipse_distance(const double[::1] cx, const double[::1] cy, const double[::1] l,
                     const double[::1] w, const double[::1] theta,
                     const double[::1] px, const double[::1] py):
    cdef Py_ssize_t n = cx.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double c, s, dx, dy
    with nogil:
        for i in range(n):
            c = cos(theta[i])
            s = sin(theta[i])
            dx = px[i] - cx[i]
            dy = py[i] - cy[i]
            o[i] = _distance(c * dx + s * dy, -s * dx + c * dy, 0.5 * l[i], 0.5 * w[i])
    return out


cdef inline bint _lower_ok(double u, double v, double a, double b, double max_aspect) noexcept nogil:
    # holds the point and b is not too thin relative to a; monotone in b
    if (u / a) * (u / a) + (v / b) * (v / b) > 1.0:
        return False
    return a <= b or a <= max_aspect * b


def min_area_grid(const double[::1] u, const double[::1] v,
                  const double[::1] semi_grid, double max_aspect):
    cdef Py_ssize_t n = u.shape[0], m = semi_grid.shape[0], i, j, lo, hi, mid
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double best, a, b, area
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(m):
                a = semi_grid[j]
                # smallest grid b passing the monotone lower test
                lo = 0
                hi = m
                while lo < hi:
                    mid = (lo + hi) // 2
                    if _lower_ok(u[i], v[i], a, semi_grid[mid], max_aspect):
                        hi = mid
                    else:
                        lo = mid + 1
                if lo == m:
                    continue
                b = semi_grid[lo]
                if b > a and b > max_aspect * a:
                    continue
                area = M_PI * a * b
                if area < best:
                    best = area
            o[i] = best
    return out
