"""Numpy implementations of the geometry hot loops.

These are the reference kernels and the fallback when the compiled
``_kernels_c`` extension is unavailable. Every function takes flat float64
arrays of equal length and returns a flat float64 array.
"""
import numpy as np

BISECTION_ITERS = 200


def _local(cx, cy, theta, px, py):
    c = np.cos(theta)
    s = np.sin(theta)
    dx = px - cx
    dy = py - cy
    return c * dx + s * dy, -s * dx + c * dy


def mahalanobis(cx, cy, l, w, theta, px, py):
    u, v = _local(cx, cy, theta, px, py)
    return np.sqrt((u / (0.5 * l)) ** 2 + (v / (0.5 * w)) ** 2)


def ellipse_distance(cx, cy, l, w, theta, px, py):
    """Euclidean distance from points to ellipses (zero for inside points).

    Robust bisection on the closest-point root equation after folding the
    point into the first quadrant of the ellipse frame.
    """
    u, v = _local(cx, cy, theta, px, py)
    a = 0.5 * l
    b = 0.5 * w
    swap = a < b
    e0 = np.where(swap, b, a)
    e1 = np.where(swap, a, b)
    y0 = np.abs(np.where(swap, v, u))
    y1 = np.abs(np.where(swap, u, v))

    z0 = y0 / e0
    z1 = y1 / e1
    g = z0 * z0 + z1 * z1 - 1.0
    out = np.zeros_like(u)
    outside = g > 0.0

    # y0 == 0: closest point is the minor vertex.
    on_minor = outside & (y0 == 0.0)
    out[on_minor] = np.abs(y1[on_minor] - e1[on_minor])
    # y1 == 0 and outside means y0 > e0, closest point is the major vertex.
    on_major = outside & (y1 == 0.0) & ~on_minor
    out[on_major] = np.abs(y0[on_major] - e0[on_major])

    gen = outside & ~on_minor & ~on_major
    if gen.any():
        r0 = (e0[gen] / e1[gen]) ** 2
        n0 = r0 * z0[gen]
        zz1 = z1[gen]
        s0 = zz1 - 1.0
        s1 = np.hypot(n0, zz1) - 1.0
        for _ in range(BISECTION_ITERS):
            s = 0.5 * (s0 + s1)
            gs = (n0 / (s + r0)) ** 2 + (zz1 / (s + 1.0)) ** 2 - 1.0
            pos = gs > 0.0
            s0 = np.where(pos, s, s0)
            s1 = np.where(pos, s1, s)
        s = 0.5 * (s0 + s1)
        yy0 = y0[gen]
        yy1 = y1[gen]
        x0 = r0 * yy0 / (s + r0)
        x1 = yy1 / (s + 1.0)
        out[gen] = np.hypot(x0 - yy0, x1 - yy1)
    return out


def _lower_ok(u, v, a, b, max_aspect):
    inside = (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    return inside & ((a <= b) | (a <= max_aspect * b))


def min_area_grid(u, v, semi_grid, max_aspect):
    """Smallest pi*a*b over (a, b) in semi_grid^2 whose ellipse holds (u, v).

    ``u, v`` are offsets already expressed in the ellipse frame and
    ``semi_grid`` must be ascending. For each ``a`` the feasible ``b`` form an
    upward-closed set, so a bisection per row finds the same minimum as a
    full scan of the grid. Returns inf when no grid ellipse within the
    aspect bound holds the point.
    """
    m = len(semi_grid)
    a = semi_grid
    out = np.empty(len(u))
    for i in range(len(u)):
        lo = np.zeros(m, dtype=np.int64)
        hi = np.full(m, m, dtype=np.int64)
        while True:
            active = lo < hi
            if not active.any():
                break
            mid = (lo + hi) // 2
            ok = _lower_ok(u[i], v[i], a, semi_grid[np.minimum(mid, m - 1)], max_aspect)
            hi = np.where(active & ok, mid, hi)
            lo = np.where(active & ~ok, mid + 1, lo)
        found = lo < m
        b = semi_grid[np.minimum(lo, m - 1)]
        found &= ~((b > a) & (b > max_aspect * a))
        area = np.where(found, np.pi * a * b, np.inf)
        out[i] = area.min()
    return out
