"""Backend selection for the geometry hot loops.

The compiled extension is used when it imports; otherwise the numpy
implementation in ``_kernels_py`` is used. Set ``DOSNET_PURE_PYTHON=1`` to
force the fallback (the benchmark and the backend-parity tests do this per
call through :func:`get_backend`).
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["compiled"] = _kernels_c

if os.environ.get("DOSNET_PURE_PYTHON") == "1" or _kernels_c is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    return _BACKENDS[name or BACKEND]


def _flat(*arrays):
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=np.float64) for a in arrays])
    shape = arrays[0].shape
    return shape, [np.ascontiguousarray(a).ravel() for a in arrays]


def mahalanobis(cx, cy, l, w, theta, px, py, backend=None):
    shape, flat = _flat(cx, cy, l, w, theta, px, py)
    return get_backend(backend).mahalanobis(*flat).reshape(shape)


def ellipse_distance(cx, cy, l, w, theta, px, py, backend=None):
    shape, flat = _flat(cx, cy, l, w, theta, px, py)
    return get_backend(backend).ellipse_distance(*flat).reshape(shape)


def min_area_grid(u, v, semi_grid, max_aspect=np.inf, backend=None):
    shape, (u, v) = _flat(u, v)
    grid = np.ascontiguousarray(semi_grid, dtype=np.float64)
    out = get_backend(backend).min_area_grid(u, v, grid, float(max_aspect))
    return out.reshape(shape)
