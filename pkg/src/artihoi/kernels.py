"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``ARTIHOI_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ARTIHOI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def nearest_brute(query, ref):
    return _impl.nearest_brute(query, ref)


def nearest_grid(query, ref, origin, h, dims, cell_start, cell_items):
    return _impl.nearest_grid(query, ref, origin, h, dims, cell_start, cell_items)


def ray_crossings(points, v0, e1, e2, direction, point_cell, cand_start, cand_items, eps):
    return _impl.ray_crossings(points, v0, e1, e2, direction, point_cell,
                               cand_start, cand_items, eps)
