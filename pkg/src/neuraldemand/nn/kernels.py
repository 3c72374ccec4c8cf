"""Kernel selection: compiled Cython core if built, numpy fallback otherwise.

Set ``NEURALDEMAND_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("NEURALDEMAND_PURE_PYTHON", "") not in ("1", "true"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

silu_forward = _impl.silu_forward
silu_backward = _impl.silu_backward
softmax_rows = _impl.softmax_rows
adam_update = _impl.adam_update

__all__ = ["BACKEND", "silu_forward", "silu_backward", "softmax_rows", "adam_update", "tune_allocator"]


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 256 << 20) -> bool:
    """Raise glibc's mmap and trim thresholds so large numpy temporaries reuse heap pages.

    Training allocates and frees many megabyte-sized arrays per step; with the
    default thresholds each one is a fresh ``mmap`` and a burst of page faults.
    Opt-in because it changes process-wide allocator behaviour. Returns ``False``
    where ``mallopt`` is unavailable (non-glibc platforms).
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = mallopt(M_MMAP_THRESHOLD, int(mmap_threshold)) == 1
    return bool(mallopt(M_TRIM_THRESHOLD, int(trim_threshold)) == 1 and ok)
