"""Raise glibc malloc thresholds so temporary-heavy numpy kernels don't
churn mmap/munmap on every expression.

With default tunables, glibc serves the multi-hundred-kB temporaries of
the rendering and back-projection loops via fresh mmaps, and the page
faults dominate runtime (measured ~15x slowdown on elementwise chains).
Keeping such blocks on the heap trades a little peak RSS for large,
stable speedups.  No-op on non-glibc platforms.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def apply():
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TOP_PAD, 1 << 26)
    except (OSError, AttributeError):
        pass
