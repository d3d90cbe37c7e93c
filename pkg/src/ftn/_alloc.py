"""glibc allocator tuning.

The forward pass allocates a few MB per layer per step; with glibc's
default mmap threshold every such block is page-faulted in afresh, which
costs about as much as the arithmetic. Keeping large blocks on the heap
removes that overhead. No-op on other platforms.
"""

import ctypes
import ctypes.util
import sys

M_TRIM_THRESHOLD = -1
M_TOP_PAD = -2
M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(M_TOP_PAD, 64 << 20)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
