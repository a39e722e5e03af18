"""Process-level tuning for the numpy training loops."""

from __future__ import annotations

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_tuned = False


def tune_allocator() -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    The training loop allocates and frees the same multi-megabyte arrays every
    step; with default glibc settings each one is a new mmap and page-faults
    on first touch. Returns False on platforms without glibc.
    """
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = all(
            libc.mallopt(opt, val)
            for opt, val in (
                (_M_MMAP_THRESHOLD, 1 << 30),
                (_M_TRIM_THRESHOLD, 1 << 30),
                (_M_TOP_PAD, 256 << 20),
            )
        )
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    return _tuned


def thread_limit() -> int | None:
    """Worker bound from DLENS_THREADS, or None for the library default."""
    raw = os.environ.get("DLENS_THREADS")
    if raw is None or raw.strip() == "":
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("DLENS_THREADS must be >= 1")
    return n
