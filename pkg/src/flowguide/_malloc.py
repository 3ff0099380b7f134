"""glibc allocator tuning for the training hot path.

Batch-sized float64 activations (~256 KB) sit above glibc's default mmap
threshold, so every temporary goes through mmap/munmap and faults its pages
back in on each access; under sandboxed kernels that costs more than the
arithmetic. Raising the mmap and trim thresholds keeps those buffers in the
arena, which benchmarks ~4x faster per training step. No-op off glibc.
"""

from __future__ import annotations

import ctypes

_done = False

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def tune_malloc() -> None:
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass
