"""Desk-scale lab for autoregressive image generation in raster or random
order, over discrete or continuous tokens, with a shared scaling-analysis
toolchain."""

import ctypes
import os
import sys

__version__ = "0.1.0"


def _tune_runtime():
    """Two allocator/BLAS knobs that only matter for wall-clock speed.

    OpenBLAS's DYNAMIC_ARCH detection maps some recent Xeons to the Haswell
    kernels, leaving the AVX-512 units idle; when the CPU advertises the
    Skylake-X feature set and the user has not chosen a core type, pick it
    explicitly.  Only effective if numpy has not been imported yet.

    glibc serves multi-megabyte activation buffers through mmap and returns
    them to the kernel on free, so every training step re-faults its pages.
    Raising the mmap/trim thresholds keeps those buffers on the heap where
    they are reused.  Both knobs change nothing numerically.
    """
    if "OPENBLAS_CORETYPE" not in os.environ and "numpy" not in sys.modules:
        try:
            flags = ""
            with open("/proc/cpuinfo") as f:
                for line in f:
                    if line.startswith("flags"):
                        flags = line
                        break
            needed = ("avx512f", "avx512dq", "avx512bw", "avx512vl")
            if all(f" {flag}" in flags for flag in needed):
                os.environ["OPENBLAS_CORETYPE"] = "SKYLAKEX"
        except OSError:
            pass
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        meg256 = 256 * 1024 * 1024
        libc.mallopt(-3, meg256)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, meg256)   # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_runtime()
