"""BLAS thread control for small-matrix hot loops.

The propagation engines spend their time in LAPACK/BLAS calls on matrices
with a few dozen rows; multi-threaded BLAS pools lose more to
synchronization than they gain (measured 20-30x slowdowns on 2-core
machines).  Hot loops therefore run under a scoped single-thread limit.
"""

import contextlib

try:
    from threadpoolctl import threadpool_limits

    def small_matrix_threads():
        return threadpool_limits(limits=1)
except ImportError:  # pragma: no cover - threadpoolctl is a declared dep
    def small_matrix_threads():
        return contextlib.nullcontext()
