"""numba configuration shared by the compiled kernels."""

import os

import numba

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old for numba and only produces a warning
    numba.config.THREADING_LAYER = "workqueue"


def set_threads(n: int | None) -> int:
    """Cap the worker threads used by compiled kernels; returns the active count."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()
