"""Deterministic single-threaded execution for BLAS-backed numpy calls."""

import contextlib

from threadpoolctl import threadpool_limits


@contextlib.contextmanager
def single_threaded():
    with threadpool_limits(limits=1):
        yield
