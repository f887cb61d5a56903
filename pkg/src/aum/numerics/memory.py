"""Allocation high-water meter for engine buffers.

Every buffer owned by a :class:`~aum.numerics.tensor.Tensor` (and every
array a primitive saves for its reverse pass) is registered here. The meter
follows numpy views back to the owning base array so a buffer is counted
once, and releases it when the owner is garbage collected.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager

import numpy as np


class OutOfMemory(MemoryError):
    """Raised when a tracked allocation would exceed the configured budget."""


def _owner(arr: np.ndarray) -> np.ndarray:
    while isinstance(arr.base, np.ndarray):
        arr = arr.base
    return arr


class MemoryMeter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._live: dict[int, int] = {}
        self.current = 0
        self.peak = 0
        self.limit: int | None = None

    def check(self, nbytes: int) -> None:
        """Refuse an allocation of ``nbytes`` that would break the budget."""
        if self.limit is not None and self.current + nbytes > self.limit:
            raise OutOfMemory(
                f"allocation of {nbytes} bytes exceeds budget "
                f"({self.current} live, limit {self.limit})"
            )

    def track(self, arr: np.ndarray) -> None:
        owner = _owner(arr)
        key = id(owner)
        nbytes = owner.nbytes
        with self._lock:
            if key in self._live:
                return
            if self.limit is not None and self.current + nbytes > self.limit:
                raise OutOfMemory(
                    f"allocation of {nbytes} bytes exceeds budget "
                    f"({self.current} live, limit {self.limit})"
                )
            self._live[key] = nbytes
            self.current += nbytes
            if self.current > self.peak:
                self.peak = self.current
        weakref.finalize(owner, self._release, key)

    def _release(self, key: int) -> None:
        with self._lock:
            nbytes = self._live.pop(key, 0)
            self.current -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current


meter = MemoryMeter()


@contextmanager
def budget(limit_bytes: int | None):
    """Temporarily cap the bytes the engine may hold live at once."""
    previous = meter.limit
    meter.limit = limit_bytes
    try:
        yield meter
    finally:
        meter.limit = previous


@contextmanager
def peak_tracking():
    """Yield a dict whose ``"peak"`` entry holds the bytes high-water mark
    reached inside the block, relative to the live bytes on entry."""
    import gc

    gc.collect()
    meter.reset_peak()
    base = meter.current
    result = {"peak": 0}
    try:
        yield result
    finally:
        result["peak"] = meter.peak - base
