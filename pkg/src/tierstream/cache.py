"""Bounded, pre-allocated host staging memory.

One buffer is allocated at construction and carved into regions. Allocation is
circular: try the bump position, then wrap to the start, then first-fit over
the gaps between live regions. Waiters are served strictly FIFO, so a large
request at the head of the queue is never starved by smaller ones behind it.

The cache serves two kinds of callers: threads (``acquire`` with an optional
timeout) and event-driven schedulers (``request`` with a grant callback).
"""

from __future__ import annotations

import bisect
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable


class CacheError(RuntimeError):
    pass


class OversizedRequest(CacheError):
    pass


class CacheTimeout(CacheError, TimeoutError):
    pass


@dataclass(eq=False)
class Region:
    handle: int
    offset: int
    length: int
    cache: "StagingCache" = field(repr=False)
    released: bool = False

    @property
    def view(self) -> memoryview:
        return self.cache.view(self)


@dataclass(eq=False)
class Waiter:
    size: int
    on_grant: Callable[[Region], None] | None = None
    region: Region | None = None
    cancelled: bool = False
    event: threading.Event = field(default_factory=threading.Event)


class StagingCache:
    def __init__(self, capacity_bytes: int, clock: Callable[[], float] = time.monotonic,
                 record_samples: bool = True):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self._buffer = bytearray(capacity_bytes)
        self._lock = threading.RLock()
        self._starts: list[int] = []
        self._live: dict[int, Region] = {}
        self._by_start: dict[int, Region] = {}
        self._waiters: deque[Waiter] = deque()
        self._head = 0
        self._next_handle = 1
        self.allocated_bytes = 0
        self.high_water = 0
        self.clock = clock
        self.record_samples = record_samples
        self.samples: list[tuple[float, int]] = []
        self.n_acquired = 0

    # allocation -----------------------------------------------------------

    def _fits_at(self, offset: int, size: int) -> bool:
        if offset + size > self.capacity_bytes:
            return False
        i = bisect.bisect_left(self._starts, offset)
        if i < len(self._starts) and self._starts[i] < offset + size:
            return False
        if i > 0:
            prev = self._by_start[self._starts[i - 1]]
            if prev.offset + prev.length > offset:
                return False
        return True

    def _first_fit(self, size: int) -> int | None:
        cursor = 0
        for start in self._starts:
            if start - cursor >= size:
                return cursor
            region = self._by_start[start]
            cursor = region.offset + region.length
        if self.capacity_bytes - cursor >= size:
            return cursor
        return None

    def _try_allocate(self, size: int) -> Region | None:
        if self.capacity_bytes - self.allocated_bytes < size:
            return None
        offset = None
        for candidate in (self._head, 0):
            if self._fits_at(candidate, size):
                offset = candidate
                break
        if offset is None:
            offset = self._first_fit(size)
            if offset is None:
                return None
        region = Region(self._next_handle, offset, size, self)
        self._next_handle += 1
        bisect.insort(self._starts, offset)
        self._by_start[offset] = region
        self._live[region.handle] = region
        self._head = offset + size
        if self._head >= self.capacity_bytes:
            self._head = 0
        self.allocated_bytes += size
        self.high_water = max(self.high_water, self.allocated_bytes)
        self.n_acquired += 1
        self._sample()
        return region

    def _sample(self) -> None:
        if self.record_samples:
            self.samples.append((self.clock(), self.allocated_bytes))

    def _check_size(self, size: int) -> None:
        if size <= 0:
            raise ValueError("request size must be positive")
        if size > self.capacity_bytes:
            raise OversizedRequest(f"oversized request: {size} > capacity {self.capacity_bytes}")

    # public API -------------------------------------------------------------

    def request(self, size: int, on_grant: Callable[[Region], None]) -> Region | Waiter:
        """Non-blocking acquire. Returns a Region, or a Waiter whose
        ``on_grant`` fires (from inside a later ``release``) once space frees."""
        self._check_size(size)
        with self._lock:
            if not self._waiters:
                region = self._try_allocate(size)
                if region is not None:
                    return region
            waiter = Waiter(size, on_grant)
            self._waiters.append(waiter)
            return waiter

    def acquire(self, size: int, timeout: float | None = None) -> Region:
        """Blocking acquire for threaded callers."""
        self._check_size(size)
        with self._lock:
            if not self._waiters:
                region = self._try_allocate(size)
                if region is not None:
                    return region
            waiter = Waiter(size)
            self._waiters.append(waiter)
        if not waiter.event.wait(timeout):
            with self._lock:
                if waiter.region is None:
                    self._cancel_locked(waiter)
                    raise CacheTimeout(f"no staging space for {size} bytes within {timeout}s")
        return waiter.region

    def cancel(self, waiter: Waiter) -> bool:
        """Withdraw a pending request; False if it was already granted."""
        with self._lock:
            if waiter.region is not None:
                return False
            self._cancel_locked(waiter)
            return True

    def _cancel_locked(self, waiter: Waiter) -> None:
        waiter.cancelled = True
        try:
            self._waiters.remove(waiter)
        except ValueError:
            pass
        # the head may have been the only thing blocking smaller waiters
        self._grant_waiters()

    def release(self, region: Region) -> None:
        granted = []
        with self._lock:
            live = self._live.get(region.handle)
            if live is None or live is not region:
                if region.released and region.cache is self:
                    raise CacheError(f"double release of region {region.handle}")
                raise CacheError(f"unknown region handle {region.handle}")
            del self._live[region.handle]
            del self._by_start[region.offset]
            self._starts.pop(bisect.bisect_left(self._starts, region.offset))
            region.released = True
            self.allocated_bytes -= region.length
            if not self._live:
                self._head = 0
            self._sample()
            granted = self._grant_waiters()
        for waiter in granted:
            if waiter.on_grant is not None:
                waiter.on_grant(waiter.region)
            waiter.event.set()

    def _grant_waiters(self) -> list[Waiter]:
        granted = []
        while self._waiters:
            head = self._waiters[0]
            region = self._try_allocate(head.size)
            if region is None:
                break
            self._waiters.popleft()
            head.region = region
            granted.append(head)
        return granted

    def view(self, region: Region) -> memoryview:
        if region.released:
            raise CacheError(f"region {region.handle} already released")
        return memoryview(self._buffer)[region.offset:region.offset + region.length]

    @property
    def n_waiters(self) -> int:
        return len(self._waiters)

    @property
    def live_regions(self) -> list[Region]:
        with self._lock:
            return sorted(self._live.values(), key=lambda r: r.offset)
