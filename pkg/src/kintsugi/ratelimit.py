"""Per-source token buckets with an injectable clock.

Bucket arithmetic is exact (``Fraction``) so the admission bound holds
without rounding slack.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable


@dataclass
class Bucket:
    tokens: Fraction
    last_refill: Fraction


class RateLimiter:
    """Admit at most ``capacity + elapsed * refill_per_second`` requests per source.

    ``clock`` returns seconds; the simulator passes virtual time.
    """

    def __init__(
        self,
        capacity: int = 5,
        refill_per_second: float = 5 / 3600,
        clock: Callable[[], float] = time.monotonic,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if refill_per_second < 0:
            raise ValueError("refill rate must be non-negative")
        self.capacity = capacity
        self.refill_per_second = Fraction(refill_per_second)
        self.clock = clock
        self._buckets: dict[str, Bucket] = {}
        self._lock = threading.Lock()

    def _refill(self, bucket: Bucket, now: float) -> None:
        elapsed = max(Fraction(0), now - bucket.last_refill)
        bucket.tokens = min(self.capacity, bucket.tokens + elapsed * self.refill_per_second)
        bucket.last_refill = now

    def admit(self, source: str) -> bool:
        with self._lock:
            now = Fraction(self.clock())
            bucket = self._buckets.get(source)
            if bucket is None:
                bucket = self._buckets[source] = Bucket(Fraction(self.capacity), now)
            else:
                self._refill(bucket, now)
            if bucket.tokens >= 1:
                bucket.tokens -= 1
                return True
            return False

    def tokens(self, source: str) -> float:
        with self._lock:
            bucket = self._buckets.get(source)
            if bucket is None:
                return float(self.capacity)
            self._refill(bucket, Fraction(self.clock()))
            return float(bucket.tokens)
