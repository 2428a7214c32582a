"""Accumulating wall-clock timers for named phases of a training step."""
from __future__ import annotations

import contextlib
import time
from collections import defaultdict


class PhaseTimer:
    def __init__(self):
        self.seconds: dict[str, float] = defaultdict(float)

    @contextlib.contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0


class _NullTimer:
    @contextlib.contextmanager
    def phase(self, name: str):
        yield


NULL_TIMER = _NullTimer()
