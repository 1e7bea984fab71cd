"""Allocation accounting for score buffers and streaming state.

Kernels report each score buffer they allocate; the counters are exact because
reporting happens at the allocation site, not by sampling process memory.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class LabelStats:
    allocations: int = 0
    total_bytes: int = 0
    peak_bytes: int = 0
    peak_elements: int = 0


@dataclass
class AllocationAccounting:
    enabled: bool = False
    labels: dict[str, LabelStats] = field(default_factory=dict)

    def record(self, label: str, elements: int, itemsize: int) -> None:
        if not self.enabled:
            return
        stats = self.labels.setdefault(label, LabelStats())
        nbytes = int(elements) * int(itemsize)
        stats.allocations += 1
        stats.total_bytes += nbytes
        if nbytes > stats.peak_bytes:
            stats.peak_bytes = nbytes
        if elements > stats.peak_elements:
            stats.peak_elements = int(elements)

    def peak_bytes(self, label: str) -> int:
        return self.labels[label].peak_bytes if label in self.labels else 0

    def peak_elements(self, label: str) -> int:
        return self.labels[label].peak_elements if label in self.labels else 0

    def reset(self) -> None:
        self.labels.clear()


_ACTIVE = AllocationAccounting()


def get_accounting() -> AllocationAccounting:
    """The session currently receiving records (disabled outside ``accounting()``)."""
    return _ACTIVE


def record(label: str, elements: int, itemsize: int) -> None:
    _ACTIVE.record(label, elements, itemsize)


@contextmanager
def accounting():
    """Route records to a fresh enabled session; the session stays readable afterwards."""
    global _ACTIVE
    previous, session = _ACTIVE, AllocationAccounting(enabled=True)
    _ACTIVE = session
    try:
        yield session
    finally:
        _ACTIVE = previous
