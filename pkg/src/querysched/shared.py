"""Single-writer shared state: versioned value slots and a stop latch."""

from __future__ import annotations

import threading
from typing import Generic, TypeVar

T = TypeVar("T")


class VersionedSlot(Generic[T]):
    """A published value with a strictly increasing version.

    One designated writer calls :meth:`publish`; any number of readers
    call :meth:`read` and always observe a complete (value, version)
    pair with versions nondecreasing over successive reads.
    """

    def __init__(self, value: T, version: int = 0):
        self._lock = threading.Lock()
        self._value = value
        self._version = version

    def publish(self, value: T) -> int:
        with self._lock:
            self._version += 1
            self._value = value
            return self._version

    def read(self) -> tuple[T, int]:
        with self._lock:
            return self._value, self._version

    @property
    def version(self) -> int:
        with self._lock:
            return self._version


class StopLatch:
    """One-way flag any worker may raise; checked between work items."""

    def __init__(self) -> None:
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()

    def __call__(self) -> bool:
        return self.is_set()
