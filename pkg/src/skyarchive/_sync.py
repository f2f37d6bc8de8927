"""Small locking helpers."""

from __future__ import annotations

import threading
from contextlib import contextmanager


class RWLock:
    """Shared/exclusive lock; shared holders may re-enter."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = None

    @contextmanager
    def shared(self):
        me = threading.get_ident()
        with self._cond:
            while self._writer is not None and self._writer != me:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def exclusive(self):
        me = threading.get_ident()
        with self._cond:
            while self._writer is not None or self._readers > 0:
                self._cond.wait()
            self._writer = me
        try:
            yield
        finally:
            with self._cond:
                self._writer = None
                self._cond.notify_all()


class LockState:
    """Mixin that drops lock attributes on pickling and recreates them."""

    _lock_factories: dict = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        for name in self._lock_factories:
            state.pop(name, None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        for name, factory in self._lock_factories.items():
            setattr(self, name, factory())
