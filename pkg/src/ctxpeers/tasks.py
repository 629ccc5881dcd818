"""Minimal futures and generator-based coroutines driven by a node's loop.

Protocol code is written as generators that ``yield`` a :class:`Future`
and receive its result (or have its exception thrown in)::

    def lookup(self, x):
        reply = yield self.rpc(addr, MessageType.GET_SUCCESSOR, {"target": x})
        return reply.payload["node"]

Nothing here blocks or owns threads; callbacks run on whatever context
resolves the future, which for a node is always its own event loop.
"""

from __future__ import annotations

import logging

log = logging.getLogger(__name__)


class Future:
    __slots__ = ("_done", "_value", "_exc", "_callbacks")

    def __init__(self):
        self._done = False
        self._value = None
        self._exc = None
        self._callbacks = []

    def done(self):
        return self._done

    def result(self):
        if not self._done:
            raise RuntimeError("future not resolved")
        if self._exc is not None:
            raise self._exc
        return self._value

    def exception(self):
        return self._exc

    def set_result(self, value):
        if self._done:
            return
        self._done, self._value = True, value
        self._fire()

    def set_exception(self, exc):
        if self._done:
            return
        self._done, self._exc = True, exc
        self._fire()

    def add_done_callback(self, fn):
        if self._done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self):
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    @classmethod
    def resolved(cls, value=None):
        f = cls()
        f.set_result(value)
        return f


def spawn(gen, name=None) -> Future:
    """Run a generator coroutine until it returns; return its future."""
    out = Future()

    def step(value=None, exc=None):
        while True:
            try:
                awaited = gen.throw(exc) if exc is not None else gen.send(value)
            except StopIteration as stop:
                out.set_result(stop.value)
                return
            except Exception as err:
                out.set_exception(err)
                return
            if not isinstance(awaited, Future):
                err = TypeError(f"coroutine {name or gen} yielded {awaited!r}")
                value, exc = None, err
                continue
            if awaited.done():
                value, exc = awaited._value, awaited._exc
                continue
            awaited.add_done_callback(lambda f: step(f._value, f._exc))
            return

    step()
    return out


def background(gen, name, expected=()) -> Future:
    """Spawn a coroutine whose failure is logged rather than raised."""
    fut = spawn(gen, name)

    def report(f):
        exc = f.exception()
        if exc is not None and not isinstance(exc, expected):
            log.warning("%s failed: %r", name, exc)

    fut.add_done_callback(report)
    return fut


def gather(futures) -> Future:
    """Future of a list of ``(ok, value_or_exception)`` once all complete."""
    futures = list(futures)
    out = Future()
    results = [None] * len(futures)
    remaining = [len(futures)]
    if not futures:
        out.set_result([])
        return out

    def collect(i):
        def cb(f):
            results[i] = (f._exc is None, f._exc if f._exc is not None else f._value)
            remaining[0] -= 1
            if remaining[0] == 0:
                out.set_result(results)
        return cb

    for i, f in enumerate(futures):
        f.add_done_callback(collect(i))
    return out
