"""Asyncio TCP runtime: the same frames as the simulator, over real sockets.

One listening server per peer.  Outbound traffic uses one connection per
destination, opened on demand and re-opened after failure; frames that
cannot be written are dropped and left to the protocol's timeouts.
Replies to a source that does not listen (a CLI client) travel back over
the connection the request arrived on.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import os
from collections import Counter

from .codec import FrameError, FrameReader, Message, encode

log = logging.getLogger(__name__)

CONNECT_TIMEOUT = 2.0


def split_address(address: str):
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {address!r} is not host:port")
    return host or "127.0.0.1", int(port)


class _Link:
    """Outbound connection to one destination with a send queue."""

    def __init__(self, runtime, dst):
        self.runtime = runtime
        self.dst = dst
        self.queue = asyncio.Queue()
        self.task = asyncio.ensure_future(self._run())

    async def _run(self):
        writer = None
        try:
            while True:
                data = await self.queue.get()
                try:
                    if writer is None or writer.is_closing():
                        host, port = split_address(self.dst)
                        reader, writer = await asyncio.wait_for(
                            asyncio.open_connection(host, port), CONNECT_TIMEOUT)
                        self.runtime._spawn_reader(reader, writer)
                    writer.write(data)
                    await writer.drain()
                except (OSError, asyncio.TimeoutError, ValueError) as exc:
                    self.runtime.metrics["dropped"] += 1
                    log.debug("send to %s failed: %r", self.dst, exc)
                    writer = None
        except asyncio.CancelledError:
            if writer is not None:
                writer.close()
            raise


class AsyncRuntime:
    """Runtime interface for a ContextPeer hosted on an asyncio loop."""

    def __init__(self, seed=0):
        self.loop = asyncio.get_running_loop()
        self.seed = seed
        self.handlers = {}
        self.links = {}
        self.inbound = {}
        self.metrics = Counter()
        self.server = None
        self._readers = set()

    def now(self) -> int:
        return int(self.loop.time() * 1000)

    def call_later(self, delay, fn, *args):
        return self.loop.call_later(max(delay, 0) / 1000.0, fn, *args)

    def defer(self, fn, *args):
        self.loop.call_soon(fn, *args)

    def register(self, address, handler):
        self.handlers[address] = handler

    def unregister(self, address):
        self.handlers.pop(address, None)

    def transmit(self, msg: Message):
        self.metrics["sent"] += 1
        try:
            data = encode(msg)
        except FrameError as exc:
            self.metrics["dropped"] += 1
            log.warning("cannot encode %s: %s", msg.type, exc)
            return
        if msg.dst in self.handlers:
            # loopback: still through the codec, never re-entrant
            self.loop.call_soon(self._deliver, data)
            return
        writer = self.inbound.get(msg.dst)
        if writer is not None and not writer.is_closing():
            writer.write(data)
            return
        link = self.links.get(msg.dst)
        if link is None:
            link = self.links[msg.dst] = _Link(self, msg.dst)
        link.queue.put_nowait(data)

    def _deliver(self, data):
        reader = FrameReader()
        for msg in reader.feed(data):
            self._dispatch(msg, None)

    def _dispatch(self, msg, writer):
        if writer is not None:
            self.inbound.setdefault(msg.src, writer)
        handler = self.handlers.get(msg.dst)
        if handler is None:
            self.metrics["dropped"] += 1
            return
        self.metrics["delivered"] += 1
        handler(msg)

    def _spawn_reader(self, reader, writer):
        task = asyncio.ensure_future(self._read(reader, writer))
        self._readers.add(task)
        task.add_done_callback(self._readers.discard)

    async def _read(self, reader, writer):
        frames = FrameReader()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in frames.feed(data):
                    self._dispatch(msg, writer)
        except FrameError as exc:
            self.metrics["bad_frames"] += 1
            log.warning("closing connection after bad frame: %s", exc)
        except (OSError, asyncio.IncompleteReadError):
            pass
        finally:
            for src in [s for s, w in self.inbound.items() if w is writer]:
                del self.inbound[src]
            writer.close()

    async def listen(self, address):
        host, port = split_address(address)
        self.server = await asyncio.start_server(self._spawn_reader, host, port)
        return self.server

    async def close(self):
        for link in self.links.values():
            link.task.cancel()
        for task in list(self._readers):
            task.cancel()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()


class Client:
    """Application-side connection speaking the CLIENT_* messages to one node."""

    _ids = itertools.count(1)

    def __init__(self, node_address, name=None):
        self.node = node_address
        self.name = name or f"client-{os.getpid()}-{next(self._ids)}"
        self._msg_ids = itertools.count(1)
        self.reader = self.writer = None
        self.frames = FrameReader()
        self.backlog = []

    async def connect(self, timeout=CONNECT_TIMEOUT):
        host, port = split_address(self.node)
        self.reader, self.writer = await asyncio.wait_for(
            asyncio.open_connection(host, port), timeout)

    async def send(self, kind, payload) -> int:
        mid = next(self._msg_ids)
        self.writer.write(encode(Message(kind, self.name, self.node, mid, 64, payload)))
        await self.writer.drain()
        return mid

    async def receive(self) -> Message:
        while not self.backlog:
            data = await self.reader.read(65536)
            if not data:
                raise ConnectionError(f"{self.node} closed the connection")
            self.backlog.extend(self.frames.feed(data))
        return self.backlog.pop(0)

    async def request(self, kind, payload, timeout=30.0) -> Message:
        mid = await self.send(kind, payload)

        async def wait():
            while True:
                msg = await self.receive()
                if msg.payload.get("re") == mid:
                    return msg
                self.backlog_events.append(msg)

        self.backlog_events = []
        reply = await asyncio.wait_for(wait(), timeout)
        self.backlog[:0] = self.backlog_events
        return reply

    async def close(self):
        if self.writer is not None:
            self.writer.close()


__all__ = ["AsyncRuntime", "Client", "split_address"]
