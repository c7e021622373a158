"""Ordered, reliable message channels between Alice and Bob.

Every transport carries encoded frames, so the loopback exercises the same
serialisation as the socket binding.
"""

from __future__ import annotations

import queue
import socket
import threading

from ..errors import TransportError
from .messages import FrameDecoder, encode

DEFAULT_TIMEOUT = 30.0


class Transport:
    """One endpoint. Subclasses implement ``_send_frame`` and ``_next_message``."""

    def __init__(self):
        self.sent_messages = 0
        self.sent_bytes = 0

    def send(self, message) -> None:
        frame = encode(message)
        self._send_frame(frame)
        self.sent_messages += 1
        self.sent_bytes += len(frame)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT):
        return self._next_message(timeout)

    def close(self) -> None:
        pass

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _next_message(self, timeout):
        raise NotImplementedError


_CLOSED = object()


class LoopbackTransport(Transport):
    """In-process endpoint backed by a pair of queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._inbox, self._outbox = inbox, outbox
        self._decoder = FrameDecoder()
        self._ready: list = []
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def _send_frame(self, frame):
        if self._closed:
            raise TransportError("endpoint closed")
        self._outbox.put(frame)

    def _next_message(self, timeout):
        while not self._ready:
            try:
                item = self._inbox.get(timeout=timeout)
            except queue.Empty:
                raise TransportError("timed out waiting for peer") from None
            if item is _CLOSED:
                raise TransportError("peer closed the channel")
            self._ready.extend(self._decoder.feed(item))
        return self._ready.pop(0)

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


class SocketTransport(Transport):
    """Endpoint over a connected stream socket.

    A daemon thread drains the socket into a queue so that a single thread
    can send a large frame before the peer starts reading.
    """

    def __init__(self, sock: socket.socket):
        super().__init__()
        self._sock = sock
        self._inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @classmethod
    def pair(cls) -> tuple["SocketTransport", "SocketTransport"]:
        a, b = socket.socketpair()
        return cls(a), cls(b)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "SocketTransport":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def _read_loop(self):
        decoder = FrameDecoder()
        try:
            while True:
                data = self._sock.recv(1 << 16)
                if not data:
                    break
                for msg in decoder.feed(data):
                    self._inbox.put(msg)
        except (OSError, TransportError) as exc:
            self._inbox.put(exc)
        self._inbox.put(_CLOSED)

    def _send_frame(self, frame):
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _next_message(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for peer") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportError("peer closed the channel")
        if isinstance(item, BaseException):
            raise TransportError(f"receive failed: {item}") from item
        return item

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
