"""Message channels: an in-process queue pair and framed TCP sockets.

Both carry encoded frames, so byte counters and bit-exactness are identical
whichever channel a session runs over.
"""

from __future__ import annotations

import queue
import socket
import threading

from ..errors import FedWindError, ProtocolError
from .frames import HEADER_SIZE, RoundMessage, decode, decode_header, encode


class ChannelClosed(FedWindError):
    pass


class ChannelTimeout(FedWindError):
    pass


class Channel:
    """Ordered, reliable message pipe with exact byte counters."""

    def __init__(self, capture: list | None = None):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.capture = capture

    def send(self, msg: RoundMessage) -> None:
        frame = encode(msg)
        self._send_frame(frame)
        self.bytes_sent += len(frame)
        if self.capture is not None:
            self.capture.append(("sent", frame))

    def recv(self, timeout: float | None = None) -> RoundMessage:
        frame = self._recv_frame(timeout)
        self.bytes_received += len(frame)
        if self.capture is not None:
            self.capture.append(("received", frame))
        return decode(frame)

    def close(self) -> None:
        raise NotImplementedError

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> bytes:
        raise NotImplementedError


_EOF = object()


class InProcChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, capture: list | None = None):
        super().__init__(capture)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("channel is closed")
        self._outbox.put(frame)

    def _recv_frame(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no message within {timeout} s") from None
        if item is _EOF:
            self._inbox.put(_EOF)
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_EOF)


def inproc_pair(capture: list | None = None) -> tuple[InProcChannel, InProcChannel]:
    """(server end, client end); ``capture`` records frames seen by the server end."""
    a, b = queue.Queue(), queue.Queue()
    return InProcChannel(a, b, capture), InProcChannel(b, a)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket, capture: list | None = None):
        super().__init__(capture)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def _send_frame(self, frame: bytes) -> None:
        try:
            with self._lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosed(f"send failed: {exc}") from exc

    def _read_exact(self, size: int) -> bytes:
        buf = bytearray()
        while len(buf) < size:
            try:
                chunk = self.sock.recv(size - len(buf))
            except socket.timeout:
                raise ChannelTimeout("receive timed out") from None
            except OSError as exc:
                raise ChannelClosed(f"receive failed: {exc}") from exc
            if not chunk:
                if buf:
                    raise ProtocolError(f"connection closed mid-frame ({len(buf)} of {size} bytes)",
                                        field="payload")
                raise ChannelClosed("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_frame(self, timeout):
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER_SIZE)
        _, _, length = decode_header(header)
        return header + self._read_exact(length)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    """Server socket handing out one TcpChannel per accepted client."""

    def __init__(self, address: str = "127.0.0.1:0", backlog: int = 64):
        host, port = parse_address(address)
        self.sock = socket.create_server((host, port), backlog=backlog)

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, timeout: float | None = None, capture: list | None = None) -> TcpChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise ChannelTimeout(f"no client connected within {timeout} s") from None
        conn.settimeout(None)
        return TcpChannel(conn, capture)

    def close(self) -> None:
        self.sock.close()


def connect(address: str, timeout: float | None = 30.0) -> TcpChannel:
    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpChannel(sock)


__all__ = [
    "Channel", "ChannelClosed", "ChannelTimeout", "InProcChannel", "TcpChannel", "TcpListener",
    "connect", "inproc_pair", "parse_address",
]
