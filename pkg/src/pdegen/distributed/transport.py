"""Point-to-point message transports between ranks.

Every message is ``(tag, payload bytes)``. Messages between a fixed pair of
ranks are delivered reliably and in order. Two implementations share this
contract: in-process queues for worker threads, and TCP sockets for worker
processes. On the socket wire a message is framed as

    uint32 little-endian payload length | uint8 tag | payload

where the payload is a raw little-endian scalar array.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import time

TAG_GRADIENT = 0
TAG_BN_STATS = 1
TAG_CONTROL = 2
TAGS = {TAG_GRADIENT: "gradient", TAG_BN_STATS: "bn-stats", TAG_CONTROL: "control"}

HEADER = struct.Struct("<IB")


class TransportError(RuntimeError):
    pass


class CollectiveTimeout(TransportError):
    def __init__(self, rank: int, peer: int, timeout: float):
        super().__init__(f"rank {rank} timed out after {timeout:g}s waiting for rank {peer}")
        self.rank, self.peer = rank, peer


def encode_frame(tag: int, payload: bytes) -> bytes:
    if tag not in TAGS:
        raise ValueError(f"unknown payload tag {tag}")
    return HEADER.pack(len(payload), tag) + payload


def decode_header(header: bytes) -> tuple[int, int]:
    length, tag = HEADER.unpack(header)
    if tag not in TAGS:
        raise TransportError(f"received unknown payload tag {tag}")
    return length, tag


class Transport:
    """Base class; subclasses provide ``send`` and ``_inbox``."""

    rank: int
    size: int

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def _inbox(self, src: int) -> queue.Queue:
        raise NotImplementedError

    def recv(self, src: int, timeout: float) -> tuple[int, bytes]:
        self._check_peer(src)
        try:
            item = self._inbox(src).get(timeout=timeout)
        except queue.Empty:
            raise CollectiveTimeout(self.rank, src, timeout) from None
        if isinstance(item, BaseException):
            raise TransportError(f"rank {self.rank}: link to rank {src} failed: {item}") from item
        return item

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.size or peer == self.rank:
            raise ValueError(f"rank {self.rank}: invalid peer rank {peer}")

    def close(self) -> None:
        pass


class InProcHub:
    """Shared mailboxes for ``size`` worker threads in one process."""

    def __init__(self, size: int):
        self.size = size
        self.boxes = {(s, d): queue.Queue() for s in range(size) for d in range(size) if s != d}

    def endpoint(self, rank: int) -> "InProcTransport":
        return InProcTransport(self, rank)


class InProcTransport(Transport):
    def __init__(self, hub: InProcHub, rank: int):
        self.hub, self.rank, self.size = hub, rank, hub.size

    def send(self, dst, tag, payload):
        self._check_peer(dst)
        if tag not in TAGS:
            raise ValueError(f"unknown payload tag {tag}")
        self.hub.boxes[(self.rank, dst)].put((tag, bytes(payload)))

    def _inbox(self, src):
        return self.hub.boxes[(src, self.rank)]


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


class SocketTransport(Transport):
    """Full TCP mesh. Rank ``r`` listens on ``addresses[r]``, dials lower ranks
    and accepts higher ones. Each link has a reader thread feeding an inbox."""

    def __init__(self, rank: int, addresses: list[str], connect_timeout: float = 60.0):
        self.rank, self.size = rank, len(addresses)
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside [0, {self.size})")
        self.addresses = [parse_address(a) for a in addresses]
        self.inboxes = {r: queue.Queue() for r in range(self.size) if r != rank}
        self.socks: dict[int, socket.socket] = {}
        self.locks = {r: threading.Lock() for r in self.inboxes}
        self._closing = False
        self._threads = []
        self._connect(connect_timeout)

    def _connect(self, timeout: float) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(self.addresses[self.rank])
        server.listen(self.size)
        server.settimeout(timeout)
        deadline = time.monotonic() + timeout
        try:
            for peer in range(self.rank):
                self.socks[peer] = self._dial(peer, deadline)
            for _ in range(self.rank + 1, self.size):
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    missing = sorted(set(range(self.rank + 1, self.size)) - set(self.socks))
                    raise TransportError(f"rank {self.rank}: ranks {missing} never connected") from None
                conn.settimeout(None)
                peer = struct.unpack("<I", _recv_exact(conn, 4))[0]
                self.socks[peer] = conn
        finally:
            server.close()
        for peer, sock in self.socks.items():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
            t.start()
            self._threads.append(t)

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        while True:
            try:
                sock = socket.create_connection(self.addresses[peer], timeout=5.0)
                sock.settimeout(None)
                sock.sendall(struct.pack("<I", self.rank))
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"rank {self.rank}: could not reach rank {peer} at {self.addresses[peer]}")
                time.sleep(0.05)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        box = self.inboxes[peer]
        try:
            while True:
                length, tag = decode_header(_recv_exact(sock, HEADER.size))
                box.put((tag, _recv_exact(sock, length)))
        except (OSError, TransportError) as exc:
            if not self._closing:
                box.put(exc)

    def send(self, dst, tag, payload):
        self._check_peer(dst)
        frame = encode_frame(tag, bytes(payload))
        try:
            with self.locks[dst]:
                self.socks[dst].sendall(frame)
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send to rank {dst} failed: {exc}") from exc

    def _inbox(self, src):
        return self.inboxes[src]

    def close(self):
        self._closing = True
        for sock in self.socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed by peer")
        buf += chunk
    return bytes(buf)


def free_addresses(n: int, host: str = "127.0.0.1") -> list[str]:
    """``n`` currently unused localhost addresses (for tests and local launches)."""
    socks, out = [], []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind((host, 0))
        socks.append(s)
        out.append(f"{host}:{s.getsockname()[1]}")
    for s in socks:
        s.close()
    return out
