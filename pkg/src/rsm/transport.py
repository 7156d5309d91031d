"""Transports move opaque packets between partitions; delivery is best-effort.

Reliability is the delivery protocol's job (retransmit until acknowledged),
so a transport is free to drop, duplicate, and reorder. Three are provided:
an in-process channel, a seeded fault-injecting wrapper for tests, and a
plain length-prefixed stream-socket transport.
"""

from __future__ import annotations

import random
import socket
import struct
import threading


class InProcessTransport:
    """Direct in-process channel: a send is an immediate callback."""

    def __init__(self):
        self._endpoints = {}
        self._lock = threading.Lock()
        self.stats = {"sent": 0, "dropped": 0}

    def attach(self, partition: str, deliver) -> None:
        with self._lock:
            self._endpoints[partition] = deliver

    def detach(self, partition: str) -> None:
        with self._lock:
            self._endpoints.pop(partition, None)

    def partitions(self) -> list[str]:
        with self._lock:
            return sorted(self._endpoints)

    def send(self, dest_partition: str, data: bytes) -> None:
        with self._lock:
            deliver = self._endpoints.get(dest_partition)
            self.stats["sent"] += 1
            if deliver is None:
                self.stats["dropped"] += 1  # endpoint down; sender will retry
                return
        deliver(data)

    def pending(self) -> int:
        return 0

    def stop(self) -> None:
        pass


class FaultyTransport:
    """Lossy wrapper: seeded drops, duplicates, and bounded reordering.

    Reordering holds a packet back until up to ``reorder_window`` later sends
    to the same destination have passed it. Every packet held back is
    released by subsequent traffic, and the retransmission protocol keeps
    traffic flowing, so any packet that is resent unboundedly often is
    eventually delivered.
    """

    def __init__(self, seed: int = 0, drop_prob: float = 0.0,
                 duplicate_prob: float = 0.0, reorder_prob: float = 0.0,
                 reorder_window: int = 8):
        self.inner = InProcessTransport()
        self.drop_prob = drop_prob
        self.duplicate_prob = duplicate_prob
        self.reorder_prob = reorder_prob
        self.reorder_window = reorder_window
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._held: dict[str, list] = {}  # dest -> [(countdown, data)]
        self.stats = {"sent": 0, "dropped": 0, "duplicated": 0, "reordered": 0}

    def attach(self, partition, deliver):
        self.inner.attach(partition, deliver)

    def detach(self, partition):
        self.inner.detach(partition)

    def partitions(self):
        return self.inner.partitions()

    def send(self, dest_partition: str, data: bytes) -> None:
        ready = []
        with self._lock:
            self.stats["sent"] += 1
            copies = 0
            if self._rng.random() >= self.drop_prob:
                copies = 1
                if self._rng.random() < self.duplicate_prob:
                    copies = 2
                    self.stats["duplicated"] += 1
            else:
                self.stats["dropped"] += 1
            held = self._held.setdefault(dest_partition, [])
            for _ in range(copies):
                countdown = 0
                if self.reorder_window and self._rng.random() < self.reorder_prob:
                    countdown = self._rng.randint(1, self.reorder_window)
                    self.stats["reordered"] += 1
                held.append((countdown, data))
            remaining = []
            for countdown, packet in held:
                if countdown <= 0:
                    ready.append(packet)
                else:
                    remaining.append((countdown - 1, packet))
            self._held[dest_partition] = remaining
        for packet in ready:
            self.inner.send(dest_partition, packet)

    def flush(self) -> None:
        """Release everything held back, in arrival order."""
        with self._lock:
            held, self._held = self._held, {}
        for dest, entries in held.items():
            for _, packet in entries:
                self.inner.send(dest, packet)

    def pending(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._held.values())

    def stop(self) -> None:
        pass


class SocketTransport:
    """Length-prefixed packets over TCP; one listener per attached partition."""

    def __init__(self):
        self._addrs: dict[str, tuple[str, int]] = {}
        self._servers: dict[str, socket.socket] = {}
        self._conns: dict[str, socket.socket] = {}
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self.stats = {"sent": 0, "dropped": 0}

    def attach(self, partition: str, deliver, host: str = "127.0.0.1",
               port: int = 0) -> tuple[str, int]:
        srv = socket.create_server((host, port))
        srv.settimeout(0.2)
        addr = srv.getsockname()[:2]
        with self._lock:
            self._servers[partition] = srv
            self._addrs[partition] = addr
        threading.Thread(target=self._accept_loop, args=(partition, srv, deliver),
                         daemon=True, name=f"sock-accept-{partition}").start()
        return addr

    def advertise(self, partition: str, host: str, port: int) -> None:
        """Record the address of a partition served by another process."""
        with self._lock:
            self._addrs[partition] = (host, port)

    def detach(self, partition: str) -> None:
        with self._lock:
            srv = self._servers.pop(partition, None)
        if srv is not None:
            srv.close()

    def partitions(self) -> list[str]:
        with self._lock:
            return sorted(self._addrs)

    def _accept_loop(self, partition, srv, deliver):
        while not self._stopped.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._read_loop, args=(conn, deliver),
                             daemon=True).start()

    def _read_loop(self, conn, deliver):
        try:
            buf = b""
            while not self._stopped.is_set():
                while len(buf) >= 4:
                    (length,) = struct.unpack_from("<I", buf, 0)
                    if len(buf) < 4 + length:
                        break
                    deliver(buf[4:4 + length])
                    buf = buf[4 + length:]
                chunk = conn.recv(65536)
                if not chunk:
                    return
                buf += chunk
        except OSError:
            pass
        finally:
            conn.close()

    def send(self, dest_partition: str, data: bytes) -> None:
        with self._lock:
            addr = self._addrs.get(dest_partition)
            conn = self._conns.get(dest_partition)
        self.stats["sent"] += 1
        if addr is None:
            self.stats["dropped"] += 1
            return
        framed = struct.pack("<I", len(data)) + data
        for attempt in range(2):
            try:
                if conn is None:
                    conn = socket.create_connection(addr, timeout=1.0)
                    with self._lock:
                        self._conns[dest_partition] = conn
                conn.sendall(framed)
                return
            except OSError:
                with self._lock:
                    self._conns.pop(dest_partition, None)
                conn = None
        self.stats["dropped"] += 1  # unreachable; protocol-level retry covers it

    def pending(self) -> int:
        return 0

    def stop(self) -> None:
        self._stopped.set()
        with self._lock:
            conns = list(self._conns.values()) + list(self._servers.values())
            self._conns.clear()
            self._servers.clear()
        for c in conns:
            c.close()
