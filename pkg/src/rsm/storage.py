"""Durable store: reliable queues and maps under all-or-nothing transactions.

All committed state lives in memory and is mirrored to an append-only log of
checksummed records; recovery replays the log. A record is either fully
present with a valid checksum or it is ignored, so a torn final write can
never surface partial effects.

Record layout (little-endian):

    [u32 length][u64 tx id][ops...][u32 CRC32C]

where ``length`` counts everything after itself and the CRC covers all
preceding bytes of the record (including the length field). Each op is
``[u32 name len][name][u8 opcode][u32 key len][key][u32 value len][value]``.

Concurrency: committed structures and the journal are guarded by one store
lock; a per-queue head lock is additionally held from the first tentative
dequeue until commit or abort, so a dequeued-but-uncommitted head can never
be observed (or stolen) by another transaction. Writes stay buffered in the
transaction until commit.

A simulated crash (``fail()`` or a crash hook decision) makes every further
operation raise :class:`StoreCrashedError`; reopening the same path recovers
exactly the committed state.
"""

from __future__ import annotations

import io
import os
import struct
import threading
from collections import deque

from .checksum import crc32c
from .errors import (
    QueueConflictError,
    RecoveryError,
    StorageError,
    StoreClosedError,
    StoreCrashedError,
    TransactionStateError,
)

OP_MAP_SET = 0
OP_MAP_DEL = 1
OP_Q_ENQ = 2
OP_Q_DEQ = 3
OP_CREATE_QUEUE = 4
OP_CREATE_MAP = 5

_DEL = object()  # overlay tombstone

FSYNC_ALWAYS = "always"
FSYNC_BATCHED = "batched"
FSYNC_NEVER = "never"


def encode_record(tx_id: int, ops) -> bytes:
    body = io.BytesIO()
    body.write(struct.pack("<Q", tx_id))
    for name, opcode, key, value in ops:
        raw = name.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<B", opcode))
        body.write(struct.pack("<I", len(key)))
        body.write(key)
        body.write(struct.pack("<I", len(value)))
        body.write(value)
    payload = body.getvalue()
    head = struct.pack("<I", len(payload) + 4)  # + trailing CRC
    crc = crc32c(head + payload)
    return head + payload + struct.pack("<I", crc)


def decode_record(buf: bytes, off: int):
    """Parse one record at *off*; returns (ops, tx_id, next_off) or None if
    the record is truncated or fails its checksum."""
    if off + 4 > len(buf):
        return None
    (length,) = struct.unpack_from("<I", buf, off)
    end = off + 4 + length
    if length < 12 or end > len(buf):
        return None
    crc = struct.unpack_from("<I", buf, end - 4)[0]
    if crc32c(buf[off:end - 4]) != crc:
        return None
    (tx_id,) = struct.unpack_from("<Q", buf, off + 4)
    ops = []
    pos = off + 12
    try:
        while pos < end - 4:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            opcode = buf[pos]
            pos += 1
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            key = buf[pos:pos + klen]
            pos += klen
            (vlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            value = buf[pos:pos + vlen]
            pos += vlen
            ops.append((name, opcode, key, value))
    except (struct.error, IndexError):
        return None
    if pos != end - 4:
        return None
    return ops, tx_id, end


def dissect(path) -> list[dict]:
    """Offline log inspection: one entry per record-shaped region."""
    with open(path, "rb") as fh:
        buf = fh.read()
    out = []
    off = 0
    while off < len(buf):
        parsed = decode_record(buf, off)
        if parsed is None:
            out.append({"offset": off, "ok": False, "trailing_bytes": len(buf) - off})
            break
        ops, tx_id, end = parsed
        out.append({"offset": off, "ok": True, "tx_id": tx_id,
                    "length": end - off, "ops": len(ops)})
        off = end
    return out


class ReliableQueue:
    """Durable FIFO of byte strings. All access goes through a transaction."""

    def __init__(self, store, name):
        self._store = store
        self.name = name
        self.items: deque[bytes] = deque()
        self.head_lock = threading.Lock()

    def enqueue(self, tx: "Transaction", item: bytes) -> None:
        tx._require_open()
        tx.ops.append((self.name, OP_Q_ENQ, b"", bytes(item)))

    def peek(self, tx: "Transaction") -> bytes | None:
        """Head item this transaction would dequeue next, without taking it."""
        tx._require_open()
        tx._hold_head(self)
        cursor = tx.deq_cursor.get(self.name, 0)
        with self._store._lock:
            if cursor < len(self.items):
                return self.items[cursor]
        return None

    def try_dequeue(self, tx: "Transaction") -> bytes | None:
        """Tentatively remove the head; gone for good only at commit."""
        item = self.peek(tx)
        if item is None:
            return None
        tx.deq_cursor[self.name] = tx.deq_cursor.get(self.name, 0) + 1
        tx.ops.append((self.name, OP_Q_DEQ, b"", b""))
        return item

    def committed_length(self) -> int:
        with self._store._lock:
            return len(self.items)


class ReliableMap:
    """Durable byte-keyed, byte-valued map with read-your-writes."""

    def __init__(self, store, name):
        self._store = store
        self.name = name
        self.entries: dict[bytes, bytes] = {}

    def get(self, tx: "Transaction", key: bytes) -> bytes | None:
        tx._require_open()
        overlay = tx.overlays.get(self.name)
        if overlay is not None and key in overlay:
            val = overlay[key]
            return None if val is _DEL else val
        with self._store._lock:
            return self.entries.get(bytes(key))

    def committed_get(self, key: bytes) -> bytes | None:
        with self._store._lock:
            return self.entries.get(bytes(key))

    def set(self, tx: "Transaction", key: bytes, value: bytes) -> None:
        tx._require_open()
        key, value = bytes(key), bytes(value)
        tx.overlays.setdefault(self.name, {})[key] = value
        tx.ops.append((self.name, OP_MAP_SET, key, value))

    def delete(self, tx: "Transaction", key: bytes) -> None:
        tx._require_open()
        key = bytes(key)
        tx.overlays.setdefault(self.name, {})[key] = _DEL
        tx.ops.append((self.name, OP_MAP_DEL, key, b""))

    def items(self, tx: "Transaction | None" = None,
              prefix: bytes = b"") -> list[tuple[bytes, bytes]]:
        """Committed entries merged with this transaction's overlay."""
        with self._store._lock:
            snap = {k: v for k, v in self.entries.items() if k.startswith(prefix)}
        if tx is not None:
            tx._require_open()
            for k, v in tx.overlays.get(self.name, {}).items():
                if not k.startswith(prefix):
                    continue
                if v is _DEL:
                    snap.pop(k, None)
                else:
                    snap[k] = v
        return sorted(snap.items())


class Transaction:
    """A unit of all-or-nothing visibility over one store."""

    def __init__(self, store: "Store", tx_id: int):
        self._store = store
        self.tx_id = tx_id
        self.state = "open"
        self.ops: list[tuple] = []          # (name, opcode, key, value), in order
        self.overlays: dict[str, dict] = {}  # map name -> {key: value | _DEL}
        self.deq_cursor: dict[str, int] = {}
        self.notes: dict = {}                # scratch for layered abstractions
        self.on_commit: list = []            # callbacks run after a successful commit
        self._held_heads: list[ReliableQueue] = []

    def _require_open(self):
        if self.state != "open":
            raise TransactionStateError(f"transaction {self.tx_id} is {self.state}")
        self._store._require_live()

    def _hold_head(self, queue: ReliableQueue):
        if queue in self._held_heads:
            return
        if not queue.head_lock.acquire(timeout=self._store.lock_timeout):
            raise QueueConflictError(
                f"queue {queue.name!r} head is held by another transaction")
        self._held_heads.append(queue)

    def _release(self):
        for q in self._held_heads:
            q.head_lock.release()
        self._held_heads = []

    def commit(self) -> None:
        if self.state == "aborted":
            raise TransactionStateError("commit after abort")
        if self.state == "committed":
            raise TransactionStateError("commit is not idempotent")
        try:
            self._store._commit(self)
            self.state = "committed"
        finally:
            if self.state == "open":   # commit failed (e.g. crash)
                self.state = "aborted"
            self._release()
        for fn in self.on_commit:
            fn()

    def abort(self) -> None:
        if self.state == "committed":
            raise TransactionStateError("abort after commit")
        self.state = "aborted"
        self._release()


class Store:
    """A collection registry plus transaction machinery and the journal.

    ``Store.open(path)`` recovers whatever a previous incarnation committed;
    ``Store.in_memory()`` has the identical interface with no durability,
    which is what the deterministic testkit runs on.
    """

    def __init__(self, path=None, *, fsync: str = FSYNC_ALWAYS, sync_every: int = 16,
                 compact_threshold: int = 64 * 1024 * 1024, lock_timeout: float = 30.0):
        self.path = os.fspath(path) if path is not None else None
        self.fsync_policy = fsync
        self.sync_every = sync_every
        self.compact_threshold = compact_threshold
        self.lock_timeout = lock_timeout
        self._lock = threading.RLock()
        self._queues: dict[str, ReliableQueue] = {}
        self._maps: dict[str, ReliableMap] = {}
        self._fh = None
        self._log_size = 0
        self._next_tx = 1
        self._closed = False
        self._crashed = False
        self._appends_since_sync = 0
        # None | callable(commit_ordinal, ops) -> None | "pre" | "post"
        self.crash_hook = None
        self.stats = {"commits": 0, "records": 0, "bytes": 0, "recovered_records": 0}

    # -- construction -------------------------------------------------------

    @classmethod
    def open(cls, path, **kwargs) -> "Store":
        store = cls(path, **kwargs)
        store._recover()
        store._fh = open(store.path, "ab")
        store._log_size = os.path.getsize(store.path)
        return store

    @classmethod
    def in_memory(cls, **kwargs) -> "Store":
        return cls(None, **kwargs)

    def _recover(self):
        if not os.path.exists(self.path):
            with open(self.path, "wb"):
                pass
            return
        try:
            with open(self.path, "rb") as fh:
                buf = fh.read()
        except OSError as exc:
            raise RecoveryError(f"cannot read log {self.path}: {exc}") from exc
        off = 0
        while off < len(buf):
            parsed = decode_record(buf, off)
            if parsed is None:
                break  # torn or corrupt tail; everything before it is committed
            ops, tx_id, off = parsed
            self._apply(ops)
            self._next_tx = max(self._next_tx, tx_id + 1)
            self.stats["recovered_records"] += 1

    # -- collections --------------------------------------------------------

    def queue(self, name: str) -> ReliableQueue:
        with self._lock:
            q = self._queues.get(name)
            if q is not None:
                return q
            if name in self._maps:
                raise StorageError(f"{name!r} already exists as a map")
            self._require_live()
            self._append_record([(name, OP_CREATE_QUEUE, b"", b"")])
            return self._queues[name]

    def map(self, name: str) -> ReliableMap:
        with self._lock:
            m = self._maps.get(name)
            if m is not None:
                return m
            if name in self._queues:
                raise StorageError(f"{name!r} already exists as a queue")
            self._require_live()
            self._append_record([(name, OP_CREATE_MAP, b"", b"")])
            return self._maps[name]

    def has_collection(self, name: str) -> bool:
        with self._lock:
            return name in self._queues or name in self._maps

    # -- transactions --------------------------------------------------------

    def begin(self) -> Transaction:
        self._require_live()
        with self._lock:
            tx = Transaction(self, self._next_tx)
            self._next_tx += 1
        return tx

    def _require_live(self):
        if self._crashed:
            raise StoreCrashedError("store has crashed")
        if self._closed:
            raise StoreClosedError("store is closed")

    def _commit(self, tx: Transaction):
        self._require_live()
        if not tx.ops:
            return  # empty commits append nothing
        with self._lock:
            self._require_live()
            ordinal = self.stats["commits"] + 1
            decision = self.crash_hook(ordinal, tx.ops) if self.crash_hook else None
            if decision == "pre":
                self._crashed = True
                raise StoreCrashedError("crash injected before commit")
            self._append_record(tx.ops, tx.tx_id)
            self.stats["commits"] = ordinal
            if decision == "post":
                self._crashed = True
                raise StoreCrashedError("crash injected after commit")
            if (self._fh is not None
                    and self._log_size > self.compact_threshold):
                self._compact()

    def _append_record(self, ops, tx_id: int = 0):
        """Journal then apply; caller holds the store lock."""
        record = encode_record(tx_id, ops)
        if self._fh is not None:
            self._fh.write(record)
            self._fh.flush()
            self._maybe_sync()
            self._log_size += len(record)
        self.stats["records"] += 1
        self.stats["bytes"] += len(record)
        self._apply(ops)

    def _maybe_sync(self):
        if self.fsync_policy == FSYNC_ALWAYS:
            os.fsync(self._fh.fileno())
        elif self.fsync_policy == FSYNC_BATCHED:
            self._appends_since_sync += 1
            if self._appends_since_sync >= self.sync_every:
                os.fsync(self._fh.fileno())
                self._appends_since_sync = 0

    def _apply(self, ops):
        for name, opcode, key, value in ops:
            if opcode == OP_MAP_SET:
                self._maps[name].entries[key] = value
            elif opcode == OP_MAP_DEL:
                self._maps[name].entries.pop(key, None)
            elif opcode == OP_Q_ENQ:
                self._queues[name].items.append(value)
            elif opcode == OP_Q_DEQ:
                self._queues[name].items.popleft()
            elif opcode == OP_CREATE_QUEUE:
                self._queues.setdefault(name, ReliableQueue(self, name))
            elif opcode == OP_CREATE_MAP:
                self._maps.setdefault(name, ReliableMap(self, name))
            else:
                raise RecoveryError(f"unknown opcode {opcode}")

    # -- compaction ----------------------------------------------------------

    def _snapshot_ops(self):
        ops = []
        for name in sorted(self._queues):
            ops.append((name, OP_CREATE_QUEUE, b"", b""))
        for name in sorted(self._maps):
            ops.append((name, OP_CREATE_MAP, b"", b""))
        for name in sorted(self._maps):
            for key, value in sorted(self._maps[name].entries.items()):
                ops.append((name, OP_MAP_SET, key, value))
        for name in sorted(self._queues):
            for item in self._queues[name].items:
                ops.append((name, OP_Q_ENQ, b"", item))
        return ops

    def _compact(self):
        """Rewrite the log as one snapshot record; atomic via rename."""
        snapshot = encode_record(0, self._snapshot_ops())
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(snapshot)
            fh.flush()
            os.fsync(fh.fileno())
        self._fh.close()
        os.replace(tmp, self.path)
        self._fh = open(self.path, "ab")
        self._log_size = len(snapshot)
        self._appends_since_sync = 0

    # -- lifecycle -----------------------------------------------------------

    def fail(self):
        """Simulate a crash: in-memory state becomes unreachable, log stays."""
        with self._lock:
            self._crashed = True
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def close(self):
        with self._lock:
            if self._fh is not None:
                if self.fsync_policy != FSYNC_NEVER:
                    os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None
            self._closed = True
