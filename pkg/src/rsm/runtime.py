"""The machine execution engine.

One :class:`MachineHost` per partition owns a durable store and any number
of machines. Each machine has three logical tasks, each running under its
own transactions: the event-handling loop (dequeue a batch from the inbox,
run the handlers, buffer sends to the outbox, commit everything at once),
the outbox drain, and input ingestion. Tasks are spawned on demand when
work arrives and park on condition variables otherwise.

Failover model: a crash loses every in-memory structure (volatile fields,
busy bits, in-memory inboxes, queue indices). Restarting the host recovers
the store, re-creates each machine recorded in the hosted map with the same
id, rebuilds queue indices by scanning the shared structures, and resumes
the loops. An event whose processing had not committed is simply still at
the head of its inbox.
"""

from __future__ import annotations

import itertools
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass
from random import Random

from .errors import (
    HostStoppedError,
    RecoveryError,
    StoreCrashedError,
    UnknownClassError,
    UnknownDestinationError,
)
from .model import (
    ENV,
    Event,
    HandlerContext,
    MachineClass,
    MachineRegistry,
    N_CREATE,
    RsmId,
)
from .network import DeliveryService
from .storage import Store

log = logging.getLogger(__name__)

HOSTED = "hosted"
STATE_REGISTERS = "state"
FIELDS = "fields"
SHARED_INBOXES = "inboxes"
SHARED_OUTBOXES = "outboxes"
DEAD_LETTERS = "dead"
_LIVE = b"C:"
_TOMB = b"T:"


@dataclass(frozen=True)
class HostConfig:
    partition: str
    store_path: str
    batch_size: int = 16
    drain_batch: int = 16
    shared_queues: bool = True
    persistent_inbox: bool = True
    fsync: str = "always"
    seed: int = 0
    ack_timeout: float = 0.05
    ack_timeout_max: float = 1.0
    max_redelivery: int = 5
    compact_threshold: int = 64 * 1024 * 1024
    partitions: tuple = ()   # placement ring for creates; defaults to itself
    id_block: int = 64

    def __post_init__(self):
        if not 1 <= self.batch_size <= 1024:
            raise ValueError("batch_size must be in 1..1024")


_BOOL_KEYS = {"shared_queues", "persistent_inbox"}
_INT_KEYS = {"batch_size", "drain_batch", "seed", "max_redelivery",
             "compact_threshold", "id_block"}
_FLOAT_KEYS = {"ack_timeout", "ack_timeout_max"}


def parse_host_config(text: str) -> HostConfig:
    """Parse the key=value host configuration format."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in _BOOL_KEYS:
            values[key] = raw.lower() in ("1", "true", "yes", "on")
        elif key in _INT_KEYS:
            values[key] = int(raw)
        elif key in _FLOAT_KEYS:
            values[key] = float(raw)
        elif key == "partitions":
            values[key] = tuple(p.strip() for p in raw.split(",") if p.strip())
        else:
            values[key] = raw
    return HostConfig(**values)


def load_host_config(path) -> HostConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_host_config(fh.read())


# -- field and queue keys -------------------------------------------------------

def _field_key(mid: bytes, name: str) -> bytes:
    raw = name.encode("utf-8")
    return mid + b"\x01" + struct.pack("<I", len(raw)) + raw


def _dict_prefix(mid: bytes, name: str) -> bytes:
    raw = name.encode("utf-8")
    return mid + b"\x02" + struct.pack("<I", len(raw)) + raw


class TxFields:
    """Persistent-field accessor for one machine, bound to one transaction."""

    def __init__(self, fields_map, mid: bytes, mclass: MachineClass, tx):
        self._map = fields_map
        self._mid = mid
        self._mclass = mclass
        self._tx = tx

    def load(self, name: str) -> bytes:
        raw = self._map.get(self._tx, _field_key(self._mid, name))
        return raw if raw is not None else self._mclass.persistent_fields[name]

    def store(self, name: str, value: bytes) -> None:
        self._map.set(self._tx, _field_key(self._mid, name), value)

    def dict_get(self, name: str, key: bytes) -> bytes | None:
        return self._map.get(self._tx, _dict_prefix(self._mid, name) + key)

    def dict_set(self, name: str, key: bytes, value: bytes) -> None:
        self._map.set(self._tx, _dict_prefix(self._mid, name) + key, value)

    def dict_del(self, name: str, key: bytes) -> None:
        self._map.delete(self._tx, _dict_prefix(self._mid, name) + key)

    def dict_items(self, name: str) -> list[tuple[bytes, bytes]]:
        prefix = _dict_prefix(self._mid, name)
        return [(k[len(prefix):], v)
                for k, v in self._map.items(self._tx, prefix=prefix)]


# -- inbox / outbox references ---------------------------------------------------

class SharedQueueRef:
    """One machine's slice of the partition-wide shared queue structure.

    Entries live in a reliable map keyed by (machine id, index); the head and
    tail indices are kept only in memory and advance when the owning
    transaction commits. On failover they are rebuilt by scanning the map;
    a queue that was empty leaves no entries and recovers as the equivalent
    (0, 0) span. Each end has a single accessing thread by construction
    (ingress enqueues inboxes, the handler loop enqueues outboxes; the
    converse for dequeues).
    """

    def __init__(self, backing, mid: bytes, head: int = 0, tail: int = 0):
        self._map = backing
        self._mid = mid
        self._lock = threading.Lock()
        self._head = head
        self._tail = tail

    def _key(self, idx: int) -> bytes:
        return self._mid + struct.pack(">Q", idx)

    def _note(self, tx):
        note = tx.notes.get(id(self))
        if note is None:
            note = {"consumed": 0, "appended": 0}
            tx.notes[id(self)] = note
            tx.on_commit.append(lambda: self._advance(note))
        return note

    def _advance(self, note):
        with self._lock:
            self._head += note["consumed"]
            self._tail += note["appended"]

    def enqueue(self, tx, event: Event) -> None:
        note = self._note(tx)
        with self._lock:
            base = self._tail
        self._map.set(tx, self._key(base + note["appended"]), event.to_bytes())
        note["appended"] += 1

    def peek(self, tx) -> Event | None:
        note = self._note(tx)
        with self._lock:
            head, tail = self._head, self._tail
        idx = head + note["consumed"]
        if idx >= tail:
            return None
        raw = self._map.get(tx, self._key(idx))
        return Event.from_bytes(raw)

    def consume(self, tx) -> None:
        note = self._note(tx)
        with self._lock:
            head = self._head
        self._map.delete(tx, self._key(head + note["consumed"]))
        note["consumed"] += 1

    def next(self, tx):
        ev = self.peek(tx)
        if ev is None:
            return None
        self.consume(tx)
        return ev, None

    def committed_empty(self) -> bool:
        with self._lock:
            return self._head >= self._tail

    def release(self, tx) -> None:
        note = self._note(tx)
        with self._lock:
            head, tail = self._head, self._tail
        for idx in range(head + note["consumed"], tail):
            self._map.delete(tx, self._key(idx))
            note["consumed"] += 1

    @property
    def indices(self) -> tuple[int, int]:
        with self._lock:
            return self._head, self._tail


class DurableQueueRef:
    """Per-machine reliable queue (the unoptimized layout)."""

    def __init__(self, queue):
        self._q = queue

    def enqueue(self, tx, event: Event) -> None:
        self._q.enqueue(tx, event.to_bytes())

    def peek(self, tx) -> Event | None:
        raw = self._q.peek(tx)
        return None if raw is None else Event.from_bytes(raw)

    def consume(self, tx) -> None:
        self._q.try_dequeue(tx)

    def next(self, tx):
        raw = self._q.try_dequeue(tx)
        if raw is None:
            return None
        return Event.from_bytes(raw), None

    def committed_empty(self) -> bool:
        return self._q.committed_length() == 0

    def release(self, tx) -> None:
        while self._q.try_dequeue(tx) is not None:
            pass


class MemoryInbox:
    """Non-persistent inbox: entries wait in memory, the sender's outbox is
    their durability, and acks go out only after processing commits."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries = deque()      # (Event, IngestMeta)
        self._pending: dict[RsmId, int] = {}

    def enqueue_direct(self, event: Event, meta) -> None:
        with self._lock:
            self._entries.append((event, meta))
            self._pending[meta.sender] = self._pending.get(meta.sender, 0) + 1

    def pending_from(self, sender: RsmId) -> int:
        with self._lock:
            return self._pending.get(sender, 0)

    def _note(self, tx):
        note = tx.notes.get(id(self))
        if note is None:
            note = {"consumed": 0}
            tx.notes[id(self)] = note
            tx.on_commit.append(lambda: self._advance(note))
        return note

    def _advance(self, note):
        with self._lock:
            for _ in range(note["consumed"]):
                _, meta = self._entries.popleft()
                self._pending[meta.sender] -= 1

    def next(self, tx):
        note = self._note(tx)
        with self._lock:
            if note["consumed"] >= len(self._entries):
                return None
            ev, meta = self._entries[note["consumed"]]
        note["consumed"] += 1
        return ev, meta

    def committed_empty(self) -> bool:
        with self._lock:
            return not self._entries

    def release(self, tx) -> None:
        note = self._note(tx)
        with self._lock:
            note["consumed"] = len(self._entries)


class MachineRuntimeState:
    """Volatile per-machine runtime record; rebuilt fresh on every failover."""

    def __init__(self, machine_id: RsmId, mclass: MachineClass, inbox, outbox,
                 seed: int):
        self.id = machine_id
        self.id_bytes = machine_id.to_bytes()
        self.mclass = mclass
        self.inbox = inbox
        self.outbox = outbox
        self.volatile = dict(mclass.volatile_fields)
        self.rng = Random(f"{seed}:{machine_id}")
        self.busy = False
        self.halted = False
        self.draining = False
        self.redelivery: dict = {}
        self.input_cv = threading.Condition()
        self.output_cv = threading.Condition()


class MachineHost:
    """Everything one partition runs: store, machines, delivery, tasks."""

    def __init__(self, config: HostConfig, registry: MachineRegistry, net,
                 env_sink=None):
        self.config = config
        self.partition = config.partition
        self.registry = registry
        self.net = net
        self.env_sink = env_sink
        self.on_crash = None        # callable(host), set by the supervisor
        self.store = Store.open(config.store_path, fsync=config.fsync,
                                compact_threshold=config.compact_threshold)
        self.hosted = self.store.map(HOSTED)
        self.state_map = self.store.map(STATE_REGISTERS)
        self.fields_map = self.store.map(FIELDS)
        if config.shared_queues:
            self.inbox_map = self.store.map(SHARED_INBOXES)
            self.outbox_map = self.store.map(SHARED_OUTBOXES)
        self.dead_letters = self.store.queue(DEAD_LETTERS)
        self.delivery = DeliveryService(self)
        self._machines: dict[RsmId, MachineRuntimeState] = {}
        self._lock = threading.RLock()
        self._threads: dict = {}
        self._stop_event = threading.Event()
        self._crash_teardown_started = False
        self._env_mutex = threading.Lock()
        ring = config.partitions or (config.partition,)
        self._placement = itertools.cycle(sorted(ring))
        self._placement_lock = threading.Lock()
        self._env_machine = None

    # -- lifecycle ------------------------------------------------------------

    @classmethod
    def start(cls, config: HostConfig, registry: MachineRegistry, net,
              env_sink=None) -> "MachineHost":
        host = cls(config, registry, net, env_sink)
        host._env_machine = host._make_env_sender()
        host._rehydrate()
        net.attach(host.partition, host.delivery.enqueue_inbound)
        host._spawn("ingress", host.delivery.ingress_loop)
        host._wake_pending_work()
        return host

    @property
    def stopping(self) -> bool:
        return self._stop_event.is_set()

    def stop(self) -> None:
        self._teardown(crashed=False)

    def crash(self) -> None:
        """Simulate a partition failure: volatile state dies, the log stays."""
        self.store.fail()
        self._teardown(crashed=True)

    def on_store_crashed(self) -> None:
        """Called by worker threads that observe a crashed store."""
        with self._lock:
            if self._crash_teardown_started or self.stopping:
                return
            self._crash_teardown_started = True
        threading.Thread(target=self._teardown, kwargs={"crashed": True},
                         name=f"teardown-{self.partition}", daemon=True).start()

    def _teardown(self, crashed: bool) -> None:
        with self._lock:
            if self._crash_teardown_started and not crashed:
                return
            already = self._stop_event.is_set()
            self._crash_teardown_started = True
            self._stop_event.set()
        if already:
            return
        self.net.detach(self.partition)
        self.delivery.enqueue_inbound(b"")      # wake the ingress worker
        with self._lock:
            machines = list(self._machines.values())
            threads = list(self._threads.values())
        for m in machines:
            with m.input_cv:
                m.input_cv.notify_all()
            with m.output_cv:
                m.output_cv.notify_all()
        if self._env_machine is not None:
            with self._env_machine.output_cv:
                self._env_machine.output_cv.notify_all()
        me = threading.current_thread()
        for t in threads:
            if t is not me:
                t.join(timeout=10)
        if not crashed:
            self.store.close()
        if crashed and self.on_crash is not None:
            self.on_crash(self)

    # -- machine table ---------------------------------------------------------

    def _queue_refs(self, machine_id: RsmId, in_idx=(0, 0), out_idx=(0, 0)):
        mid = machine_id.to_bytes()
        if self.config.shared_queues:
            outbox = SharedQueueRef(self.outbox_map, mid, *out_idx)
            if self.config.persistent_inbox:
                inbox = SharedQueueRef(self.inbox_map, mid, *in_idx)
            else:
                inbox = MemoryInbox()
        else:
            outbox = DurableQueueRef(self.store.queue(f"out:{machine_id}"))
            if self.config.persistent_inbox:
                inbox = DurableQueueRef(self.store.queue(f"in:{machine_id}"))
            else:
                inbox = MemoryInbox()
        return inbox, outbox

    def _make_env_sender(self) -> MachineRuntimeState:
        mid = ENV.to_bytes()
        if self.config.shared_queues:
            outbox = SharedQueueRef(self.outbox_map, mid,
                                    *self._scan_shared(SHARED_OUTBOXES).get(ENV, (0, 0)))
        else:
            outbox = DurableQueueRef(self.store.queue("out:env"))
        env_class = MachineClass("environment", "only", {"only": {}})
        return MachineRuntimeState(ENV, env_class, None, outbox, self.config.seed)

    def _scan_shared(self, map_name: str) -> dict[RsmId, tuple[int, int]]:
        if not self.config.shared_queues:
            return {}
        spans: dict[RsmId, tuple[int, int]] = {}
        for key, _ in self.store.map(map_name).items():
            machine_id, off = RsmId.read_from(key, 0)
            (idx,) = struct.unpack_from(">Q", key, off)
            lo, hi = spans.get(machine_id, (idx, idx + 1))
            spans[machine_id] = (min(lo, idx), max(hi, idx + 1))
        return spans

    def _rehydrate(self) -> None:
        in_spans = self._scan_shared(SHARED_INBOXES)
        out_spans = self._scan_shared(SHARED_OUTBOXES)
        for key, raw in self.hosted.items():
            machine_id, _ = RsmId.read_from(key, 0)
            tombstoned = raw.startswith(_TOMB)
            class_name = raw[2:].decode("utf-8")
            try:
                mclass = self.registry.get(class_name)
            except UnknownClassError as exc:
                raise RecoveryError(
                    f"hosted machine {machine_id} has unregistered class "
                    f"{class_name!r}") from exc
            inbox, outbox = self._queue_refs(
                machine_id,
                in_idx=in_spans.get(machine_id, (0, 0)),
                out_idx=out_spans.get(machine_id, (0, 0)))
            if tombstoned and outbox.committed_empty():
                continue   # fully retired
            m = MachineRuntimeState(machine_id, mclass, inbox, outbox,
                                    self.config.seed)
            m.halted = tombstoned
            self._machines[machine_id] = m

    def _wake_pending_work(self) -> None:
        with self._lock:
            machines = list(self._machines.values())
        for m in machines:
            if not m.halted and not m.inbox.committed_empty():
                self.notify_input(m.id)
            if not m.outbox.committed_empty():
                self.notify_output(m.id)
        if not self._env_machine.outbox.committed_empty():
            self.notify_output(ENV)

    def live_machine(self, machine_id: RsmId) -> MachineRuntimeState | None:
        with self._lock:
            return self._machines.get(machine_id)

    def machines(self) -> list[MachineRuntimeState]:
        with self._lock:
            return list(self._machines.values())

    def hosted_status(self, tx, staged, machine_id: RsmId):
        if machine_id in staged:
            return "live", staged[machine_id]
        m = self.live_machine(machine_id)
        if m is not None:
            return ("tombstone" if m.halted else "live"), m
        raw = self.hosted.get(tx, machine_id.to_bytes())
        if raw is None:
            return "absent", None
        return ("tombstone" if raw.startswith(_TOMB) else "live"), None

    # -- creation ---------------------------------------------------------------

    def _fresh_id(self, class_name: str, partition_hint: str | None) -> RsmId:
        if partition_hint is None:
            with self._placement_lock:
                partition_hint = next(self._placement)
        return self.delivery.ids.allocate(partition_hint)

    def create_machine(self, class_name: str) -> RsmId:
        """Deployment entry point: instantiate a machine on this partition."""
        self.registry.get(class_name)   # validate early
        try:
            new_id = self.delivery.ids.allocate(self.partition)
            staged: dict = {}
            tx = self.store.begin()
            self.instantiate_on_create(tx, staged, new_id, class_name)
            tx.commit()
            return new_id
        except StoreCrashedError:
            self.on_store_crashed()
            raise

    def instantiate_on_create(self, tx, staged, new_id: RsmId,
                              class_name: str) -> bool:
        """Create the machine's durable record unless the id is known; a known
        id means a duplicate (or resurrected) request, which is dropped but
        still acknowledged."""
        status, _ = self.hosted_status(tx, staged, new_id)
        if status != "absent":
            return True
        try:
            mclass = self.registry.get(class_name)
        except UnknownClassError:
            self._dead_letter(tx, new_id, Event(new_id, N_CREATE,
                                                class_name.encode("utf-8")),
                              f"unknown machine class {class_name!r}")
            return True
        mid = new_id.to_bytes()
        self.hosted.set(tx, mid, _LIVE + class_name.encode("utf-8"))
        self.state_map.set(tx, mid, mclass.start_state.encode("utf-8"))
        for fname, init in mclass.persistent_fields.items():
            self.fields_map.set(tx, _field_key(mid, fname), init)
        inbox, outbox = self._queue_refs(new_id)
        m = MachineRuntimeState(new_id, mclass, inbox, outbox, self.config.seed)
        staged[new_id] = m
        tx.on_commit.append(lambda: self._activate(m))
        return True

    def _activate(self, m: MachineRuntimeState) -> None:
        with self._lock:
            self._machines.setdefault(m.id, m)

    def ingest_route(self, tx, staged, sender: RsmId, frame) -> bool:
        """Accept one counter-approved frame: instantiate or enqueue.

        Returns False only when the destination id is entirely unknown (its
        creation record has not arrived yet); the frame is then dropped
        without advancing the stream so the sender retries later.
        """
        if frame.event_type == N_CREATE:
            return self.instantiate_on_create(
                tx, staged, frame.dest, frame.payload.decode("utf-8"))
        status, machine = self.hosted_status(tx, staged, frame.dest)
        if status == "absent":
            return False
        if status == "tombstone":
            return True    # delivered-and-dropped; ack keeps the sender moving
        if machine is None:
            machine = self._revive(frame.dest)
        if machine.halted:
            return True
        machine.inbox.enqueue(tx, Event(sender, frame.event_type, frame.payload))
        return True

    def _revive(self, machine_id: RsmId) -> MachineRuntimeState:
        """Rebuild runtime state for a hosted machine that is somehow not in
        the live table; normally everything is revived once at start."""
        log.warning("lazily reviving %s", machine_id)
        raw = self.hosted.committed_get(machine_id.to_bytes())
        mclass = self.registry.get(raw[2:].decode("utf-8"))
        inbox, outbox = self._queue_refs(
            machine_id,
            in_idx=self._scan_shared(SHARED_INBOXES).get(machine_id, (0, 0)),
            out_idx=self._scan_shared(SHARED_OUTBOXES).get(machine_id, (0, 0)))
        m = MachineRuntimeState(machine_id, mclass, inbox, outbox, self.config.seed)
        m.halted = raw.startswith(_TOMB)
        self._activate(m)
        return self.live_machine(machine_id)

    # -- environment --------------------------------------------------------------

    def env_send(self, dest: RsmId, event_type: int, payload: bytes = b"") -> None:
        """Feed one event from the environment into *dest*'s inbox, through
        the regular exact-once path under the reserved env sender."""
        if dest.partition != self.partition:
            raise UnknownDestinationError(
                f"{dest} is not hosted on partition {self.partition!r}; route "
                f"environment input through the destination's own host")
        try:
            with self._env_mutex:
                tx = self.store.begin()
                self._env_machine.outbox.enqueue(tx, Event(dest, event_type, payload))
                tx.commit()
        except StoreCrashedError:
            self.on_store_crashed()
            raise
        self.notify_output(ENV)

    def deliver_to_env(self, source: RsmId, event: Event) -> None:
        if self.env_sink is not None:
            self.env_sink(source, Event(source, event.event_type, event.payload))

    # -- task management -----------------------------------------------------------

    def _spawn(self, name: str, target) -> None:
        with self._lock:
            existing = self._threads.get(name)
            if existing is not None and existing.is_alive():
                return
            t = threading.Thread(target=self._guarded, args=(target,),
                                 name=f"{self.partition}:{name}", daemon=True)
            self._threads[name] = t
            t.start()

    def _guarded(self, target) -> None:
        try:
            target()
        except (StoreCrashedError, HostStoppedError):
            self.on_store_crashed()
        except Exception:
            if not self.stopping:
                log.exception("worker failed on partition %s", self.partition)

    def notify_input(self, machine_id: RsmId) -> None:
        m = self.live_machine(machine_id)
        if m is None or m.halted or self.stopping:
            return
        self._spawn(f"loop:{machine_id}", lambda: self._machine_loop(m))
        with m.input_cv:
            m.input_cv.notify_all()

    def notify_output(self, machine_id: RsmId) -> None:
        m = self._env_machine if machine_id == ENV else self.live_machine(machine_id)
        if m is None or self.stopping:
            return
        self._spawn(f"drain:{machine_id}", lambda: self._drain_loop(m))
        with m.output_cv:
            m.output_cv.notify_all()

    def _machine_loop(self, m: MachineRuntimeState) -> None:
        while not self.stopping and not m.halted:
            if not self.event_loop_step(m):
                with m.input_cv:
                    if self.stopping or m.halted:
                        return
                    if m.inbox.committed_empty():
                        m.input_cv.wait(timeout=0.5)

    def _drain_loop(self, m: MachineRuntimeState) -> None:
        while not self.stopping:
            m.draining = True
            try:
                progressed = self.delivery.drain_step(m)
            finally:
                m.draining = False
            if not progressed:
                if m.halted:
                    return   # retired machine fully drained
                with m.output_cv:
                    if self.stopping:
                        return
                    if m.outbox.committed_empty():
                        m.output_cv.wait(timeout=0.5)

    # -- the event-handling loop ------------------------------------------------------

    def event_loop_step(self, m: MachineRuntimeState) -> bool:
        """Process up to ``batch_size`` inbox events under one transaction.

        Returns False when the inbox is empty (the caller parks until the
        ingestion path wakes it). A handler exception aborts the whole batch,
        leaving every event in place for redelivery; an event that keeps
        failing is moved to the dead-letter queue instead of being retried
        forever.
        """
        tx = self.store.begin()
        consumed_meta = []
        outputs = 0
        halted = False
        current = None
        try:
            nxt = m.inbox.next(tx)
            if nxt is None:
                tx.abort()
                return False
            raw_state = self.state_map.get(tx, m.id_bytes)
            state = raw_state.decode("utf-8") if raw_state else m.mclass.start_state
            state0 = state
            while nxt is not None:
                event, meta = nxt
                current = event
                fingerprint = (event.source, event.event_type, event.payload)
                if m.redelivery.get(fingerprint, 0) >= self.config.max_redelivery:
                    self._dead_letter(tx, m.id, event, "handler failed repeatedly")
                    m.redelivery.pop(fingerprint, None)
                else:
                    handler = m.mclass.handler_for(state, event.event_type)
                    if handler is None:
                        self._dead_letter(
                            tx, m.id, event,
                            f"no handler for type {event.event_type} in "
                            f"state {state!r}")
                    else:
                        ctx = HandlerContext(
                            m.id, m.mclass, event,
                            TxFields(self.fields_map, m.id_bytes, m.mclass, tx),
                            m.volatile, m.rng, self._fresh_id, self.registry)
                        m.busy = True
                        try:
                            handler(ctx, event)
                        finally:
                            m.busy = False
                            ctx.close()
                        for out in ctx.output_buffer:
                            m.outbox.enqueue(tx, out)
                        outputs += len(ctx.output_buffer)
                        if ctx.pending_state is not None:
                            state = ctx.pending_state
                        halted = ctx.halt_requested
                if meta is not None:
                    self.delivery.counters.set_recv(tx, m.id, meta.sender,
                                                    meta.seq + 1)
                consumed_meta.append(meta)
                if halted or len(consumed_meta) >= self.config.batch_size:
                    break
                nxt = m.inbox.next(tx)
            if state != state0:
                self.state_map.set(tx, m.id_bytes, state.encode("utf-8"))
            if halted:
                self.hosted.set(tx, m.id_bytes,
                                _TOMB + m.mclass.name.encode("utf-8"))
                m.inbox.release(tx)
            tx.commit()
        except (StoreCrashedError, HostStoppedError):
            raise
        except Exception:
            tx.abort()
            if current is not None:
                fp = (current.source, current.event_type, current.payload)
                m.redelivery[fp] = m.redelivery.get(fp, 0) + 1
                log.warning("handler fault on %s (attempt %d)", m.id,
                            m.redelivery[fp], exc_info=True)
            return True
        m.redelivery.clear()
        if halted:
            m.halted = True
            with m.input_cv:
                m.input_cv.notify_all()
        if outputs:
            self.notify_output(m.id)
        if any(meta is not None for meta in consumed_meta):
            self.delivery.send_processing_acks(m.id, consumed_meta)
        return True

    def _dead_letter(self, tx, machine_id: RsmId, event: Event, reason: str) -> None:
        raw_reason = reason.encode("utf-8")
        record = (machine_id.to_bytes()
                  + struct.pack("<I", len(raw_reason)) + raw_reason
                  + event.to_bytes())
        self.dead_letters.enqueue(tx, record)
        log.warning("dead-lettering event on %s: %s", machine_id, reason)

    # -- introspection -------------------------------------------------------------

    def current_state(self, machine_id: RsmId) -> str | None:
        raw = self.state_map.committed_get(machine_id.to_bytes())
        return raw.decode("utf-8") if raw else None

    def read_field(self, machine_id: RsmId, name: str) -> bytes | None:
        m = self.live_machine(machine_id)
        raw = self.fields_map.committed_get(_field_key(machine_id.to_bytes(), name))
        if raw is None and m is not None:
            raw = m.mclass.persistent_fields.get(name)
        return raw

    def read_dict(self, machine_id: RsmId, name: str) -> dict[bytes, bytes]:
        prefix = _dict_prefix(machine_id.to_bytes(), name)
        return {k[len(prefix):]: v
                for k, v in self.fields_map.items(prefix=prefix)}

    def idle(self) -> bool:
        """No running handler, no queued work, nothing mid-drain."""
        if self.stopping:
            return False
        if not self.delivery.inbound_idle():
            return False
        with self._lock:
            machines = list(self._machines.values()) + [self._env_machine]
        for m in machines:
            if m.busy or m.draining:
                return False
            if m.inbox is not None and not m.halted and not m.inbox.committed_empty():
                return False
            if not m.outbox.committed_empty():
                return False
        return True
