"""Exact-once delivery between machines.

A sender's outbox-draining task and a receiver's input-ingestion task
cooperate over an unreliable transport:

* drain: under one transaction, dequeue a run of outbox entries bound for
  the same destination partition, stamp each with the next value of the
  durable per-(sender, receiver) send counter, then retransmit the packet
  until acknowledged, and only then commit. A crash before the commit
  re-sends with the *same* sequence numbers, which is what makes duplicates
  detectable.
* ingest: under one transaction per packet, accept exactly the frames whose
  sequence number equals the committed receive counter for that sender,
  bump the counter, and route the body (inbox enqueue, or machine
  instantiation for creation records). Anything else is a duplicate or a
  reordered future frame and is dropped.

Acknowledgements are stateless: an ack carries the receiver's committed
cursor, so a lost or duplicated ack is harmless, and an ack can never
confirm a message whose effects did not commit. With the non-persistent
inbox enabled, accepted messages are only buffered in memory and the cursor
(hence the ack) advances when the *processing* transaction commits, so the
sender keeps the message durably until then.

Events addressed to the environment id are handed to the host's registered
sink while draining instead of entering the counter protocol.
"""

from __future__ import annotations

import itertools
import logging
import struct
import threading

from .errors import HostStoppedError, StoreCrashedError
from .model import ENV, Event, N_CREATE, RsmId
from .wire import (
    Frame,
    KIND_ACK,
    KIND_ALLOC_REQ,
    KIND_ALLOC_RESP,
    KIND_MSG,
    decode_packet,
    encode_packet,
)

log = logging.getLogger(__name__)

SEND_COUNTERS = "sendctr"
RECV_COUNTERS = "recvctr"
META = "meta"
_ID_COUNTER_KEY = b"idctr"


def _pair_key(owner: RsmId, peer: RsmId) -> bytes:
    return owner.to_bytes() + peer.to_bytes()


class CounterTables:
    """Durable SendCounter / ReceiveCounter maps, keyed by (owner, peer)."""

    def __init__(self, store):
        self.send = store.map(SEND_COUNTERS)
        self.recv = store.map(RECV_COUNTERS)

    @staticmethod
    def _decode(raw):
        return 0 if raw is None else struct.unpack("<Q", raw)[0]

    def next_send(self, tx, owner: RsmId, peer: RsmId) -> int:
        key = _pair_key(owner, peer)
        c = self._decode(self.send.get(tx, key))
        self.send.set(tx, key, struct.pack("<Q", c + 1))
        return c

    def get_recv(self, tx, owner: RsmId, peer: RsmId) -> int:
        return self._decode(self.recv.get(tx, _pair_key(owner, peer)))

    def committed_recv(self, owner: RsmId, peer: RsmId) -> int:
        return self._decode(self.recv.committed_get(_pair_key(owner, peer)))

    def set_recv(self, tx, owner: RsmId, peer: RsmId, value: int) -> None:
        self.recv.set(tx, _pair_key(owner, peer), struct.pack("<Q", value))


class AckTable:
    """In-memory confirmed cursors per (sender machine, peer machine)."""

    def __init__(self):
        self._cv = threading.Condition()
        self._cursors: dict[bytes, int] = {}

    def on_ack(self, owner: RsmId, peer: RsmId, cursor: int) -> None:
        key = _pair_key(owner, peer)
        with self._cv:
            if cursor > self._cursors.get(key, 0):
                self._cursors[key] = cursor
            self._cv.notify_all()

    def confirmed(self, owner: RsmId, needed: dict[RsmId, int]) -> bool:
        return all(self._cursors.get(_pair_key(owner, p), 0) >= c
                   for p, c in needed.items())

    def snapshot(self, owner: RsmId, needed: dict[RsmId, int]) -> tuple:
        with self._cv:
            return tuple(self._cursors.get(_pair_key(owner, p), 0)
                         for p in needed)

    def wait(self, owner: RsmId, needed: dict[RsmId, int], timeout: float) -> bool:
        with self._cv:
            return self._cv.wait_for(lambda: self.confirmed(owner, needed), timeout)


class IdAllocator:
    """Hands out globally unique ids from durable per-partition counters.

    Ids are reserved eagerly in blocks, outside any handler transaction, so
    an id given to a handler that never commits is lost forever rather than
    reused. Remote partitions are asked for a block over the wire.
    """

    def __init__(self, host, block_size: int = 64):
        self.host = host
        self.block_size = block_size
        self._blocks: dict[str, list[int]] = {}
        self._lock = threading.Lock()
        self._reserve_mutex = threading.Lock()
        self._nonce = itertools.count(1)
        self._responses: dict[int, tuple[int, int]] = {}
        self._cv = threading.Condition()

    def allocate(self, partition: str) -> RsmId:
        with self._lock:
            block = self._blocks.get(partition)
            if block:
                return RsmId(partition, block.pop(0))
        start, count = self._reserve(partition)
        with self._lock:
            block = self._blocks.setdefault(partition, [])
            block.extend(range(start, start + count))
            return RsmId(partition, block.pop(0))

    def _reserve(self, partition: str) -> tuple[int, int]:
        if partition == self.host.partition:
            return self.reserve_local(self.block_size)
        return self._reserve_remote(partition)

    def reserve_local(self, count: int) -> tuple[int, int]:
        # serialized so two refills cannot read the same counter value
        with self._reserve_mutex:
            store = self.host.store
            meta = store.map(META)
            tx = store.begin()
            raw = meta.get(tx, _ID_COUNTER_KEY)
            start = struct.unpack("<Q", raw)[0] if raw else 1
            meta.set(tx, _ID_COUNTER_KEY, struct.pack("<Q", start + count))
            tx.commit()
            return start, count

    def _reserve_remote(self, partition: str) -> tuple[int, int]:
        nonce = next(self._nonce)
        frame = Frame(KIND_ALLOC_REQ, RsmId(self.host.partition, 0), nonce,
                      RsmId(partition, 0), self.block_size)
        deadline_step = 0.2
        while True:
            if self.host.stopping:
                raise HostStoppedError("host stopping during id allocation")
            self.host.net.send(partition, encode_packet([frame]))
            with self._cv:
                self._cv.wait_for(lambda: nonce in self._responses, deadline_step)
                if nonce in self._responses:
                    return self._responses.pop(nonce)

    def on_response(self, frame: Frame) -> None:
        start, count = struct.unpack("<QI", frame.payload)
        with self._cv:
            self._responses[frame.seq] = (start, count)
            self._cv.notify_all()

    def serve_request(self, frame: Frame) -> None:
        start, count = self.reserve_local(frame.event_type or self.block_size)
        resp = Frame(KIND_ALLOC_RESP, RsmId(self.host.partition, 0), frame.seq,
                     frame.sender, 0, struct.pack("<QI", start, count))
        self.host.net.send(frame.sender.partition, encode_packet([resp]))


class DeliveryService:
    """Per-host networking: ingress worker, drain protocol, acks, id blocks."""

    def __init__(self, host):
        self.host = host
        self.counters = CounterTables(host.store)
        self.acks = AckTable()
        self.ids = IdAllocator(host)
        self._inbound: list[bytes] = []
        self._inbound_cv = threading.Condition()
        self.stats = {"packets_in": 0, "frames_dropped": 0, "malformed": 0,
                      "retransmits": 0}

    # -- inbound path ---------------------------------------------------------

    def enqueue_inbound(self, data: bytes) -> None:
        """Transport delivery callback; never blocks, never raises."""
        with self._inbound_cv:
            self._inbound.append(data)
            self._inbound_cv.notify()

    def inbound_idle(self) -> bool:
        with self._inbound_cv:
            return not self._inbound

    def ingress_loop(self) -> None:
        while True:
            with self._inbound_cv:
                self._inbound_cv.wait_for(
                    lambda: self._inbound or self.host.stopping, timeout=1.0)
                if self.host.stopping:
                    return
                if not self._inbound:
                    continue
                data = self._inbound.pop(0)
            try:
                self.process_packet(data)
            except (StoreCrashedError, HostStoppedError):
                self.host.on_store_crashed()
                return

    def process_packet(self, data: bytes) -> None:
        frames, bad = decode_packet(data)
        if bad:
            self.stats["malformed"] += 1
            log.warning("dropping %d malformed trailing bytes", bad)
        self.stats["packets_in"] += 1
        msgs = []
        for f in frames:
            if f.kind == KIND_ACK:
                self.acks.on_ack(owner=f.dest, peer=f.sender, cursor=f.seq)
            elif f.kind == KIND_ALLOC_REQ:
                self.ids.serve_request(f)
            elif f.kind == KIND_ALLOC_RESP:
                self.ids.on_response(f)
            elif f.kind == KIND_MSG:
                msgs.append(f)
        if msgs:
            self.ingest(msgs, self._transport_ack_sink)

    def _transport_ack_sink(self, ack_frames: list[Frame]) -> None:
        """Acks for local senders (and the environment, whose drain always
        runs on the destination host) go straight to our table; the rest go
        back over the wire to the sender's partition."""
        remote: dict[str, list[Frame]] = {}
        for ack in ack_frames:
            owner_partition = ack.dest.partition
            if owner_partition in (self.host.partition, ENV.partition):
                self.acks.on_ack(owner=ack.dest, peer=ack.sender, cursor=ack.seq)
            else:
                remote.setdefault(owner_partition, []).append(ack)
        for partition, group in remote.items():
            self.host.net.send(partition, encode_packet(group))

    def send_processing_acks(self, machine_id: RsmId, metas) -> None:
        """Deferred acks for the non-persistent inbox: called after the
        transaction that processed the buffered messages has committed."""
        remote: dict[str, list[Frame]] = {}
        seen: set[RsmId] = set()
        for meta in metas:
            if meta is None or meta.sender in seen:
                continue
            seen.add(meta.sender)
            cursor = self.counters.committed_recv(machine_id, meta.sender)
            ack = Frame(KIND_ACK, machine_id, cursor, meta.sender, 0)
            if meta.ack_partition is None:
                self.acks.on_ack(owner=ack.dest, peer=ack.sender, cursor=ack.seq)
            else:
                remote.setdefault(meta.ack_partition, []).append(ack)
        for partition, group in remote.items():
            self.host.net.send(partition, encode_packet(group))

    def ingest(self, frames: list[Frame], ack_sink) -> None:
        """Process one packet's message frames under a single transaction."""
        host = self.host
        persistent_inbox = host.config.persistent_inbox
        tx = host.store.begin()
        staged: dict[RsmId, object] = {}
        pairs: set[tuple[RsmId, RsmId]] = set()   # (dest machine, sender)
        buffered: list[tuple] = []                # memory-inbox entries
        added: dict[tuple[RsmId, RsmId], int] = {}  # buffered in this packet
        notify: set[RsmId] = set()
        try:
            for f in frames:
                dest, sender = f.dest, f.sender
                if dest.partition != host.partition:
                    self.stats["frames_dropped"] += 1
                    continue
                pairs.add((dest, sender))
                if persistent_inbox or f.event_type == N_CREATE:
                    cur = self.counters.get_recv(tx, dest, sender)
                    if f.seq != cur:
                        continue  # duplicate (covered by ack) or future (retry)
                    accepted = host.ingest_route(tx, staged, sender, f)
                    if accepted:
                        self.counters.set_recv(tx, dest, sender, cur + 1)
                        notify.add(dest)
                else:
                    self._ingest_nonpersistent(tx, staged, f, buffered, added)
            tx.commit()
        except Exception:
            if tx.state == "open":
                tx.abort()
            raise
        for machine, event, meta in buffered:
            machine.inbox.enqueue_direct(event, meta)
            notify.add(machine.id)
        for dest in notify:
            host.notify_input(dest)
        if pairs:
            acks = [Frame(KIND_ACK, dest, self.counters.committed_recv(dest, sender),
                          sender, 0)
                    for dest, sender in sorted(pairs)]
            ack_sink(acks)

    def _ingest_nonpersistent(self, tx, staged, f: Frame, buffered, added) -> None:
        """Buffer a plain message in memory; the cursor (and therefore the
        ack) advances only when the processing transaction commits."""
        host = self.host
        dest, sender = f.dest, f.sender
        status, machine = host.hosted_status(tx, staged, dest)
        if status == "absent":
            return  # creation not delivered yet; sender keeps retrying
        if status == "tombstone" or (machine is not None and machine.halted):
            # accept-and-drop keeps the sender's stream moving
            cur = self.counters.get_recv(tx, dest, sender)
            if f.seq == cur:
                self.counters.set_recv(tx, dest, sender, cur + 1)
            return
        if machine is None:
            return  # staged this packet; its inbox joins after commit
        expected = (self.counters.committed_recv(dest, sender)
                    + machine.inbox.pending_from(sender)
                    + added.get((dest, sender), 0))
        if f.seq != expected:
            return
        event = Event(sender, f.event_type, f.payload)
        meta = IngestMeta(sender, f.seq, self._route_for(sender))
        buffered.append((machine, event, meta))
        added[(dest, sender)] = added.get((dest, sender), 0) + 1

    def _route_for(self, sender: RsmId):
        if sender.partition == self.host.partition or sender == ENV:
            return None  # ack locally
        return sender.partition

    # -- outbound path --------------------------------------------------------

    def drain_step(self, machine) -> bool:
        """Move one same-destination run of outbox entries; exact-once."""
        host = self.host
        tx = host.store.begin()
        try:
            head = machine.outbox.peek(tx)
            if head is None:
                tx.abort()
                return False
            dest_partition = head.source.partition   # outbox slot = destination
            batch = []
            while len(batch) < host.config.drain_batch:
                ev = machine.outbox.peek(tx)
                if ev is None or ev.source.partition != dest_partition:
                    break
                machine.outbox.consume(tx)
                batch.append(ev)
            if dest_partition == ENV.partition:
                for ev in batch:
                    host.deliver_to_env(machine.id, ev)
                tx.commit()
                return True
            frames = []
            needed: dict[RsmId, int] = {}
            for ev in batch:
                seq = self.counters.next_send(tx, machine.id, ev.source)
                frames.append(Frame(KIND_MSG, machine.id, seq, ev.source,
                                    ev.event_type, ev.payload))
                needed[ev.source] = seq + 1
            packet = encode_packet(frames)
            if dest_partition == host.partition:
                # loop back through the ingress worker so inbox tails keep a
                # single enqueueing thread; acks land in our own table
                self.enqueue_inbound(packet)
                self._await_acks(machine.id, needed)
            else:
                self._send_until_acked(machine.id, dest_partition, packet, needed)
            tx.commit()
            return True
        except Exception:
            if tx.state == "open":
                tx.abort()
            raise

    def _await_acks(self, owner: RsmId, needed: dict[RsmId, int]) -> None:
        while not self.acks.wait(owner, needed, 0.05):
            if self.host.stopping:
                raise HostStoppedError("host stopping during drain")

    def _send_until_acked(self, owner: RsmId, dest_partition: str,
                          packet: bytes, needed: dict[RsmId, int]) -> None:
        base = self.host.config.ack_timeout
        timeout = base
        last_progress = self.acks.snapshot(owner, needed)
        while True:
            if self.host.stopping:
                raise HostStoppedError("host stopping during drain")
            self.host.net.send(dest_partition, packet)
            if self.acks.wait(owner, needed, timeout):
                return
            self.stats["retransmits"] += 1
            progress = self.acks.snapshot(owner, needed)
            if progress != last_progress:
                last_progress = progress
                timeout = base          # the link is alive; back off only on silence
            else:
                timeout = min(timeout * 2, self.host.config.ack_timeout_max)


class IngestMeta:
    """Where an in-memory inbox entry came from; drives the deferred ack."""

    __slots__ = ("sender", "seq", "ack_partition")

    def __init__(self, sender: RsmId, seq: int, ack_partition: str | None):
        self.sender = sender
        self.seq = seq
        self.ack_partition = ack_partition
