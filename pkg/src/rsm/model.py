"""Core domain model: machine identities, events, machine classes, and the
handler-facing context.

A reliable state machine (RSM) is declared as a :class:`MachineClass`: a set
of named states, an event-type -> handler table per state, and two disjoint
groups of fields. Persistent fields survive crashes and are read/written
through the handler's transaction; volatile fields live in memory and are
reset to their declared initial values whenever the hosting partition fails
over. Handlers communicate only through the context object passed to them:
sends and creates are buffered and become visible to the rest of the system
atomically with the commit of the handler's transaction.

Payloads are opaque byte strings. The reference codec is little-endian for
integers and length-prefixed UTF-8 for text; see :func:`encode_int` and
friends.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterable, Mapping

from .errors import (
    ContextClosedError,
    UnknownClassError,
    UnknownFieldError,
    UnknownStateError,
)

# Reserved event-type tag for machine-creation records. The payload of a
# creation record is the UTF-8 class name of the machine to instantiate.
N_CREATE = 0xFFFFFFFF


@dataclass(frozen=True, order=True)
class RsmId:
    """Globally unique machine identity: hosting partition plus a counter.

    Ids are totally ordered (partition first, then counter) so ties can be
    broken deterministically.
    """

    partition: str
    counter: int

    def to_bytes(self) -> bytes:
        raw = self.partition.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", self.counter)

    @staticmethod
    def read_from(buf: bytes, off: int) -> tuple["RsmId", int]:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (counter,) = struct.unpack_from("<Q", buf, off)
        return RsmId(name, counter), off + 8

    def __str__(self) -> str:
        return f"{self.partition}/{self.counter}"


# The environment is addressed as a distinguished machine id.
ENV = RsmId("env", 0)


@dataclass(frozen=True)
class Event:
    """One message: a (machine id, event-type tag, payload) triple.

    Events are the element type of inboxes, outboxes, and traces. For inbox
    entries the id slot holds the *source* of the event; for outbox and trace
    entries it holds the *destination* (the two queues are symmetric, and the
    remaining endpoint is always the owning machine).
    """

    source: RsmId
    event_type: int
    payload: bytes = b""

    @property
    def is_create(self) -> bool:
        return self.event_type == N_CREATE

    def to_bytes(self) -> bytes:
        return (self.source.to_bytes()
                + struct.pack("<II", self.event_type, len(self.payload))
                + self.payload)

    @staticmethod
    def from_bytes(buf: bytes) -> "Event":
        src, off = RsmId.read_from(buf, 0)
        ev_type, plen = struct.unpack_from("<II", buf, off)
        off += 8
        return Event(src, ev_type, buf[off:off + plen])


Handler = Callable[["HandlerContext", Event], None]


@dataclass(frozen=True)
class MachineClass:
    """Declaration of a machine: states, handlers, and field initial values.

    ``states`` maps a state name to the event-type -> handler table active in
    that state. ``persistent_fields`` are register-like (one payload each);
    ``persistent_dicts`` are per-key durable dictionaries, initially empty.
    Persistent and volatile field names must not overlap.
    """

    name: str
    start_state: str
    states: Mapping[str, Mapping[int, Handler]]
    persistent_fields: Mapping[str, bytes] = field(default_factory=dict)
    persistent_dicts: frozenset = frozenset()
    volatile_fields: Mapping[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if self.start_state not in self.states:
            raise UnknownStateError(
                f"start state {self.start_state!r} not declared in {self.name}")
        if set(self.persistent_fields) & set(self.persistent_dicts):
            raise UnknownFieldError(
                f"register and dictionary fields overlap in {self.name}")
        persistent = set(self.persistent_fields) | set(self.persistent_dicts)
        overlap = persistent & set(self.volatile_fields)
        if overlap:
            raise UnknownFieldError(
                f"fields declared both persistent and volatile in {self.name}: "
                f"{sorted(overlap)}")

    def handler_for(self, state: str, event_type: int) -> Handler | None:
        table = self.states.get(state)
        if table is None:
            raise UnknownStateError(f"{self.name} has no state {state!r}")
        return table.get(event_type)


class MachineRegistry:
    """Name -> :class:`MachineClass` table; the program signature."""

    def __init__(self, classes: Iterable[MachineClass] = ()):
        self._classes: dict[str, MachineClass] = {}
        for cls in classes:
            self.register(cls)

    def register(self, cls: MachineClass) -> MachineClass:
        self._classes[cls.name] = cls
        return cls

    def get(self, name: str) -> MachineClass:
        try:
            return self._classes[name]
        except KeyError:
            raise UnknownClassError(f"machine class {name!r} is not registered") from None

    def __contains__(self, name: str) -> bool:
        return name in self._classes

    def names(self) -> list[str]:
        return sorted(self._classes)


class VolatileView:
    """Mapping over a machine's volatile fields; names are validated."""

    def __init__(self, declared: Mapping[str, bytes], values: dict):
        self._declared = declared
        self._values = values

    def _check(self, name):
        if name not in self._declared:
            raise UnknownFieldError(f"unknown volatile field {name!r}")

    def __getitem__(self, name: str) -> bytes:
        self._check(name)
        return self._values[name]

    def __setitem__(self, name: str, value: bytes) -> None:
        self._check(name)
        self._values[name] = value


class HandlerContext:
    """Everything a handler may touch while processing one event.

    The context is confined to a single handler execution. Persistent reads
    and writes all route through one transaction (supplied by the hosting
    engine as ``fields``); buffered sends and creates become visible only if
    that transaction commits. Nondeterminism must go through :attr:`rng` so
    the testkit can record and replay choices.
    """

    def __init__(self, self_id: RsmId, mclass: MachineClass, event: Event,
                 fields, volatile: dict, rng: Random,
                 fresh_id: Callable[[str, str | None], RsmId],
                 registry: MachineRegistry):
        self.self_id = self_id
        self.event = event
        self.rng = rng
        self.volatile = VolatileView(mclass.volatile_fields, volatile)
        self.output_buffer: list[Event] = []
        self._mclass = mclass
        self._fields = fields
        self._fresh_id = fresh_id
        self._registry = registry
        self._pending_state: str | None = None
        self._halted = False
        self._closed = False

    # -- lifecycle ---------------------------------------------------------

    def close(self):
        self._closed = True

    def _live(self):
        if self._closed:
            raise ContextClosedError("handler context used after completion")

    @property
    def pending_state(self) -> str | None:
        return self._pending_state

    @property
    def halt_requested(self) -> bool:
        return self._halted

    # -- persistent fields ---------------------------------------------------

    def _check_register(self, name):
        if name not in self._mclass.persistent_fields:
            if name in self._mclass.volatile_fields:
                raise UnknownFieldError(
                    f"{name!r} is volatile; use ctx.volatile, not load/store")
            raise UnknownFieldError(f"unknown persistent field {name!r}")

    def _check_dict(self, name):
        if name not in self._mclass.persistent_dicts:
            raise UnknownFieldError(f"unknown persistent dictionary {name!r}")

    def load(self, name: str) -> bytes:
        self._live()
        self._check_register(name)
        return self._fields.load(name)

    def store(self, name: str, payload: bytes) -> None:
        self._live()
        self._check_register(name)
        self._fields.store(name, payload)

    def dict_get(self, name: str, key: bytes) -> bytes | None:
        self._live()
        self._check_dict(name)
        return self._fields.dict_get(name, key)

    def dict_set(self, name: str, key: bytes, value: bytes) -> None:
        self._live()
        self._check_dict(name)
        self._fields.dict_set(name, key, value)

    def dict_del(self, name: str, key: bytes) -> None:
        self._live()
        self._check_dict(name)
        self._fields.dict_del(name, key)

    def dict_items(self, name: str) -> list[tuple[bytes, bytes]]:
        self._live()
        self._check_dict(name)
        return self._fields.dict_items(name)

    # -- communication -------------------------------------------------------

    def send(self, dest: RsmId, event_type: int, payload: bytes = b"") -> None:
        """Buffer an event for *dest*; nothing goes on the network here."""
        self._live()
        self.output_buffer.append(Event(dest, event_type, payload))

    def create(self, class_name: str, partition: str | None = None) -> RsmId:
        """Allocate a fresh id and buffer a creation record for it.

        The machine does not exist until the record commits and is delivered;
        ids allocated by handlers that never commit are simply lost. Placement
        defaults to round-robin over the known partitions; *partition* pins it.
        """
        self._live()
        if class_name not in self._registry:
            raise UnknownClassError(f"machine class {class_name!r} is not registered")
        new_id = self._fresh_id(class_name, partition)
        self.output_buffer.append(Event(new_id, N_CREATE, class_name.encode("utf-8")))
        return new_id

    # -- control -------------------------------------------------------------

    def jump(self, state: str) -> None:
        """Move to *state* for subsequent events; durable at commit."""
        self._live()
        if state not in self._mclass.states:
            raise UnknownStateError(f"{self._mclass.name} has no state {state!r}")
        self._pending_state = state

    def halt(self) -> None:
        """Retire this machine once the current transaction commits."""
        self._live()
        self._halted = True


# -- reference payload codec --------------------------------------------------

def encode_int(n: int) -> bytes:
    return struct.pack("<q", n)


def decode_int(payload: bytes, off: int = 0) -> int:
    return struct.unpack_from("<q", payload, off)[0]


def encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def decode_str(payload: bytes, off: int = 0) -> str:
    (n,) = struct.unpack_from("<I", payload, off)
    return payload[off + 4:off + 4 + n].decode("utf-8")


def encode_id(rsm_id: RsmId) -> bytes:
    return rsm_id.to_bytes()


class PayloadReader:
    """Sequential decoder for payloads built by concatenating codec fields."""

    def __init__(self, payload: bytes):
        self._buf = payload
        self._off = 0

    def int(self) -> int:
        v = decode_int(self._buf, self._off)
        self._off += 8
        return v

    def str(self) -> str:
        (n,) = struct.unpack_from("<I", self._buf, self._off)
        s = self._buf[self._off + 4:self._off + 4 + n].decode("utf-8")
        self._off += 4 + n
        return s

    def id(self) -> RsmId:
        v, self._off = RsmId.read_from(self._buf, self._off)
        return v
