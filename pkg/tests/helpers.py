"""Shared test fixtures: small machine classes and an environment recorder."""

import threading

from rsm.model import (
    ENV,
    Event,
    MachineClass,
    MachineRegistry,
    PayloadReader,
    decode_int,
    encode_int,
    encode_str,
)

ET_ADD = 1        # payload: (tag int, amount int)
ET_EMIT = 2       # ask the recorder to report its sum to env
ET_SPAWN = 3      # payload: class name; create a machine, report its id
ET_JUMP = 4       # move to the "other" state
ET_HALT = 5
ET_FAIL = 6       # handler raises
ET_PING = 7
ET_NOTE = 8       # generic env notification


def _recorder_add(ctx, event):
    r = PayloadReader(event.payload)
    tag, amount = r.int(), r.int()
    ctx.store("sum", encode_int(decode_int(ctx.load("sum")) + amount))
    seen = ctx.dict_get("seen", encode_int(tag))
    ctx.dict_set("seen", encode_int(tag),
                 encode_int((decode_int(seen) if seen else 0) + 1))
    ctx.volatile["since_restart"] = encode_int(
        decode_int(ctx.volatile["since_restart"]) + 1)


def _recorder_emit(ctx, event):
    ctx.send(ENV, ET_NOTE, ctx.load("sum"))


def _recorder_spawn(ctx, event):
    new_id = ctx.create(decode_str(event.payload) if event.payload else "Recorder")
    ctx.send(ENV, ET_NOTE, new_id.to_bytes())


def decode_str(payload):
    from rsm.model import decode_str as d
    return d(payload)


def _recorder_jump(ctx, event):
    ctx.jump("other")


def _recorder_halt(ctx, event):
    ctx.halt()


def _recorder_fail(ctx, event):
    raise RuntimeError("injected handler failure")


def _other_ping(ctx, event):
    ctx.send(ENV, ET_NOTE, b"other")


RECORDER = MachineClass(
    name="Recorder",
    start_state="main",
    states={
        "main": {
            ET_ADD: _recorder_add,
            ET_EMIT: _recorder_emit,
            ET_SPAWN: _recorder_spawn,
            ET_JUMP: _recorder_jump,
            ET_HALT: _recorder_halt,
            ET_FAIL: _recorder_fail,
        },
        "other": {ET_PING: _other_ping},
    },
    persistent_fields={"sum": encode_int(0)},
    persistent_dicts=frozenset({"seen"}),
    volatile_fields={"since_restart": encode_int(0)},
)


def _forward(ctx, event):
    # payload: destination id then the original (tag, amount) payload
    r = PayloadReader(event.payload)
    dest = r.id()
    rest = event.payload[len(dest.to_bytes()):]
    ctx.send(dest, ET_ADD, rest)


FORWARDER = MachineClass(
    name="Forwarder",
    start_state="main",
    states={"main": {ET_ADD: _forward}},
)


def registry():
    return MachineRegistry([RECORDER, FORWARDER])


class EnvRecorder:
    """Thread-safe sink for environment-addressed events."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[tuple] = []

    def __call__(self, source, event: Event):
        with self._lock:
            self.events.append((source, event.event_type, event.payload))

    def payloads(self, event_type=ET_NOTE):
        with self._lock:
            return [p for _, t, p in self.events if t == event_type]


def add_payload(tag: int, amount: int) -> bytes:
    return encode_int(tag) + encode_int(amount)
