"""Multi-partition harness: hosts, restart-on-crash supervision, quiescence.

This is how tests, benchmarks, and the CLI stand up a running system: pick
partition names, point each at a store file, wire them to one transport,
and optionally inject a crash every N-th durable commit anywhere in the
cluster (alternating between failing just before and just after the log
append, which exercises both redelivery and recovery). Crashed hosts are
restarted automatically from their logs.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import replace

from .errors import RsmError
from .model import RsmId
from .network import RECV_COUNTERS, SEND_COUNTERS
from .runtime import HostConfig, MachineHost
from .transport import InProcessTransport


class CrashSchedule:
    """Crash the committing host on every *every*-th durable commit."""

    def __init__(self, every: int, limit: int | None = None):
        self.every = every
        self.limit = limit
        self._count = 0
        self._crashes = 0
        self._lock = threading.Lock()

    def hook_for(self, host_ref: dict):
        def hook(_ordinal, _ops):
            with self._lock:
                self._count += 1
                if self._count % self.every != 0:
                    return None
                if self.limit is not None and self._crashes >= self.limit:
                    return None
                self._crashes += 1
                return "pre" if self._crashes % 2 else "post"
        return hook

    @property
    def crashes(self) -> int:
        with self._lock:
            return self._crashes


class Cluster:
    """A set of hosts sharing one transport and one machine registry."""

    def __init__(self, partitions, registry, base_dir, *, net=None,
                 env_sink=None, crash_every: int | None = None,
                 crash_limit: int | None = None, **config_overrides):
        self.partition_names = list(partitions)
        self.registry = registry
        self.base_dir = os.fspath(base_dir)
        self.net = net if net is not None else InProcessTransport()
        self.env_sink = env_sink
        self.crash_schedule = (CrashSchedule(crash_every, crash_limit)
                               if crash_every else None)
        self._overrides = config_overrides
        self._hosts: dict[str, MachineHost] = {}
        self._lock = threading.RLock()
        self._ready = threading.Condition(self._lock)
        self._stopping = False
        self.restarts = 0

    def config_for(self, partition: str) -> HostConfig:
        cfg = HostConfig(
            partition=partition,
            store_path=os.path.join(self.base_dir, f"{partition}.log"),
            partitions=tuple(self.partition_names),
        )
        return replace(cfg, **self._overrides)

    def start(self) -> "Cluster":
        os.makedirs(self.base_dir, exist_ok=True)
        for partition in self.partition_names:
            self._start_host(partition)
        return self

    def _start_host(self, partition: str) -> MachineHost:
        host = MachineHost.start(self.config_for(partition), self.registry,
                                 self.net, env_sink=self.env_sink)
        if self.crash_schedule is not None:
            host.store.crash_hook = self.crash_schedule.hook_for({})
        host.on_crash = self._on_host_crash
        with self._lock:
            self._hosts[partition] = host
            self._ready.notify_all()
        return host

    def _on_host_crash(self, host: MachineHost) -> None:
        with self._lock:
            if self._stopping:
                return
            self._hosts.pop(host.partition, None)
            self.restarts += 1
        self._start_host(host.partition)

    def host(self, partition: str, timeout: float = 30.0) -> MachineHost:
        """The running host for *partition*, waiting out any restart."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while True:
                host = self._hosts.get(partition)
                if host is not None and not host.stopping:
                    return host
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RsmError(f"host {partition!r} did not come up")
                self._ready.wait(remaining)

    def hosts(self) -> list[MachineHost]:
        with self._lock:
            return [h for h in self._hosts.values() if not h.stopping]

    # -- convenience entry points ---------------------------------------------

    def create_machine(self, class_name: str, partition: str | None = None) -> RsmId:
        partition = partition or self.partition_names[0]
        while True:
            try:
                return self.host(partition).create_machine(class_name)
            except RsmError:
                time.sleep(0.01)   # host crashed mid-call; retry on its successor

    def env_send(self, dest: RsmId, event_type: int, payload: bytes = b"") -> None:
        """Environment input, routed through the destination's own host so
        each destination sees a single env counter stream."""
        while True:
            try:
                self.host(dest.partition).env_send(dest, event_type, payload)
                return
            except RsmError:
                time.sleep(0.01)

    # -- quiescence and checks ---------------------------------------------------

    def quiescent(self) -> bool:
        # Packets still held inside a lossy transport are necessarily
        # duplicates or acknowledgements once every drain is confirmed, so
        # they cannot change committed state and do not block quiescence.
        with self._lock:
            if len(self._hosts) != len(self.partition_names):
                return False
            hosts = list(self._hosts.values())
        return all(h.idle() for h in hosts)

    def await_quiescence(self, timeout: float = 60.0, settle: int = 3) -> None:
        """Block until the whole cluster is idle for *settle* consecutive polls."""
        deadline = time.monotonic() + timeout
        streak = 0
        while time.monotonic() < deadline:
            if self.quiescent():
                streak += 1
                if streak >= settle:
                    return
            else:
                streak = 0
            time.sleep(0.02)
        raise RsmError("cluster did not quiesce in time")

    def counter_pairs(self) -> dict[tuple[RsmId, RsmId], tuple[int, int]]:
        """(sender, receiver) -> (send counter at sender, receive counter at
        receiver); the two must match at quiescence."""
        pairs: dict[tuple[RsmId, RsmId], tuple[int, int]] = {}
        recv_tables = {}
        for host in self.hosts():
            recv_tables[host.partition] = dict(
                host.store.map(RECV_COUNTERS).items())
        for host in self.hosts():
            for key, raw in host.store.map(SEND_COUNTERS).items():
                sender, off = RsmId.read_from(key, 0)
                receiver, _ = RsmId.read_from(key, off)
                sent = struct.unpack("<Q", raw)[0]
                recv_raw = recv_tables.get(receiver.partition, {}).get(
                    receiver.to_bytes() + sender.to_bytes())
                received = struct.unpack("<Q", recv_raw)[0] if recv_raw else 0
                pairs[(sender, receiver)] = (sent, received)
        return pairs

    def stop(self) -> None:
        with self._lock:
            self._stopping = True
            hosts = list(self._hosts.values())
            self._hosts.clear()
        for host in hosts:
            host.stop()
        self.net.stop()
