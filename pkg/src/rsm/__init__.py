"""Reliable state machines: actors with exact-once processing and delivery."""

from .errors import RsmError
from .model import (
    ENV,
    Event,
    HandlerContext,
    MachineClass,
    MachineRegistry,
    N_CREATE,
    PayloadReader,
    RsmId,
    decode_int,
    decode_str,
    encode_id,
    encode_int,
    encode_str,
)
from .cluster import Cluster
from .runtime import HostConfig, MachineHost, load_host_config, parse_host_config
from .storage import Store

__all__ = [
    "Cluster",
    "ENV",
    "Event",
    "HandlerContext",
    "HostConfig",
    "MachineClass",
    "MachineHost",
    "MachineRegistry",
    "N_CREATE",
    "PayloadReader",
    "RsmError",
    "RsmId",
    "Store",
    "decode_int",
    "decode_str",
    "encode_id",
    "encode_int",
    "encode_str",
    "load_host_config",
    "parse_host_config",
]
