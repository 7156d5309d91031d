"""Wire frames for inter-partition traffic.

Frame layout (little-endian):

    [u32 length][u8 kind][sender id][u64 seq][dest id][u32 event type]
    [u32 payload len][payload][u32 CRC32C]

where an id is ``[u32 partition-name len][name bytes][u64 counter]``,
``length`` counts everything after itself, and the CRC covers all preceding
bytes of the frame. Kind 0 is a message, kind 1 an acknowledgement whose
``seq`` carries the receiver's committed cursor (number of accepted messages
from ``dest``; everything below it is confirmed). Kinds 2/3 are the id-block
allocation request/response used when a machine is placed on a remote
partition.

A packet is a plain concatenation of frames; frames are self-delimiting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .checksum import crc32c
from .model import RsmId

KIND_MSG = 0
KIND_ACK = 1
KIND_ALLOC_REQ = 2
KIND_ALLOC_RESP = 3


@dataclass(frozen=True)
class Frame:
    kind: int
    sender: RsmId
    seq: int
    dest: RsmId
    event_type: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    body = (struct.pack("<B", frame.kind)
            + frame.sender.to_bytes()
            + struct.pack("<Q", frame.seq)
            + frame.dest.to_bytes()
            + struct.pack("<II", frame.event_type, len(frame.payload))
            + frame.payload)
    head = struct.pack("<I", len(body) + 4)
    return head + body + struct.pack("<I", crc32c(head + body))


def encode_packet(frames) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


def decode_packet(buf: bytes) -> tuple[list[Frame], int]:
    """All frames in *buf*; returns (frames, malformed_byte_count).

    A frame that is truncated or fails its checksum poisons the rest of the
    packet (framing is lost), so decoding stops there.
    """
    frames = []
    off = 0
    n = len(buf)
    while off + 4 <= n:
        (length,) = struct.unpack_from("<I", buf, off)
        end = off + 4 + length
        if length < 5 or end > n:
            break
        if struct.unpack_from("<I", buf, end - 4)[0] != crc32c(buf[off:end - 4]):
            break
        pos = off + 4
        kind = buf[pos]
        pos += 1
        try:
            sender, pos = RsmId.read_from(buf, pos)
            (seq,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dest, pos = RsmId.read_from(buf, pos)
            event_type, plen = struct.unpack_from("<II", buf, pos)
            pos += 8
            payload = bytes(buf[pos:pos + plen])
            if pos + plen != end - 4:
                break
        except (struct.error, UnicodeDecodeError):
            break
        frames.append(Frame(kind, sender, seq, dest, event_type, payload))
        off = end
    return frames, n - off
