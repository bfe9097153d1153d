"""Fixed-size link cells and the relay payload framing carried inside them.

Cell layout (512 bytes, big-endian)::

    circuit_id  4
    command     1
    length      2
    payload   505   zero padded past ``length``

Relay payload layout (fills a cell payload, 505 bytes)::

    recognized     2
    stream_id      2
    digest         4
    data_length    2
    relay_command  1
    data         494   zero padded past ``data_length``
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

CELL_SIZE = 512
CELL_HEADER = struct.Struct("!IBH")
CELL_PAYLOAD_SIZE = CELL_SIZE - CELL_HEADER.size  # 505

RELAY_HEADER = struct.Struct("!HH4sHB")
RELAY_DATA_SIZE = CELL_PAYLOAD_SIZE - RELAY_HEADER.size  # 494
DIGEST_OFFSET = 4
DIGEST_SIZE = 4


class CellError(ValueError):
    """Base class for wire format errors."""


class CellSizeError(CellError):
    pass


class UnknownCommandError(CellError):
    pass


class PaddingError(CellError):
    pass


class LengthError(CellError):
    pass


class Command(enum.IntEnum):
    CREATE = 1
    CREATED = 2
    DESTROY = 3
    RELAY = 4


class RelayCommand(enum.IntEnum):
    EXTEND = 1
    EXTENDED = 2
    BEGIN = 3
    CONNECTED = 4
    DATA = 5
    END = 6


@dataclass(frozen=True)
class Cell:
    circuit_id: int
    command: Command
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class RelayPayload:
    relay_command: RelayCommand
    data: bytes = b""
    stream_id: int = 0
    recognized: int = 0
    digest: bytes = b"\x00\x00\x00\x00"

    @property
    def data_length(self) -> int:
        return len(self.data)


def encode_cell(cell: Cell) -> bytes:
    if len(cell.payload) > CELL_PAYLOAD_SIZE:
        raise LengthError(f"cell payload is {len(cell.payload)} bytes, limit {CELL_PAYLOAD_SIZE}")
    if not 0 <= cell.circuit_id <= 0xFFFFFFFF:
        raise CellError(f"circuit id out of range: {cell.circuit_id}")
    header = CELL_HEADER.pack(cell.circuit_id, int(cell.command), len(cell.payload))
    return header + cell.payload.ljust(CELL_PAYLOAD_SIZE, b"\x00")


def decode_cell(buf: bytes) -> Cell:
    if len(buf) != CELL_SIZE:
        raise CellSizeError(f"cell must be {CELL_SIZE} bytes, got {len(buf)}")
    circuit_id, command, length = CELL_HEADER.unpack_from(buf)
    try:
        command = Command(command)
    except ValueError:
        raise UnknownCommandError(f"unknown cell command {command}") from None
    if length > CELL_PAYLOAD_SIZE:
        raise LengthError(f"cell length field {length} exceeds {CELL_PAYLOAD_SIZE}")
    start = CELL_HEADER.size
    return Cell(circuit_id, command, bytes(buf[start:start + length]))


def encode_relay_payload(rp: RelayPayload) -> bytes:
    if len(rp.data) > RELAY_DATA_SIZE:
        raise LengthError(f"relay data is {len(rp.data)} bytes, limit {RELAY_DATA_SIZE}")
    if len(rp.digest) != DIGEST_SIZE:
        raise CellError("relay digest must be 4 bytes")
    header = RELAY_HEADER.pack(
        rp.recognized, rp.stream_id, rp.digest, len(rp.data), int(rp.relay_command)
    )
    return header + rp.data.ljust(RELAY_DATA_SIZE, b"\x00")


def decode_relay_payload(buf: bytes) -> RelayPayload:
    if len(buf) != CELL_PAYLOAD_SIZE:
        raise CellSizeError(f"relay payload must be {CELL_PAYLOAD_SIZE} bytes, got {len(buf)}")
    recognized, stream_id, digest, data_length, command = RELAY_HEADER.unpack_from(buf)
    if data_length > RELAY_DATA_SIZE:
        raise LengthError(f"relay data_length {data_length} exceeds {RELAY_DATA_SIZE}")
    try:
        command = RelayCommand(command)
    except ValueError:
        raise UnknownCommandError(f"unknown relay command {command}") from None
    start = RELAY_HEADER.size
    if any(buf[start + data_length:]):
        raise PaddingError("nonzero bytes after relay data")
    return RelayPayload(
        relay_command=command,
        data=bytes(buf[start:start + data_length]),
        stream_id=stream_id,
        recognized=recognized,
        digest=bytes(digest),
    )


def peek_recognized(buf: bytes) -> int:
    """Read the recognized field of a (possibly still encrypted) relay payload."""
    return int.from_bytes(buf[:2], "big")


def chunk(data: bytes, size: int = RELAY_DATA_SIZE) -> list[bytes]:
    return [data[i:i + size] for i in range(0, len(data), size)]


class CellReader:
    """Reassembles back-to-back cells from an arbitrary chunking of a byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= CELL_SIZE:
            out.append(bytes(self._buf[:CELL_SIZE]))
            del self._buf[:CELL_SIZE]
        return out


def encode_extend(address: str, handshake: bytes) -> bytes:
    """EXTEND data: 1-byte address length, ASCII ``host:port``, then the CREATE handshake."""
    addr = address.encode("ascii")
    if len(addr) > 255:
        raise CellError("extend address too long")
    return bytes([len(addr)]) + addr + handshake


def decode_extend(data: bytes) -> tuple[str, bytes]:
    if not data:
        raise CellError("empty extend data")
    n = data[0]
    if len(data) < 1 + n:
        raise CellError("truncated extend address")
    return data[1:1 + n].decode("ascii"), data[1 + n:]
