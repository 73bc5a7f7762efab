"""Party identities, message kinds and the binary frame format.

Frame layout (all integers little-endian)::

    magic      4 bytes  b"SLPM"
    version    u8
    kind       u8
    sender     u8 role, i32 gs_index (-1 if none), i32 client_index (-1 if none)
    receiver   same as sender
    epoch      u32
    batch      u32
    count      u32      number of tensors
    per tensor:
      name     u16 length + UTF-8 bytes
      rank     u8
      dims     rank x u32
      payload  prod(dims) x float64
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import ProtocolError, VersionError

MAGIC = b"SLPM"
VERSION = 1


class Role(IntEnum):
    CLIENT = 1
    GRID_STATION = 2
    SERVICE_PROVIDER = 3


class MessageKind(IntEnum):
    SPLIT1_WEIGHTS = 1
    ACTIVATIONS = 2
    PREDICTIONS = 3
    LOSS_GRADIENTS = 4
    ACTIVATION_GRADIENTS = 5
    CONTROL_SYNC = 6


@dataclass(frozen=True, order=True)
class PartyId:
    role: Role
    gs_index: int | None = None
    client_index: int | None = None

    def __post_init__(self):
        if self.role == Role.CLIENT and (self.gs_index is None or self.client_index is None):
            raise ProtocolError("a client id needs both gs_index and client_index")
        if self.role == Role.GRID_STATION and (self.gs_index is None or self.client_index is not None):
            raise ProtocolError("a grid-station id carries gs_index only")
        if self.role == Role.SERVICE_PROVIDER and (self.gs_index is not None or self.client_index is not None):
            raise ProtocolError("the service provider carries no indices")

    @classmethod
    def client(cls, gs: int, k: int) -> "PartyId":
        return cls(Role.CLIENT, gs, k)

    @classmethod
    def grid_station(cls, gs: int) -> "PartyId":
        return cls(Role.GRID_STATION, gs)

    @classmethod
    def provider(cls) -> "PartyId":
        return cls(Role.SERVICE_PROVIDER)

    def __str__(self) -> str:
        if self.role == Role.CLIENT:
            return f"client(gs={self.gs_index}, k={self.client_index})"
        if self.role == Role.GRID_STATION:
            return f"gs({self.gs_index})"
        return "sp"


ACTIVATION_TENSORS = ("enc_out", "dec_seasonal", "dec_trend")
GRADIENT_TENSORS = tuple(f"grad_{n}" for n in ACTIVATION_TENSORS)

# names each kind may carry; weights use prefixes
_ALLOWED = {
    MessageKind.ACTIVATIONS: set(ACTIVATION_TENSORS),
    MessageKind.PREDICTIONS: {"prediction"},
    MessageKind.LOSS_GRADIENTS: {"loss_grad"},
    MessageKind.ACTIVATION_GRADIENTS: set(GRADIENT_TENSORS),
    MessageKind.CONTROL_SYNC: {"control"},
}
_WEIGHT_PREFIXES = ("param/", "modes/")


def payload_allowed(kind: MessageKind, name: str) -> bool:
    if kind == MessageKind.SPLIT1_WEIGHTS:
        return name.startswith(_WEIGHT_PREFIXES)
    return name in _ALLOWED[kind]


@dataclass
class PartyMessage:
    kind: MessageKind
    sender: PartyId
    receiver: PartyId
    epoch: int = 0
    batch: int = 0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            if not payload_allowed(self.kind, name):
                raise ProtocolError(f"{self.kind.name} message may not carry tensor {name!r}")
        if self.kind == MessageKind.ACTIVATIONS and set(self.tensors) != set(ACTIVATION_TENSORS):
            raise ProtocolError("activations must carry exactly enc_out, dec_seasonal, dec_trend")


_HEAD = struct.Struct("<4sBB")
_PARTY = struct.Struct("<Bii")
_TAIL = struct.Struct("<III")


def _pack_party(p: PartyId) -> bytes:
    return _PARTY.pack(
        int(p.role),
        -1 if p.gs_index is None else p.gs_index,
        -1 if p.client_index is None else p.client_index,
    )


def _unpack_party(buf: bytes, off: int) -> tuple[PartyId, int]:
    role, gs, k = _PARTY.unpack_from(buf, off)
    return PartyId(Role(role), None if gs < 0 else gs, None if k < 0 else k), off + _PARTY.size


def encode_frame(msg: PartyMessage) -> bytes:
    parts = [
        _HEAD.pack(MAGIC, VERSION, int(msg.kind)),
        _pack_party(msg.sender),
        _pack_party(msg.receiver),
        _TAIL.pack(msg.epoch, msg.batch, len(msg.tensors)),
    ]
    for name, arr in msg.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_frame(frame: bytes) -> PartyMessage:
    try:
        magic, version, kind = _HEAD.unpack_from(frame, 0)
    except struct.error:
        raise ProtocolError("truncated frame header") from None
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"frame version {version}, expected {VERSION}")
    off = _HEAD.size
    tensors: dict[str, np.ndarray] = {}
    try:
        kind = MessageKind(kind)
        sender, off = _unpack_party(frame, off)
        receiver, off = _unpack_party(frame, off)
        epoch, batch, count = _TAIL.unpack_from(frame, off)
        off += _TAIL.size
        for _ in range(count):
            (n,) = struct.unpack_from("<H", frame, off)
            off += 2
            name = frame[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", frame, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", frame, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(frame, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError):
        raise ProtocolError("truncated or malformed frame") from None
    if off != len(frame):
        raise ProtocolError(f"{len(frame) - off} trailing bytes after frame")
    return PartyMessage(kind, sender, receiver, epoch, batch, tensors)


# socket transport: length-prefixed frames --------------------------------------------
def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(struct.pack("<Q", len(frame)) + frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ProtocolError("socket closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack("<Q", _recv_exact(sock, 8))
    return _recv_exact(sock, n)
