"""In-process transport and the message audit hook.

Every message is serialised to a wire frame before delivery, so parties only
ever see what would cross a network.  The audit hook sees each frame first.
"""

from __future__ import annotations

import hashlib
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError
from .messages import MessageKind, PartyId, PartyMessage, decode_frame, encode_frame, payload_allowed


def array_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return hashlib.sha256(repr(arr.shape).encode() + arr.tobytes()).hexdigest()


@dataclass
class MessageAudit:
    """Records every frame and flags payloads that match registered raw data.

    Clients register digests of their raw inputs and targets; any payload
    tensor with an identical digest is a leak.  Tensor names are also checked
    against the per-kind whitelist.
    """

    records: list[tuple[MessageKind, str, str, tuple[str, ...], int]] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    bytes_by_kind: dict[MessageKind, int] = field(default_factory=lambda: defaultdict(int))
    _forbidden: set[str] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def forbid(self, *arrays: np.ndarray) -> None:
        with self._lock:
            for a in arrays:
                self._forbidden.add(array_digest(a))

    def __call__(self, frame: bytes, msg: PartyMessage) -> None:
        problems = []
        for name, arr in msg.tensors.items():
            if not payload_allowed(msg.kind, name):
                problems.append(f"{msg.kind.name} from {msg.sender} carries non-whitelisted {name!r}")
            if array_digest(arr) in self._forbidden:
                problems.append(f"{msg.kind.name} from {msg.sender} carries raw client data in {name!r}")
        with self._lock:
            self.records.append(
                (msg.kind, str(msg.sender), str(msg.receiver), tuple(msg.tensors), len(frame))
            )
            self.bytes_by_kind[msg.kind] += len(frame)
            self.violations.extend(problems)

    @property
    def clean(self) -> bool:
        return not self.violations


class InProcessBus:
    """Mailboxes keyed by receiver; ``recv`` waits for a specific kind and sender."""

    def __init__(self, audit: MessageAudit | None = None, timeout: float = 30.0):
        self.audit = audit
        self.timeout = timeout
        self._boxes: dict[PartyId, deque[PartyMessage]] = defaultdict(deque)
        self._cond = threading.Condition()

    def send(self, msg: PartyMessage) -> None:
        frame = encode_frame(msg)
        if self.audit is not None:
            self.audit(frame, msg)
        delivered = decode_frame(frame)
        with self._cond:
            self._boxes[msg.receiver].append(delivered)
            self._cond.notify_all()

    def recv(
        self, receiver: PartyId, kind: MessageKind, sender: PartyId, timeout: float | None = None
    ) -> PartyMessage:
        limit = self.timeout if timeout is None else timeout
        deadline = time.monotonic() + limit
        with self._cond:
            while True:
                box = self._boxes[receiver]
                for i, m in enumerate(box):
                    if m.kind == kind and m.sender == sender:
                        del box[i]
                        return m
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ProtocolError(
                        f"round aborted: {receiver} got no {kind.name} from {sender} within {limit:g}s"
                    )
                self._cond.wait(remaining)

    def pending(self) -> int:
        with self._cond:
            return sum(len(b) for b in self._boxes.values())
