"""Binary framing of federation messages.

Frame layout (little-endian)::

    magic   4 bytes  b"FFL1"
    kind    u8       1=INIT 2=GLOBAL_WEIGHTS 3=CLIENT_UPDATE 4=STOP
    round   u32
    length  u32      payload size in bytes
    payload

Weight blocks are a u32 count followed by that many f64 values in canonical
flatten order. CLIENT_UPDATE appends n_train (u64) and the validation loss
(f64). INIT carries a canonical JSON document.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError

MAGIC = b"FFL1"
HEADER = struct.Struct("<4sBII")
HEADER_SIZE = HEADER.size
_COUNT = struct.Struct("<I")
_TAIL = struct.Struct("<Qd")
MAX_PAYLOAD = 1 << 30


class Kind(enum.IntEnum):
    INIT = 1
    GLOBAL_WEIGHTS = 2
    CLIENT_UPDATE = 3
    STOP = 4


# the only keys an INIT document may carry; none of them can hold SCADA rows
INIT_KEYS = frozenset({"architecture", "hyperparameters", "client_id", "session"})


@dataclass(frozen=True, eq=False)
class RoundMessage:
    kind: Kind
    round: int
    config: dict | None = None
    weights: np.ndarray | None = None
    n_train: int | None = None
    val_loss: float | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundMessage):
            return NotImplemented
        if (self.kind, self.round, self.config, self.n_train) != (other.kind, other.round, other.config, other.n_train):
            return False
        if (self.val_loss is None) != (other.val_loss is None):
            return False
        if self.val_loss is not None and struct.pack("<d", self.val_loss) != struct.pack("<d", other.val_loss):
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        return self.weights is None or np.array_equal(
            np.asarray(self.weights, np.float64).view(np.uint64), np.asarray(other.weights, np.float64).view(np.uint64)
        )

    __hash__ = None

    @classmethod
    def init(cls, config: dict, round: int = 0) -> "RoundMessage":
        return cls(Kind.INIT, round, config=config)

    @classmethod
    def global_weights(cls, round: int, weights) -> "RoundMessage":
        return cls(Kind.GLOBAL_WEIGHTS, round, weights=np.asarray(weights, np.float64))

    @classmethod
    def client_update(cls, round: int, weights, n_train: int, val_loss: float) -> "RoundMessage":
        return cls(Kind.CLIENT_UPDATE, round, weights=np.asarray(weights, np.float64),
                   n_train=int(n_train), val_loss=float(val_loss))

    @classmethod
    def stop(cls, round: int, weights) -> "RoundMessage":
        return cls(Kind.STOP, round, weights=np.asarray(weights, np.float64))


def canonical_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _weights_block(weights) -> bytes:
    w = np.ascontiguousarray(weights, dtype="<f8").reshape(-1)
    return _COUNT.pack(w.size) + w.tobytes()


def encode(msg: RoundMessage) -> bytes:
    if not 0 <= msg.round < 2**32:
        raise ProtocolError(f"round {msg.round} out of u32 range", field="round")
    kind = Kind(msg.kind)
    if kind is Kind.INIT:
        if msg.config is None:
            raise ProtocolError("INIT requires a config document", field="payload")
        extra = set(msg.config) - INIT_KEYS
        if extra:
            raise ProtocolError(f"INIT document has unexpected keys {sorted(extra)}", field="payload")
        payload = canonical_json(msg.config)
    else:
        if msg.weights is None:
            raise ProtocolError(f"{kind.name} requires weights", field="payload")
        payload = _weights_block(msg.weights)
        if kind is Kind.CLIENT_UPDATE:
            if msg.n_train is None or msg.val_loss is None:
                raise ProtocolError("CLIENT_UPDATE requires n_train and val_loss", field="payload")
            payload += _TAIL.pack(msg.n_train, msg.val_loss)
    return HEADER.pack(MAGIC, int(kind), msg.round, len(payload)) + payload


def decode_header(header: bytes) -> tuple[Kind, int, int]:
    """Validate a frame header; returns (kind, round, payload length)."""
    if len(header) < HEADER_SIZE:
        raise ProtocolError(f"truncated header ({len(header)} of {HEADER_SIZE} bytes)", field="header")
    magic, kind, rnd, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", field="magic")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}", field="kind") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} too large", field="payload_len")
    return kind, rnd, length


def _read_weights(payload: bytes) -> tuple[np.ndarray, int]:
    if len(payload) < _COUNT.size:
        raise ProtocolError("weight block missing count", field="count")
    (count,) = _COUNT.unpack_from(payload)
    end = _COUNT.size + 8 * count
    if len(payload) < end:
        raise ProtocolError(f"weight block declares {count} values but payload is short", field="count")
    return np.frombuffer(payload, dtype="<f8", count=count, offset=_COUNT.size).astype(np.float64), end


def decode_payload(kind: Kind, rnd: int, payload: bytes) -> RoundMessage:
    if kind is Kind.INIT:
        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"INIT payload is not JSON: {exc}", field="payload") from exc
        if not isinstance(doc, dict):
            raise ProtocolError("INIT payload must be a JSON object", field="payload")
        return RoundMessage(kind, rnd, config=doc)
    weights, end = _read_weights(payload)
    if kind is Kind.CLIENT_UPDATE:
        if len(payload) != end + _TAIL.size:
            raise ProtocolError("CLIENT_UPDATE payload length mismatch", field="payload_len")
        n_train, val_loss = _TAIL.unpack_from(payload, end)
        return RoundMessage(kind, rnd, weights=weights, n_train=n_train, val_loss=val_loss)
    if len(payload) != end:
        raise ProtocolError(f"{kind.name} payload length mismatch", field="payload_len")
    return RoundMessage(kind, rnd, weights=weights)


def decode(frame: bytes) -> RoundMessage:
    kind, rnd, length = decode_header(frame[:HEADER_SIZE])
    payload = frame[HEADER_SIZE:]
    if len(payload) < length:
        raise ProtocolError(f"truncated payload ({len(payload)} of {length} bytes)", field="payload")
    if len(payload) > length:
        raise ProtocolError(f"{len(payload) - length} trailing bytes after payload", field="payload_len")
    return decode_payload(kind, rnd, bytes(payload))


def payload_fields(msg: RoundMessage) -> set[str]:
    """Names of the data fields a decoded message carries (for privacy audits)."""
    fields = {"kind", "round"}
    for name in ("config", "weights", "n_train", "val_loss"):
        if getattr(msg, name) is not None:
            fields.add(name)
    return fields

