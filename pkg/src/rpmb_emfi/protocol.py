"""RPMB data frames: layout, codec and MAC computation.

The 512-byte frame follows the usual JEDEC layout (the same one used by
mmc-utils and the Linux kernel)::

    0..195    stuff
    196..227  key / MAC
    228..483  data
    484..499  nonce
    500..503  write counter   (big-endian u32)
    504..505  address         (big-endian u16, 256-byte half-sector index)
    506..507  block count
    508..509  result
    510..511  request / response type

The MAC covers bytes 228..511 of every frame of a request; the host
concatenates the covered regions and places a single HMAC-SHA256 in the
key/MAC field of the last frame.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import hmac
import struct
from typing import Iterable, Sequence

FRAME_SIZE = 512
BLOCK_SIZE = 256
STUFF_SIZE = 196
MAC_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 16

KEY_MAC_OFFSET = 196
DATA_OFFSET = 228
NONCE_OFFSET = 484
COUNTER_OFFSET = 500
ADDRESS_OFFSET = 504
BLOCK_COUNT_OFFSET = 506
RESULT_OFFSET = 508
REQ_RESP_OFFSET = 510

MAC_COVERED_OFFSET = DATA_OFFSET
MAC_COVERED_SIZE = FRAME_SIZE - MAC_COVERED_OFFSET  # 284

COUNTER_EXPIRED_FLAG = 0x80

_LAYOUT = struct.Struct(">196s32s256s16sIHHHH")
assert _LAYOUT.size == FRAME_SIZE


class FrameError(ValueError):
    """Malformed RPMB frame or request."""


class WrongLength(FrameError):
    pass


class BadBlockSize(FrameError):
    pass


class UnknownRequestType(FrameError):
    pass


class RequestType(enum.IntEnum):
    PROGRAM_KEY = 0x0001
    READ_COUNTER = 0x0002
    AUTH_WRITE = 0x0003
    AUTH_READ = 0x0004
    RESULT_READ = 0x0005

    PROGRAM_KEY_RESPONSE = 0x0100
    READ_COUNTER_RESPONSE = 0x0200
    AUTH_WRITE_RESPONSE = 0x0300
    AUTH_READ_RESPONSE = 0x0400
    RESULT_READ_RESPONSE = 0x0500

    @property
    def is_request(self) -> bool:
        return self.value < 0x0100

    @property
    def response(self) -> RequestType:
        if not self.is_request:
            raise ValueError(f"{self.name} is already a response type")
        return RequestType(self.value << 8)


class ResultCode(enum.IntEnum):
    """Operation result, low 7 bits of the result field.

    Codes outside the modelled set still round-trip: ``ResultCode(0x05)``
    yields an ``UNKNOWN_0x0005`` pseudo-member carrying the raw value.
    """

    OPERATION_OK = 0x00
    GENERAL_FAILURE = 0x01
    AUTH_FAILURE = 0x02
    COUNTER_FAILURE = 0x03
    ADDRESS_FAILURE = 0x04
    NO_KEY = 0x07

    @classmethod
    def _missing_(cls, value):
        if not isinstance(value, int) or not 0 <= value <= 0xFFFF:
            return None
        member = int.__new__(cls, value)
        member._name_ = f"UNKNOWN_{value:#06x}"
        member._value_ = value
        return member

    @property
    def is_known(self) -> bool:
        return self._name_ in type(self).__members__

    @property
    def label(self) -> str:
        return _LABELS.get(self._name_, f"Unknown({self.value:#04x})")

    @classmethod
    def from_raw(cls, raw: int) -> tuple[ResultCode, bool]:
        """Split a raw 16-bit result field into (code, counter_expired)."""
        return cls(raw & ~COUNTER_EXPIRED_FLAG & 0xFFFF), bool(raw & COUNTER_EXPIRED_FLAG)

    def __str__(self) -> str:
        return f"{self.label} ({self.value:#04x})"


_LABELS = {
    "OPERATION_OK": "OperationOk",
    "GENERAL_FAILURE": "GeneralFailure",
    "AUTH_FAILURE": "AuthFailure",
    "COUNTER_FAILURE": "CounterFailure",
    "ADDRESS_FAILURE": "AddressFailure",
    "NO_KEY": "NoKey",
}


def check_key(key: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_SIZE:
        raise FrameError(f"RPMB key must be {KEY_SIZE} bytes")
    return bytes(key)


@dataclasses.dataclass(frozen=True)
class RpmbFrame:
    stuff: bytes = bytes(STUFF_SIZE)
    key_mac: bytes = bytes(MAC_SIZE)
    data: bytes = bytes(BLOCK_SIZE)
    nonce: bytes = bytes(NONCE_SIZE)
    write_counter: int = 0
    address: int = 0
    block_count: int = 0
    result: int = 0
    req_resp: int = 0

    def __post_init__(self):
        for name, size in (("stuff", STUFF_SIZE), ("key_mac", MAC_SIZE),
                           ("data", BLOCK_SIZE), ("nonce", NONCE_SIZE)):
            value = getattr(self, name)
            if len(value) != size:
                raise FrameError(f"{name} must be {size} bytes, got {len(value)}")
            if not isinstance(value, bytes):
                object.__setattr__(self, name, bytes(value))
        if not 0 <= self.write_counter <= 0xFFFFFFFF:
            raise FrameError("write_counter out of u32 range")
        for name in ("address", "block_count", "result", "req_resp"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise FrameError(f"{name} out of u16 range")
        try:
            object.__setattr__(self, "req_resp", RequestType(self.req_resp))
        except ValueError:
            pass

    @property
    def request_type(self) -> RequestType | None:
        return self.req_resp if isinstance(self.req_resp, RequestType) else None

    @property
    def result_code(self) -> ResultCode:
        return ResultCode.from_raw(self.result)[0]

    @property
    def counter_expired(self) -> bool:
        return bool(self.result & COUNTER_EXPIRED_FLAG)

    def mac_region(self) -> bytes:
        return serialize_frame(self)[MAC_COVERED_OFFSET:]

    def replace(self, **changes) -> RpmbFrame:
        return dataclasses.replace(self, **changes)

    def __bytes__(self) -> bytes:
        return serialize_frame(self)


def serialize_frame(frame: RpmbFrame) -> bytes:
    return _LAYOUT.pack(frame.stuff, frame.key_mac, frame.data, frame.nonce,
                        frame.write_counter, frame.address, frame.block_count,
                        frame.result, int(frame.req_resp))


def parse_frame(raw: bytes, strict: bool = True) -> RpmbFrame:
    """Decode one 512-byte frame.

    With ``strict`` an unknown request/response code raises
    :class:`UnknownRequestType`; otherwise the raw integer is kept in
    ``req_resp``.
    """
    if len(raw) != FRAME_SIZE:
        raise WrongLength(f"RPMB frame must be {FRAME_SIZE} bytes, got {len(raw)}")
    stuff, key_mac, data, nonce, counter, address, count, result, req = _LAYOUT.unpack(bytes(raw))
    if strict:
        try:
            RequestType(req)
        except ValueError:
            raise UnknownRequestType(f"unknown request/response code {req:#06x}") from None
    return RpmbFrame(stuff, key_mac, data, nonce, counter, address, count, result, req)


def parse_frames(raw: bytes, strict: bool = True) -> list[RpmbFrame]:
    if len(raw) % FRAME_SIZE:
        raise WrongLength(f"frame stream length {len(raw)} is not a multiple of {FRAME_SIZE}")
    return [parse_frame(raw[i:i + FRAME_SIZE], strict) for i in range(0, len(raw), FRAME_SIZE)]


def compute_mac(key: bytes, frames: Sequence[RpmbFrame]) -> bytes:
    """HMAC-SHA256 over the concatenated MAC-covered regions of ``frames``."""
    if not frames:
        raise FrameError("compute_mac needs at least one frame")
    mac = hmac.new(check_key(key), digestmod=hashlib.sha256)
    for frame in frames:
        mac.update(serialize_frame(frame)[MAC_COVERED_OFFSET:])
    return mac.digest()


def sign_frames(key: bytes, frames: Sequence[RpmbFrame]) -> list[RpmbFrame]:
    """Return ``frames`` with the MAC placed in the last frame."""
    frames = list(frames)
    frames[-1] = frames[-1].replace(key_mac=compute_mac(key, frames))
    return frames


def verify_frames(key: bytes, frames: Sequence[RpmbFrame]) -> bool:
    return hmac.compare_digest(compute_mac(key, frames), frames[-1].key_mac)


def build_auth_write(key: bytes | None, counter: int, address: int,
                     data_blocks: Iterable[bytes], mac: bytes | None = None) -> list[RpmbFrame]:
    """Build the frames of an authenticated data write.

    ``key=None`` together with an explicit ``mac`` produces a request the
    caller could not have signed; the attacker path uses this.
    """
    blocks = [bytes(b) for b in data_blocks]
    if not blocks:
        raise BadBlockSize("at least one data block is required")
    for b in blocks:
        if len(b) != BLOCK_SIZE:
            raise BadBlockSize(f"data blocks must be {BLOCK_SIZE} bytes, got {len(b)}")
    frames = [RpmbFrame(data=b, write_counter=counter, address=address,
                        block_count=len(blocks), req_resp=RequestType.AUTH_WRITE)
              for b in blocks]
    if mac is not None:
        if len(mac) != MAC_SIZE:
            raise FrameError(f"MAC must be {MAC_SIZE} bytes")
        frames[-1] = frames[-1].replace(key_mac=bytes(mac))
        return frames
    if key is None:
        raise FrameError("either a key or an explicit MAC is required")
    return sign_frames(key, frames)


def split_blocks(data: bytes) -> list[bytes]:
    if not data or len(data) % BLOCK_SIZE:
        raise BadBlockSize(f"data length {len(data)} is not a positive multiple of {BLOCK_SIZE}")
    return [data[i:i + BLOCK_SIZE] for i in range(0, len(data), BLOCK_SIZE)]


def frames_to_hex(frames: Iterable[RpmbFrame]) -> str:
    """One frame per line, 1024 lowercase hex digits each."""
    return "".join(serialize_frame(f).hex() + "\n" for f in frames)


def frames_from_hex(text: str, strict: bool = True) -> list[RpmbFrame]:
    frames = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            raw = bytes.fromhex(line)
        except ValueError as exc:
            raise FrameError(f"line {lineno}: {exc}") from None
        frames.append(parse_frame(raw, strict))
    return frames
