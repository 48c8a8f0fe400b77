"""Host-side RPMB client and transports.

Every request follows the eMMC sequence: CMD23 (block count, reliable
write) + CMD25 carrying the request frames, then CMD23 + CMD18 to clock out
the response frames.  Writes are always followed by a result request and
a result read before anything else is sent.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from typing import BinaryIO, Callable, Protocol, Sequence

import numpy as np

from .controller import (
    CMD_READ_MULTIPLE_BLOCK, CMD_SET_BLOCK_COUNT, CMD_WRITE_MULTIPLE_BLOCK, RELIABLE_WRITE,
    CommandResponse, Device, ResponseKind,
)
from .faults import PulseSpec, SimulatedInjector
from .outcome import CRASH, Outcome, classify_rpmb
from .protocol import (
    MAC_SIZE, NONCE_SIZE, FrameError, RequestType, ResultCode, RpmbFrame, build_auth_write,
    check_key, parse_frames, serialize_frame, split_blocks, verify_frames,
)
from .timeline import MicroOpTimeline

log = logging.getLogger(__name__)

TriggerHook = Callable[[MicroOpTimeline], None]


class HostError(Exception):
    pass


class NonceMismatch(HostError):
    pass


class MacMismatch(HostError):
    pass


class DeviceUnresponsive(HostError):
    pass


class Transport(Protocol):
    def send_command(self, opcode: int, argument: int = 0,
                     frames: Sequence[RpmbFrame] = ()) -> CommandResponse: ...

    def add_trigger(self, hook: TriggerHook) -> None: ...

    def hard_reset(self) -> None: ...


class InProcessTransport:
    """Direct binding to a :class:`Device` in the same process."""

    def __init__(self, device: Device):
        self.device = device
        self.hooks: list[TriggerHook] = []
        self.trigger_count = 0
        self.command_log: list[tuple[int, int, RequestType | None]] = []

    def add_trigger(self, hook: TriggerHook) -> None:
        self.hooks.append(hook)

    def _on_trigger(self, timeline: MicroOpTimeline) -> None:
        self.trigger_count += 1
        for hook in self.hooks:
            hook(timeline)

    def send_command(self, opcode: int, argument: int = 0,
                     frames: Sequence[RpmbFrame] = ()) -> CommandResponse:
        req = frames[0].request_type if frames else None
        self.command_log.append((opcode, argument, req))
        return self.device.command(opcode, argument, frames, on_trigger=self._on_trigger)

    def hard_reset(self) -> None:
        self.device.hard_reset()


# --- loopback framing ----------------------------------------------------------
#
# request:  u32 length | u8 opcode | u32 argument | frames...
# response: u32 length | u8 kind | u8 fill | u32 busy_ns | u32 status | payload
# opcode 0xFF is a hard reset.  All integers big-endian.

OP_HARD_RESET = 0xFF
_REQ_HEAD = struct.Struct(">BI")
_RESP_HEAD = struct.Struct(">BBII")
_KINDS = [ResponseKind.R1_STATUS, ResponseKind.DATA_FRAMES, ResponseKind.EXT_CSD,
          ResponseKind.UNRESPONSIVE]


def _prefixed(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


def encode_command(opcode: int, argument: int, frames: Sequence[RpmbFrame] = ()) -> bytes:
    body = _REQ_HEAD.pack(opcode, argument & 0xFFFFFFFF)
    return _prefixed(body + b"".join(serialize_frame(f) for f in frames))


def decode_command(body: bytes) -> tuple[int, int, list[RpmbFrame]]:
    opcode, argument = _REQ_HEAD.unpack_from(body)
    rest = body[_REQ_HEAD.size:]
    return opcode, argument, parse_frames(rest, strict=False) if rest else []


def encode_response(resp: CommandResponse) -> bytes:
    if resp.kind == ResponseKind.DATA_FRAMES:
        payload = b"".join(serialize_frame(f) for f in resp.frames)
    elif resp.kind == ResponseKind.EXT_CSD:
        payload = resp.ext_csd
    else:
        payload = b""
    head = _RESP_HEAD.pack(_KINDS.index(resp.kind), resp.fill or 0, resp.busy_duration_ns,
                           resp.status)
    return _prefixed(head + payload)


def decode_response(body: bytes) -> CommandResponse:
    kind, fill, busy, status = _RESP_HEAD.unpack_from(body)
    payload = body[_RESP_HEAD.size:]
    kind = _KINDS[kind]
    if kind == ResponseKind.DATA_FRAMES:
        return CommandResponse(kind, frames=tuple(parse_frames(payload, strict=False)),
                               busy_duration_ns=busy, status=status)
    if kind == ResponseKind.EXT_CSD:
        return CommandResponse(kind, ext_csd=payload, busy_duration_ns=busy, status=status)
    if kind == ResponseKind.UNRESPONSIVE:
        return CommandResponse(kind, fill=fill)
    return CommandResponse(kind, busy_duration_ns=busy, status=status)


def read_message(stream: BinaryIO) -> bytes | None:
    head = stream.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise HostError("truncated length prefix")
    (n,) = struct.unpack(">I", head)
    body = stream.read(n)
    if len(body) != n:
        raise HostError("truncated message body")
    return body


class DeviceServer:
    """Device side of the loopback link.  Trigger hooks run server-side."""

    def __init__(self, device: Device):
        self.transport = InProcessTransport(device)

    def handle(self, body: bytes) -> bytes:
        opcode, argument, frames = decode_command(body)
        if opcode == OP_HARD_RESET:
            self.transport.hard_reset()
            return encode_response(CommandResponse(ResponseKind.R1_STATUS))
        return encode_response(self.transport.send_command(opcode, argument, frames))

    def serve(self, reader: BinaryIO, writer: BinaryIO) -> None:
        while (body := read_message(reader)) is not None:
            writer.write(self.handle(body))
            writer.flush()


class LoopbackTransport:
    """Client side of the length-prefixed byte link."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO):
        self.reader = reader
        self.writer = writer

    def add_trigger(self, hook: TriggerHook) -> None:
        raise HostError("trigger hooks must be attached on the device side of a loopback link")

    def _roundtrip(self, message: bytes) -> CommandResponse:
        self.writer.write(message)
        self.writer.flush()
        body = read_message(self.reader)
        if body is None:
            raise DeviceUnresponsive("loopback link closed")
        return decode_response(body)

    def send_command(self, opcode: int, argument: int = 0,
                     frames: Sequence[RpmbFrame] = ()) -> CommandResponse:
        return self._roundtrip(encode_command(opcode, argument, frames))

    def hard_reset(self) -> None:
        self._roundtrip(encode_command(OP_HARD_RESET, 0))


# --- session -----------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ReadResult:
    data: bytes
    verified: bool
    result: ResultCode


@dataclasses.dataclass(frozen=True)
class AttackRecord:
    result: ResultCode | None
    outcome: Outcome
    raw_result: int
    frame: RpmbFrame | None


class HostSession:
    def __init__(self, transport: Transport, key: bytes | None = None, seed: int | None = None,
                 rng: np.random.Generator | None = None):
        self.transport = transport
        self.key = check_key(key) if key is not None else None
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.counter: int | None = None
        self.counter_result: ResultCode | None = None
        self.last_attack: AttackRecord | None = None

    # -- plumbing

    def _request(self, frames: Sequence[RpmbFrame]) -> CommandResponse:
        self.transport.send_command(CMD_SET_BLOCK_COUNT, len(frames) | RELIABLE_WRITE)
        return self.transport.send_command(CMD_WRITE_MULTIPLE_BLOCK, 0, frames)

    def _response(self, count: int = 1) -> CommandResponse:
        self.transport.send_command(CMD_SET_BLOCK_COUNT, count)
        return self.transport.send_command(CMD_READ_MULTIPLE_BLOCK, 0)

    def _frames(self, resp: CommandResponse) -> tuple[RpmbFrame, ...]:
        if resp.kind == ResponseKind.UNRESPONSIVE:
            raise DeviceUnresponsive("device returned a filled response; hard reset required")
        if resp.kind != ResponseKind.DATA_FRAMES or not resp.frames:
            raise HostError(f"expected data frames, got {resp.kind}")
        return resp.frames

    def _nonce(self) -> bytes:
        return self.rng.bytes(NONCE_SIZE)

    def result_read(self) -> CommandResponse:
        self._request([RpmbFrame(req_resp=RequestType.RESULT_READ)])
        return self._response()

    def _result(self) -> ResultCode:
        frame = self._frames(self.result_read())[0]
        return frame.result_code

    # -- operations

    def program_key(self, key: bytes) -> ResultCode:
        key = check_key(key)
        self._request([RpmbFrame(key_mac=key, req_resp=RequestType.PROGRAM_KEY)])
        result = self._result()
        if result == ResultCode.OPERATION_OK:
            self.key = key
        return result

    def read_counter(self) -> tuple[int, bool]:
        """Counter from the device; ``verified`` only when the session holds the key."""
        nonce = self._nonce()
        self._request([RpmbFrame(nonce=nonce, req_resp=RequestType.READ_COUNTER)])
        frame = self._frames(self._response())[0]
        if frame.nonce != nonce:
            raise NonceMismatch("counter response does not echo the request nonce")
        verified = False
        if self.key is not None and frame.result_code != ResultCode.NO_KEY:
            if not verify_frames(self.key, [frame]):
                raise MacMismatch("counter response MAC does not verify")
            verified = True
        self.counter = frame.write_counter
        self.counter_result = frame.result_code
        return frame.write_counter, verified

    def _refresh_counter(self) -> None:
        try:
            self.read_counter()
        except DeviceUnresponsive:
            self.counter = None

    def write_authenticated(self, address: int, data: bytes, key: bytes | None = None
                            ) -> ResultCode:
        key = key if key is not None else self.key
        if key is None:
            raise HostError("an authenticated write needs a key")
        if self.counter is None:
            self.read_counter()
        frames = build_auth_write(key, self.counter, address, split_blocks(data))
        self._request(frames)
        result = self._result()
        self._refresh_counter()
        return result

    def attack_write(self, address: int, data: bytes, delay_ns: float | None = None,
                     pulse: PulseSpec | None = None, injector: SimulatedInjector | None = None
                     ) -> tuple[ResultCode | None, Outcome]:
        """Write with a uniformly random MAC while a pulse is fired at ``delay_ns``.

        Returns the parsed result code (``None`` when the device crashed)
        and the outcome class.
        """
        if self.counter is None:
            self._refresh_counter()
        wrong_mac = self.rng.bytes(MAC_SIZE)
        frames = build_auth_write(None, self.counter or 0, address, split_blocks(data),
                                  mac=wrong_mac)
        if pulse is not None:
            if injector is None:
                raise HostError("a pulse needs an injector attached to the transport trigger")
            injector.arm(pulse.at(delay_ns if delay_ns is not None else pulse.delay_ns))
        try:
            self._request(frames)
        finally:
            if injector is not None:
                injector.arm(None)
        resp = self.result_read()
        outcome = classify_rpmb(resp)
        if outcome == CRASH:
            fill = resp.fill if resp.fill is not None else 0xFF
            self.last_attack = AttackRecord(None, outcome, fill * 0x0101, None)
            self.counter = None
            return None, outcome
        frame = resp.frames[0]
        self.last_attack = AttackRecord(frame.result_code, outcome, frame.result, frame)
        self._refresh_counter()
        return frame.result_code, outcome

    def read_authenticated(self, address: int, block_count: int = 1) -> ReadResult:
        nonce = self._nonce()
        self._request([RpmbFrame(nonce=nonce, address=address, block_count=block_count,
                                 req_resp=RequestType.AUTH_READ)])
        frames = self._frames(self._response(block_count))
        if any(f.nonce != nonce for f in frames):
            raise NonceMismatch("read response does not echo the request nonce")
        result = frames[-1].result_code
        verified = False
        if self.key is not None:
            if not verify_frames(self.key, frames):
                raise MacMismatch("read response MAC does not verify")
            verified = True
        if result != ResultCode.OPERATION_OK:
            return ReadResult(b"", verified, result)
        return ReadResult(b"".join(f.data for f in frames), verified, result)

    def hard_reset(self) -> None:
        self.transport.hard_reset()
        self.counter = None


def connect(device: Device, injector: SimulatedInjector | None = None, key: bytes | None = None,
            seed: int | None = None) -> HostSession:
    """In-process session, with the injector wired to the write trigger."""
    transport = InProcessTransport(device)
    if injector is not None:
        injector.attach(device)
        transport.add_trigger(injector.on_trigger)
    return HostSession(transport, key=key, seed=seed)


__all__ = [
    "AttackRecord", "DeviceServer", "DeviceUnresponsive", "FrameError", "HostError",
    "HostSession", "InProcessTransport", "LoopbackTransport", "MacMismatch", "NonceMismatch",
    "ReadResult", "Transport", "connect", "decode_command", "decode_response",
    "encode_command", "encode_response",
]
