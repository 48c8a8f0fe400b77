"""Emulated eMMC controller with an RPMB partition.

The authenticated-write handler walks a :class:`MicroOpTimeline`; faults
scheduled by an injector are bound to whichever micro-op's interval
contains their timestamp and take effect when that op runs.  Check order
is HMAC -> counter -> address -> flash write -> counter increment ->
result store.

Firmware behaviour under faults, per micro-op:

* data reception / CRC / busy assert / HMAC compute: a register
  corruption derails the HMAC engine and the request ends with
  GeneralFailure; skipping HmacCompute leaves the previous MAC in the
  result register.
* HMAC compare: handled by the selected check routine (see ``checks``).
* counter / address checks: a corrupted operand makes the check fail with
  its own code; a skipped check passes.
* once a request is on the error path the remaining checks do not run, but
  a corruption landing in their time slots hits the status register.
  Corrupted status words decode to a known failure code when they match
  one, otherwise to GeneralFailure; OK is never produced on the error
  path.
* the result register is preset to GeneralFailure when a write starts, so
  a skipped ResultStore reports 0x01.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import struct
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .checks import MAC_LENGTH, CheckVariant, routine_for
from .faults import FaultKind, FaultPrimitive, MemoryRegion, ProfileError, Register
from .protocol import (
    BLOCK_SIZE, COUNTER_EXPIRED_FLAG, FRAME_SIZE, KEY_MAC_OFFSET, MAC_SIZE, RequestType,
    ResultCode, RpmbFrame, check_key, compute_mac, serialize_frame, sign_frames,
)
from .timeline import (
    OBSERVER_INNER, OBSERVER_OUTER, TIME_RESOLUTION_NS, MicroOpKind, MicroOpTimeline,
    TimingProfile, build_observer_timeline, build_short_timeline, build_write_timeline,
)

log = logging.getLogger(__name__)

M32 = 0xFFFFFFFF
SECTOR_SIZE = 512
EXT_CSD_SIZE = 512
OBSERVER_EXPECTED = (OBSERVER_OUTER * OBSERVER_INNER, (7 * OBSERVER_OUTER * OBSERVER_INNER) & M32)

CMD_SEND_EXT_CSD = 8
CMD_READ_SINGLE_BLOCK = 17
CMD_READ_MULTIPLE_BLOCK = 18
CMD_SET_BLOCK_COUNT = 23
CMD_WRITE_BLOCK = 24
CMD_WRITE_MULTIPLE_BLOCK = 25
RELIABLE_WRITE = 1 << 31

R1_OK = 0
R1_ERROR = 1 << 19


class ControllerError(Exception):
    pass


class DeviceCrashed(ControllerError):
    pass


class DebugDisabled(ControllerError):
    pass


class KeyProtected(ControllerError):
    pass


class UnsupportedCommand(ControllerError, ValueError):
    pass


# --- profile -------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DeviceProfile:
    name: str = "generic"
    rpmb_blocks: int = 1024
    user_sectors: int = 4096
    timing: TimingProfile = TimingProfile()
    variant: CheckVariant = CheckVariant.NAIVE
    debug_enabled: bool = True
    wear_probability: float = 1e-4
    crash_fill: int = 0xFF
    observer_installed: bool = True
    key_readable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", CheckVariant.parse(self.variant))
        if not 1 <= self.rpmb_blocks <= 0x10000:
            raise ProfileError("rpmb_blocks must be in [1, 65536]")
        if self.user_sectors < 1:
            raise ProfileError("user_sectors must be positive")
        if not 0.0 <= self.wear_probability <= 1.0:
            raise ProfileError("wear_probability must be a probability")
        if self.crash_fill not in (0x00, 0xFF):
            raise ProfileError("crash_fill must be 0x00 or 0xFF")

    def with_variant(self, variant: CheckVariant | str) -> DeviceProfile:
        return dataclasses.replace(self, variant=CheckVariant.parse(variant))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> DeviceProfile:
        try:
            d = dict(d)
            timing = TimingProfile(**d.pop("timing", {}))
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise ProfileError(f"unknown device profile keys {sorted(unknown)}")
            return cls(timing=timing, **d)
        except ProfileError:
            raise
        except (TypeError, ValueError) as exc:
            raise ProfileError(f"malformed device profile: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_device_profile(source: str | Path | Mapping) -> DeviceProfile:
    """Load a device profile by shipped name (``target1``), path or dict."""
    if isinstance(source, Mapping):
        return DeviceProfile.from_dict(source)
    path = Path(source)
    if not path.suffix and not path.exists():
        try:
            text = resources.files("rpmb_emfi.data").joinpath(f"device_{source}.json").read_text()
        except FileNotFoundError:
            raise ProfileError(f"no shipped device profile named {source!r}") from None
    else:
        try:
            text = path.read_text()
        except OSError as exc:
            raise ProfileError(f"cannot read device profile {path}: {exc}") from exc
    try:
        return DeviceProfile.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"device profile is not valid JSON: {exc}") from exc


# --- state and responses ------------------------------------------------------------

@dataclasses.dataclass
class DeviceState:
    rpmb_blocks: np.ndarray
    user_area: np.ndarray
    key: bytes | None = None
    key_programmed: bool = False
    write_counter: int = 0
    counter_expired: bool = False
    sram_counter_copy: int = 0
    crashed: bool = False
    result: int = int(ResultCode.OPERATION_OK)
    ext_csd: bytearray = dataclasses.field(default_factory=lambda: bytearray(EXT_CSD_SIZE))

    @classmethod
    def fresh(cls, profile: DeviceProfile) -> DeviceState:
        return cls(rpmb_blocks=np.zeros((profile.rpmb_blocks, BLOCK_SIZE), dtype=np.uint8),
                   user_area=np.zeros((profile.user_sectors, SECTOR_SIZE), dtype=np.uint8))

    @property
    def ext_csd_head(self) -> bytes:
        return bytes(self.ext_csd[:8])


class ResponseKind:
    R1_STATUS = "R1Status"
    DATA_FRAMES = "DataFrames"
    EXT_CSD = "ExtCsd"
    UNRESPONSIVE = "Unresponsive"


@dataclasses.dataclass(frozen=True)
class CommandResponse:
    kind: str
    frames: tuple[RpmbFrame, ...] = ()
    ext_csd: bytes = b""
    fill: int | None = None
    busy_duration_ns: int = 0
    status: int = R1_OK

    @property
    def unresponsive(self) -> bool:
        return self.kind == ResponseKind.UNRESPONSIVE

    def payload(self, frames_expected: int = 1) -> bytes:
        """Bytes the host would clock in for this response."""
        if self.kind == ResponseKind.DATA_FRAMES:
            return b"".join(serialize_frame(f) for f in self.frames)
        if self.kind == ResponseKind.EXT_CSD:
            return self.ext_csd
        if self.kind == ResponseKind.UNRESPONSIVE:
            return bytes([self.fill]) * (FRAME_SIZE * max(1, frames_expected))
        return b""


def r1(status: int = R1_OK, busy_ns: int = 0) -> CommandResponse:
    return CommandResponse(ResponseKind.R1_STATUS, status=status, busy_duration_ns=busy_ns)


def unresponsive(fill: int) -> CommandResponse:
    return CommandResponse(ResponseKind.UNRESPONSIVE, fill=fill)


def _decode_status(word: int, error_path: bool) -> int:
    code = word & 0xFFFF
    if code in (ResultCode.GENERAL_FAILURE, ResultCode.AUTH_FAILURE,
                ResultCode.COUNTER_FAILURE, ResultCode.ADDRESS_FAILURE):
        return code
    if code == ResultCode.OPERATION_OK and not error_path:
        return code
    return int(ResultCode.GENERAL_FAILURE)


def _s32(v: int) -> int:
    v &= M32
    return v - (1 << 32) if v & 0x80000000 else v


def simulate_observer(iteration: int | None = None,
                      fault: FaultPrimitive | None = None) -> tuple[int, int]:
    """Outputs (total_iterations, value) of the fault-observer loop.

    The loop is 4 outer x 62500 inner iterations adding 7 per inner
    iteration, with signed loop compares as in the firmware.  ``fault`` hits
    just before the body of global inner iteration ``iteration``; the
    remaining execution is evaluated arithmetically.

    * skip: the inner back-branch is skipped, ending the inner loop early;
    * loop_index / accumulator: the inner counter or the running value is
      corrupted;
    * any other register: the outer counter is corrupted.
    """
    if fault is None or fault.kind in (FaultKind.NONE, FaultKind.CORRUPT_MEMORY):
        return OBSERVER_EXPECTED
    inner, outer = OBSERVER_INNER, OBSERVER_OUTER
    p = min(max(int(iteration or 0), 0), inner * outer - 1)
    j = p // inner + 1
    i = p % inner
    value = 7 * p
    total = inner * (j - 1)
    if fault.kind in (FaultKind.SKIP_MICRO_OP, FaultKind.SKIP_CALL):
        value += 7
        i += 1
    elif fault.kind is FaultKind.CORRUPT_REGISTER and fault.register is Register.LOOP_INDEX:
        i = fault.corrupt(i)
        s = _s32(i)
        k = 1 if s + 1 >= inner else inner - s
        value += 7 * k
        i = (i + k) & M32
    elif fault.kind is FaultKind.CORRUPT_REGISTER and fault.register is Register.ACCUMULATOR:
        value = fault.corrupt(value & M32) + 7 * (inner - i)
        i = inner
    else:
        j = fault.corrupt(j)
        value += 7 * (inner - i)
        i = inner
    total += i
    more = max(0, outer - _s32(j))
    total += more * inner
    value += more * inner * 7
    return total & M32, value & M32


# --- device ---------------------------------------------------------------------------

class Device:
    """One emulated eMMC.  Not thread-safe; use one instance per worker."""

    def __init__(self, profile: DeviceProfile | None = None, seed: int | None = 0,
                 state: DeviceState | None = None):
        self.profile = profile or DeviceProfile()
        self.state = state or DeviceState.fresh(self.profile)
        self.rng = np.random.default_rng(seed)
        self.active_timeline: MicroOpTimeline | None = None
        self.last_trace: list = []
        self._scheduled: list[tuple[float, FaultPrimitive]] = []
        self._block_count = 0
        self._pending: tuple[RequestType, RpmbFrame] | None = None
        self._mac_register = bytes(MAC_SIZE)
        self._nominal = build_write_timeline(self.profile.timing)
        self._short = build_short_timeline(self.profile.timing)
        self._observer = build_observer_timeline(self.profile.timing)

    # -- timelines

    def write_timeline(self) -> MicroOpTimeline:
        if self.profile.variant is not CheckVariant.DOUBLE_CHECK:
            return self._nominal
        steps = self.profile.timing.max_jitter_ns() // TIME_RESOLUTION_NS
        jitter = int(self.rng.integers(0, steps + 1)) * TIME_RESOLUTION_NS
        return build_write_timeline(self.profile.timing, double_check_jitter_ns=jitter)

    @property
    def nominal_timeline(self) -> MicroOpTimeline:
        return self._nominal

    @property
    def observer_timeline(self) -> MicroOpTimeline:
        return self._observer

    # -- fault plumbing

    def schedule_fault(self, time_ns: float, primitive: FaultPrimitive) -> None:
        self._scheduled.append((float(time_ns), primitive))

    def _take_faults(self) -> list[tuple[float, FaultPrimitive]]:
        faults, self._scheduled = self._scheduled, []
        return faults

    def crash(self) -> None:
        self.state.crashed = True
        self._pending = None

    def apply_pulse_wear(self, rng: np.random.Generator) -> list[int]:
        """Each pulse flips one bit in each user sector with the wear probability."""
        p = self.profile.wear_probability
        n_sectors = self.state.user_area.shape[0]
        n = int(rng.binomial(n_sectors, p)) if p > 0 else 0
        if not n:
            return []
        sectors = sorted(int(s) for s in rng.choice(n_sectors, size=n, replace=False))
        for s in sectors:
            bit = int(rng.integers(0, SECTOR_SIZE * 8))
            self.state.user_area[s, bit // 8] ^= 1 << (bit % 8)
        return sectors

    def _corrupt_memory(self, fault: FaultPrimitive) -> None:
        st = self.state
        if fault.region is MemoryRegion.SRAM_COUNTER:
            st.sram_counter_copy = fault.corrupt(st.sram_counter_copy)
            log.debug("SRAM counter copy corrupted to %#x", st.sram_counter_copy)
        elif fault.region is MemoryRegion.USER_SECTOR:
            sector = fault.operand % st.user_area.shape[0]
            bit = (fault.operand >> 12) % (SECTOR_SIZE * 8)
            st.user_area[sector, bit // 8] ^= 1 << (bit % 8)

    # -- command interface

    def command(self, opcode: int, argument: int = 0, frames: Sequence[RpmbFrame] = (),
                on_trigger=None) -> CommandResponse:
        """Process one eMMC command.

        ``on_trigger(timeline)`` is invoked once the last data bit of a
        data-bearing command (or a hooked CMD8) has been received, before
        the controller starts working; injectors schedule faults from it.
        """
        st = self.state
        if st.crashed:
            self._take_faults()
            return unresponsive(self.profile.crash_fill)
        if opcode == CMD_SET_BLOCK_COUNT:
            self._block_count = argument & 0xFFFF
            return r1()
        if opcode in (CMD_WRITE_BLOCK, CMD_WRITE_MULTIPLE_BLOCK):
            return self._data_command(list(frames), on_trigger)
        if opcode in (CMD_READ_SINGLE_BLOCK, CMD_READ_MULTIPLE_BLOCK):
            count = self._block_count or 1
            self._block_count = 0
            return self._read_pending(count)
        if opcode == CMD_SEND_EXT_CSD:
            if not self.profile.observer_installed:
                return CommandResponse(ResponseKind.EXT_CSD, ext_csd=bytes(st.ext_csd))
            self.active_timeline = self._observer
            if on_trigger is not None:
                on_trigger(self._observer)
            return self.run_fault_observer(self._take_faults())
        raise UnsupportedCommand(f"CMD{opcode} is not modelled")

    def _data_command(self, frames: list[RpmbFrame], on_trigger) -> CommandResponse:
        if not frames:
            return r1(R1_ERROR)
        expected = self._block_count or 1
        self._block_count = 0
        req = frames[0].request_type
        if len(frames) != expected or any(f.request_type is not req for f in frames):
            return r1(R1_ERROR)
        timeline = self.write_timeline() if req is RequestType.AUTH_WRITE else self._short
        self.active_timeline = timeline
        if on_trigger is not None:
            on_trigger(timeline)
        faults = self._take_faults()
        try:
            if req is RequestType.AUTH_WRITE:
                response, _ = self.handle_authenticated_write(frames, faults, timeline=timeline)
                return response
            if any(f.kind is FaultKind.CRASH and timeline.op_at(t) for t, f in faults):
                self.crash()
                return unresponsive(self.profile.crash_fill)
            if req is RequestType.PROGRAM_KEY:
                return self._program_key(frames[0], timeline)
            if req in (RequestType.READ_COUNTER, RequestType.AUTH_READ, RequestType.RESULT_READ):
                self._pending = (req, frames[0])
                return r1(busy_ns=timeline.end_ns)
            return r1(R1_ERROR)
        finally:
            self.active_timeline = None

    def _program_key(self, frame: RpmbFrame, timeline: MicroOpTimeline) -> CommandResponse:
        st = self.state
        if st.key_programmed:
            st.result = int(ResultCode.GENERAL_FAILURE)
        else:
            st.key = check_key(frame.key_mac)
            st.key_programmed = True
            st.result = int(ResultCode.OPERATION_OK)
        return r1(busy_ns=timeline.end_ns)

    def _read_pending(self, count: int) -> CommandResponse:
        pending, self._pending = self._pending, None
        if pending is None:
            frame = RpmbFrame(result=int(ResultCode.GENERAL_FAILURE),
                              req_resp=RequestType.RESULT_READ_RESPONSE)
            return CommandResponse(ResponseKind.DATA_FRAMES, frames=(frame,))
        req, frame = pending
        if req is RequestType.RESULT_READ:
            return self.handle_result_read()
        if req is RequestType.READ_COUNTER:
            return self._counter_response(frame)
        return self._auth_read(frame, count)

    def _maybe_sign(self, frames: list[RpmbFrame]) -> tuple[RpmbFrame, ...]:
        if self.state.key_programmed:
            frames = sign_frames(self.state.key, frames)
        return tuple(frames)

    def _counter_response(self, request: RpmbFrame) -> CommandResponse:
        st = self.state
        if not st.key_programmed:
            frame = RpmbFrame(nonce=request.nonce, result=int(ResultCode.NO_KEY),
                              req_resp=RequestType.READ_COUNTER_RESPONSE)
            return CommandResponse(ResponseKind.DATA_FRAMES, frames=(frame,))
        result = int(ResultCode.OPERATION_OK)
        if st.counter_expired:
            result |= COUNTER_EXPIRED_FLAG
        frame = RpmbFrame(nonce=request.nonce, write_counter=st.sram_counter_copy, result=result,
                          req_resp=RequestType.READ_COUNTER_RESPONSE)
        return CommandResponse(ResponseKind.DATA_FRAMES, frames=self._maybe_sign([frame]))

    def _auth_read(self, request: RpmbFrame, count: int) -> CommandResponse:
        st = self.state
        address = request.address
        if address + count > st.rpmb_blocks.shape[0]:
            frame = RpmbFrame(nonce=request.nonce, address=address,
                              result=int(ResultCode.ADDRESS_FAILURE),
                              req_resp=RequestType.AUTH_READ_RESPONSE)
            return CommandResponse(ResponseKind.DATA_FRAMES, frames=self._maybe_sign([frame]))
        frames = [RpmbFrame(data=st.rpmb_blocks[address + i].tobytes(), nonce=request.nonce,
                            address=address, block_count=count,
                            result=int(ResultCode.OPERATION_OK),
                            req_resp=RequestType.AUTH_READ_RESPONSE)
                  for i in range(count)]
        return CommandResponse(ResponseKind.DATA_FRAMES, frames=self._maybe_sign(frames))

    # -- authenticated write

    def handle_authenticated_write(self, frames: Sequence[RpmbFrame],
                                   fault_schedule: Iterable[tuple[float, FaultPrimitive]] = (),
                                   timeline: MicroOpTimeline | None = None
                                   ) -> tuple[CommandResponse, ResultCode | None]:
        """Execute an authenticated write against the micro-op timeline.

        Returns the write-path response and the result code stored in the
        result register (``None`` if the device crashed).
        """
        st = self.state
        if st.crashed:
            raise DeviceCrashed("device is unresponsive; hard reset required")
        frames = list(frames)
        timeline = timeline or self.write_timeline()
        by_op = defaultdict(list)
        for t, fault in sorted(fault_schedule, key=lambda item: item[0]):
            op = timeline.op_at(t)
            if op:
                by_op[op].append(fault)
        self.last_trace = trace = []
        st.result = int(ResultCode.GENERAL_FAILURE)

        if not st.key_programmed:
            if any(f.kind is FaultKind.CRASH for fs in by_op.values() for f in fs):
                self.crash()
                return unresponsive(self.profile.crash_fill), None
            st.result = int(ResultCode.NO_KEY)
            return r1(busy_ns=self._short.end_ns), ResultCode.NO_KEY

        variant = self.profile.variant
        routine = routine_for(variant)
        received = serialize_frame(frames[-1])[KEY_MAC_OFFSET:]
        expected_mac = self._mac_register
        first = frames[0]
        status = int(ResultCode.OPERATION_OK)
        error_path = False
        write_address = first.address
        checks_done = set()

        for op in timeline:
            faults = by_op.get(op, ())
            if any(f.kind is FaultKind.CRASH for f in faults):
                self.crash()
                return unresponsive(self.profile.crash_fill), None
            for f in faults:
                if f.kind is FaultKind.CORRUPT_MEMORY:
                    self._corrupt_memory(f)
            corrupt = [f for f in faults if f.kind is FaultKind.CORRUPT_REGISTER]
            skip = any(f.kind in (FaultKind.SKIP_MICRO_OP, FaultKind.SKIP_CALL) for f in faults)
            kind = op.kind

            if kind is MicroOpKind.HMAC_COMPARE_WORD:
                if error_path or op.check in checks_done:
                    continue
                checks_done.add(op.check)
                slots = timeline.compare_ops(op.check)
                call_faults = []
                for slot in slots:
                    for f in by_op.get(slot, ()):
                        if f.kind is FaultKind.SKIP_MICRO_OP:
                            call_faults.append(dataclasses.replace(f, operand=slot.word))
                        elif f.kind in (FaultKind.SKIP_CALL, FaultKind.CORRUPT_REGISTER):
                            call_faults.append(f)
                words: list[int] = []
                r0 = routine(received, MAC_LENGTH, expected_mac, call_faults, words)
                trace.extend(slots[w] for w in words if 0 <= w < len(slots))
                if not variant.accepts(r0):
                    status = int(ResultCode.AUTH_FAILURE)
                    error_path = True
                continue

            if error_path and kind in (MicroOpKind.COUNTER_CHECK, MicroOpKind.ADDRESS_CHECK,
                                       MicroOpKind.FLASH_WRITE, MicroOpKind.COUNTER_INCREMENT,
                                       MicroOpKind.CHECK_DELAY):
                for f in corrupt:
                    status = _decode_status(f.corrupt(status), error_path=True)
                continue

            trace.append(op)
            if kind in (MicroOpKind.RECEIVE_DATA, MicroOpKind.CRC_STATUS, MicroOpKind.BUSY_ASSERT):
                if corrupt and not error_path:
                    status, error_path = int(ResultCode.GENERAL_FAILURE), True
            elif kind is MicroOpKind.HMAC_COMPUTE:
                if error_path:
                    continue
                if not skip:
                    expected_mac = compute_mac(st.key, frames)
                    self._mac_register = expected_mac
                if corrupt:
                    status, error_path = int(ResultCode.GENERAL_FAILURE), True
            elif kind is MicroOpKind.COUNTER_CHECK:
                if skip:
                    continue
                operand = st.sram_counter_copy
                for f in corrupt:
                    operand = f.corrupt(operand)
                if st.counter_expired:
                    status, error_path = int(ResultCode.COUNTER_FAILURE) | COUNTER_EXPIRED_FLAG, True
                elif first.write_counter != operand:
                    status, error_path = int(ResultCode.COUNTER_FAILURE), True
            elif kind is MicroOpKind.ADDRESS_CHECK:
                for f in corrupt:
                    write_address = f.corrupt(write_address)
                if skip:
                    continue
                if first.block_count != len(frames):
                    status, error_path = int(ResultCode.GENERAL_FAILURE), True
                elif write_address + len(frames) > st.rpmb_blocks.shape[0]:
                    status, error_path = int(ResultCode.ADDRESS_FAILURE), True
            elif kind is MicroOpKind.FLASH_WRITE:
                if skip:
                    continue
                if corrupt or write_address + len(frames) > st.rpmb_blocks.shape[0]:
                    status, error_path = int(ResultCode.GENERAL_FAILURE), True
                    continue
                for n, frame in enumerate(frames):
                    st.rpmb_blocks[write_address + n] = np.frombuffer(frame.data, dtype=np.uint8)
            elif kind is MicroOpKind.COUNTER_INCREMENT:
                if skip:
                    continue
                new = (st.sram_counter_copy + 1) & M32
                for f in corrupt:
                    new = f.corrupt(new)
                st.write_counter = st.sram_counter_copy = new
                if new == M32:
                    st.counter_expired = True
            elif kind is MicroOpKind.RESULT_STORE:
                for f in corrupt:
                    status = _decode_status(f.corrupt(status), error_path)
                if not skip:
                    st.result = status

        result, _ = ResultCode.from_raw(st.result)
        return r1(busy_ns=timeline.end_ns), result

    def handle_result_read(self) -> CommandResponse:
        st = self.state
        if st.crashed:
            return unresponsive(self.profile.crash_fill)
        frame = RpmbFrame(write_counter=st.sram_counter_copy, result=st.result,
                          req_resp=RequestType.RESULT_READ_RESPONSE)
        return CommandResponse(ResponseKind.DATA_FRAMES, frames=self._maybe_sign([frame]))

    # -- fault observer

    def run_fault_observer(self, faults: Iterable[tuple[float, FaultPrimitive]] = ()
                           ) -> CommandResponse:
        """Run the observer loop and return the EXT_CSD image.

        Only the earliest effective fault is modelled (single-fault model).
        """
        st = self.state
        if st.crashed:
            return unresponsive(self.profile.crash_fill)
        iteration, fault = None, None
        for t, f in sorted(faults, key=lambda item: item[0]):
            if t < 0 or not self._observer.op_at(t):
                continue
            if f.kind is FaultKind.CRASH:
                self.crash()
                self.active_timeline = None
                return unresponsive(self.profile.crash_fill)
            if f.kind is FaultKind.CORRUPT_MEMORY:
                self._corrupt_memory(f)
                continue
            if f.kind is not FaultKind.NONE and fault is None:
                iteration, fault = int(t // self.profile.timing.observer_iteration_ns), f
        total, value = simulate_observer(iteration, fault)
        st.ext_csd[0:8] = struct.pack("<II", total, value)
        self.active_timeline = None
        return CommandResponse(ResponseKind.EXT_CSD, ext_csd=bytes(st.ext_csd),
                               busy_duration_ns=self._observer.end_ns)

    # -- reset and debug

    def hard_reset(self) -> None:
        st = self.state
        st.crashed = False
        st.sram_counter_copy = st.write_counter
        st.result = int(ResultCode.OPERATION_OK)
        st.ext_csd = bytearray(EXT_CSD_SIZE)
        self._pending = None
        self._block_count = 0
        self._scheduled = []
        self.active_timeline = None
        self._mac_register = bytes(MAC_SIZE)

    def _require_debug(self) -> None:
        if not self.profile.debug_enabled:
            raise DebugDisabled("vendor debug interface is disabled in the device profile")

    def debug_poke_counter(self, value: int) -> None:
        self._require_debug()
        value &= M32
        self.state.sram_counter_copy = value
        self.state.write_counter = value
        self.state.counter_expired = value == M32

    def debug_peek(self, region: str) -> bytes:
        self._require_debug()
        st = self.state
        if region == "counter":
            return st.sram_counter_copy.to_bytes(4, "big")
        if region == "persistent_counter":
            return st.write_counter.to_bytes(4, "big")
        if region == "result":
            return st.result.to_bytes(2, "big")
        if region == "ext_csd":
            return bytes(st.ext_csd)
        if region == "rpmb":
            return st.rpmb_blocks.tobytes()
        if region == "user":
            return st.user_area.tobytes()
        if region.startswith("rpmb_block:"):
            return st.rpmb_blocks[int(region.split(":", 1)[1])].tobytes()
        if region == "key":
            if not self.profile.key_readable or st.key is None:
                raise KeyProtected("the RPMB key is not readable through the debug interface")
            return st.key
        raise ValueError(f"unknown debug region {region!r}")

    # -- user area (offline imaging, as through an SD adapter)

    def image_user_area(self) -> bytes:
        return self.state.user_area.tobytes()

    def write_user_sector(self, index: int, data: bytes) -> None:
        if len(data) != SECTOR_SIZE:
            raise ValueError(f"sector data must be {SECTOR_SIZE} bytes")
        self.state.user_area[index] = np.frombuffer(data, dtype=np.uint8)

    def fill_user_area(self, data: bytes) -> None:
        area = self.state.user_area
        if len(data) != area.size:
            raise ValueError(f"user area image must be {area.size} bytes")
        area[:] = np.frombuffer(data, dtype=np.uint8).reshape(area.shape)

    # -- snapshot

    _MAGIC = b"RPMBSNAP"

    def snapshot(self) -> bytes:
        """Binary blob: magic, u32 header length, JSON metadata, RPMB, user area."""
        st = self.state
        header = {
            "version": __version__,
            "profile": self.profile.to_dict(),
            "key": st.key.hex() if st.key else None,
            "key_programmed": st.key_programmed,
            "write_counter": st.write_counter,
            "counter_expired": st.counter_expired,
            "sram_counter_copy": st.sram_counter_copy,
            "crashed": st.crashed,
            "result": st.result,
            "ext_csd": bytes(st.ext_csd).hex(),
        }
        head = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(self._MAGIC)
        buf.write(struct.pack(">I", len(head)))
        buf.write(head)
        buf.write(st.rpmb_blocks.tobytes())
        buf.write(st.user_area.tobytes())
        return buf.getvalue()

    @classmethod
    def from_snapshot(cls, blob: bytes, seed: int | None = 0) -> Device:
        if blob[:8] != cls._MAGIC:
            raise ValueError("not a device snapshot")
        (n,) = struct.unpack(">I", blob[8:12])
        header = json.loads(blob[12:12 + n])
        profile = DeviceProfile.from_dict(header["profile"])
        body = blob[12 + n:]
        rpmb_size = profile.rpmb_blocks * BLOCK_SIZE
        user_size = profile.user_sectors * SECTOR_SIZE
        if len(body) != rpmb_size + user_size:
            raise ValueError("snapshot body size does not match its profile")
        state = DeviceState(
            rpmb_blocks=np.frombuffer(body[:rpmb_size], dtype=np.uint8)
            .reshape(profile.rpmb_blocks, BLOCK_SIZE).copy(),
            user_area=np.frombuffer(body[rpmb_size:], dtype=np.uint8)
            .reshape(profile.user_sectors, SECTOR_SIZE).copy(),
            key=bytes.fromhex(header["key"]) if header["key"] else None,
            key_programmed=header["key_programmed"],
            write_counter=header["write_counter"],
            counter_expired=header["counter_expired"],
            sram_counter_copy=header["sram_counter_copy"],
            crashed=header["crashed"],
            result=header["result"],
            ext_csd=bytearray(bytes.fromhex(header["ext_csd"])),
        )
        return cls(profile, seed=seed, state=state)

