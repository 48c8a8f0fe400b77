import dataclasses
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from rpmb_emfi.controller import Device, ResponseKind, load_device_profile
from rpmb_emfi.faults import GeneratorEntry, FaultKind, PulseSpec, SimulatedInjector, load_fault_profile
from rpmb_emfi.host import (
    DeviceServer, HostSession, InProcessTransport, LoopbackTransport, MacMismatch, NonceMismatch,
    connect, decode_command, decode_response, encode_command, encode_response,
)
from rpmb_emfi.outcome import CRASH, NORMAL, SUCCESS
from rpmb_emfi.protocol import (
    RequestType, ResultCode, RpmbFrame, parse_frame, serialize_frame,
)

KEY = b"\x5A" * 32
DATA = bytes(range(256))


def forced(kind_or_crash):
    """Injector whose pulses always produce one kind of fault at the hotspot."""
    prof = load_fault_profile("target1")
    if kind_or_crash == "crash":
        prof = prof.with_uniform(crash=1.0)
    else:
        prof = prof.with_uniform(glitch=1.0)
        gens = dict(prof.generators, compare=(GeneratorEntry(1.0, kind_or_crash),))
        prof = dataclasses.replace(prof, generators=gens)
    return SimulatedInjector(prof, 0)


def session_with(injector=None):
    dev = Device(load_device_profile("target1"))
    s = connect(dev, injector, seed=1)
    return dev, s


class Tamper(InProcessTransport):
    """Flips one byte of the first response frame of CMD18."""

    def __init__(self, device, offset):
        super().__init__(device)
        self.offset = offset

    def send_command(self, opcode, argument=0, frames=()):
        resp = super().send_command(opcode, argument, frames)
        if resp.kind == ResponseKind.DATA_FRAMES:
            raw = bytearray(serialize_frame(resp.frames[0]))
            raw[self.offset // 8] ^= 1 << (self.offset % 8)
            frames = (parse_frame(bytes(raw), strict=False),) + resp.frames[1:]
            resp = dataclasses.replace(resp, frames=frames)
        return resp


def test_program_key():
    dev, s = session_with()
    assert s.program_key(KEY) is ResultCode.OPERATION_OK
    assert s.program_key(b"\x01" * 32) is ResultCode.GENERAL_FAILURE
    assert s.write_authenticated(0, DATA) is ResultCode.OPERATION_OK


def test_counter_after_writes():
    dev, s = session_with()
    s.program_key(KEY)
    for n in range(6):
        s.write_authenticated(n, DATA)
    assert s.read_counter() == (6, True)


def test_unkeyed_counter_unverified():
    dev, s = session_with()
    s.program_key(KEY)
    s.write_authenticated(0, DATA)
    anon = HostSession(InProcessTransport(dev), seed=3)
    assert anon.read_counter() == (1, False)


@settings(max_examples=60, deadline=None)
@given(st.integers(196 * 8, 512 * 8 - 1))
def test_any_single_bit_corruption_caught(bit):
    dev = Device()
    HostSession(InProcessTransport(dev)).program_key(KEY)
    s = HostSession(Tamper(dev, bit), key=KEY, seed=2)
    nonce_bits = range(484 * 8, 500 * 8)
    with pytest.raises(NonceMismatch if bit in nonce_bits else MacMismatch):
        s.read_counter()


def test_valid_write_read_back():
    dev, s = session_with()
    s.program_key(KEY)
    assert s.write_authenticated(2, DATA * 2) is ResultCode.OPERATION_OK
    res = s.read_authenticated(2, 2)
    assert res.data == DATA * 2 and res.verified and res.result is ResultCode.OPERATION_OK


def test_stale_counter_and_wrong_key():
    dev, s = session_with()
    s.program_key(KEY)
    s.write_authenticated(0, DATA)
    s.counter = 0
    assert s.write_authenticated(0, DATA) is ResultCode.COUNTER_FAILURE
    assert s.write_authenticated(0, DATA, key=b"\x00" * 32) is ResultCode.AUTH_FAILURE
    assert s.read_counter()[0] == 1


def test_fresh_blocks_read_zero():
    dev, s = session_with()
    s.program_key(KEY)
    assert s.read_authenticated(100, 3).data == bytes(768)
    assert s.read_authenticated(1023, 2).result is ResultCode.ADDRESS_FAILURE


def test_read_nonce_mismatch():
    dev = Device()
    HostSession(InProcessTransport(dev)).program_key(KEY)
    s = HostSession(Tamper(dev, 490 * 8), key=KEY)
    with pytest.raises(NonceMismatch):
        s.read_authenticated(0)


def test_attack_without_pulse():
    dev, s = session_with()
    s.program_key(KEY)
    assert s.attack_write(0, DATA) == (ResultCode.AUTH_FAILURE, NORMAL)
    assert s.read_counter()[0] == 0


@pytest.mark.parametrize("kind", [FaultKind.SKIP_CALL])
def test_attack_with_bypass(kind):
    injector = forced(kind)
    dev, s = session_with(injector)
    s.program_key(KEY)
    pulse = PulseSpec(6.5, 4.5)
    assert s.attack_write(4, DATA, 117_800, pulse, injector) == (ResultCode.OPERATION_OK, SUCCESS)
    res = s.read_authenticated(4)
    assert res.data == DATA and s.read_counter()[0] == 1


def test_attack_crash_requires_reset():
    injector = forced("crash")
    dev, s = session_with(injector)
    s.program_key(KEY)
    assert s.attack_write(0, DATA, 117_800, PulseSpec(6.5, 4.5), injector) == (None, CRASH)
    assert dev.state.crashed
    s.hard_reset()
    assert s.read_counter() == (0, True)


class Capture(InProcessTransport):
    def __init__(self, device):
        super().__init__(device)
        self.writes = []

    def send_command(self, opcode, argument=0, frames=()):
        if frames and frames[0].request_type is RequestType.AUTH_WRITE:
            self.writes.append(frames)
        return super().send_command(opcode, argument, frames)


def test_attacker_mac_is_random():
    dev = Device()
    s = HostSession(Capture(dev), seed=8)
    s.program_key(KEY)
    for _ in range(5):
        s.attack_write(0, DATA)
    macs = [frames[-1].key_mac for frames in s.transport.writes]
    assert len(set(macs)) == 5 and bytes(32) not in macs


def test_sequence_discipline():
    dev, s = session_with()
    s.program_key(KEY)
    s.write_authenticated(0, DATA)
    s.attack_write(0, DATA)
    s.write_authenticated(1, DATA)
    reqs = [r for _, _, r in s.transport.command_log if r is not None]
    for i, r in enumerate(reqs):
        if r in (RequestType.AUTH_WRITE, RequestType.PROGRAM_KEY):
            assert reqs[i + 1] is RequestType.RESULT_READ


def test_trigger_once_per_data_command():
    dev, s = session_with()
    s.program_key(KEY)
    s.write_authenticated(0, DATA)
    data_cmds = sum(1 for op, _, r in s.transport.command_log if r is not None)
    assert s.transport.trigger_count == data_cmds


def test_framing_round_trip():
    frames = [RpmbFrame(write_counter=3, req_resp=RequestType.AUTH_WRITE)]
    msg = encode_command(25, 7, frames)
    assert decode_command(msg[4:]) == (25, 7, frames)
    dev = Device()
    resp = dev.command(8)
    assert decode_response(encode_response(resp)[4:]) == resp


def test_loopback_transport():
    dev = Device()
    server = DeviceServer(dev)
    a, b = socket.socketpair()
    sa_r, sa_w = a.makefile("rb"), a.makefile("wb")
    sb_r, sb_w = b.makefile("rb"), b.makefile("wb")
    t = threading.Thread(target=server.serve, args=(sb_r, sb_w), daemon=True)
    t.start()
    s = HostSession(LoopbackTransport(sa_r, sa_w), seed=4)
    assert s.program_key(KEY) is ResultCode.OPERATION_OK
    assert s.write_authenticated(0, DATA) is ResultCode.OPERATION_OK
    assert s.read_authenticated(0).data == DATA
    assert s.read_counter() == (1, True)
    s.hard_reset()
    sa_w.close()
    a.shutdown(socket.SHUT_WR)
    t.join(timeout=5)
    assert dev.state.write_counter == 1
