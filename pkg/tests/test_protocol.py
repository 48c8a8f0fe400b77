import hashlib
import struct

import pytest
from hypothesis import given, settings, strategies as st

from rpmb_emfi.protocol import (
    FRAME_SIZE, BadBlockSize, RequestType, ResultCode, RpmbFrame, UnknownRequestType,
    WrongLength, build_auth_write, compute_mac, frames_from_hex, frames_to_hex, parse_frame,
    parse_frames, serialize_frame, sign_frames, split_blocks, verify_frames,
)

REQ_CODES = [t.value for t in RequestType]


def hmac_sha256_oracle(key: bytes, msg: bytes) -> bytes:
    # RFC 2104 built directly on the hash
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key.ljust(block, b"\0")
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).digest()


def frame_image_oracle(key_mac=bytes(32), data=bytes(256), nonce=bytes(16), counter=0,
                       address=0, block_count=0, result=0, req=0) -> bytes:
    # mmc-utils struct rpmb_frame, filled byte by byte
    img = bytearray(512)
    img[196:228] = key_mac
    img[228:484] = data
    img[484:500] = nonce
    img[500:504] = counter.to_bytes(4, "big")
    img[504:506] = address.to_bytes(2, "big")
    img[506:508] = block_count.to_bytes(2, "big")
    img[508:510] = result.to_bytes(2, "big")
    img[510:512] = req.to_bytes(2, "big")
    return bytes(img)


frames = st.builds(
    RpmbFrame,
    stuff=st.binary(min_size=196, max_size=196),
    key_mac=st.binary(min_size=32, max_size=32),
    data=st.binary(min_size=256, max_size=256),
    nonce=st.binary(min_size=16, max_size=16),
    write_counter=st.integers(0, 2**32 - 1),
    address=st.integers(0, 0xFFFF),
    block_count=st.integers(0, 0xFFFF),
    result=st.integers(0, 0xFFFF),
    req_resp=st.sampled_from(REQ_CODES),
)


def test_zero_frame_is_zero_bytes():
    assert serialize_frame(RpmbFrame()) == bytes(512)


def test_counter_offset_matches_reference_layout():
    img = serialize_frame(RpmbFrame(write_counter=1))
    assert img[500:504] == b"\x00\x00\x00\x01"
    assert img == frame_image_oracle(counter=1)
    assert img.count(0) == 511


def test_all_fields_against_reference_layout():
    f = RpmbFrame(key_mac=b"\xAA" * 32, data=bytes(range(256)), nonce=b"\x5C" * 16,
                  write_counter=0x01020304, address=0x0506, block_count=0x0708,
                  result=0x090A, req_resp=RequestType.AUTH_WRITE)
    assert serialize_frame(f) == frame_image_oracle(b"\xAA" * 32, bytes(range(256)), b"\x5C" * 16,
                                                    0x01020304, 0x0506, 0x0708, 0x090A, 3)


@settings(max_examples=300)
@given(frames)
def test_round_trip_frame(f):
    assert parse_frame(serialize_frame(f)) == f


@settings(max_examples=300)
@given(st.binary(min_size=510, max_size=510), st.sampled_from(REQ_CODES))
def test_round_trip_bytes(body, req):
    raw = body + req.to_bytes(2, "big")
    assert serialize_frame(parse_frame(raw)) == raw


def test_wrong_length():
    with pytest.raises(WrongLength):
        parse_frame(bytes(511))
    with pytest.raises(WrongLength):
        parse_frames(bytes(1000))


def test_result_field_auth_failure():
    raw = bytearray(serialize_frame(RpmbFrame(req_resp=RequestType.RESULT_READ_RESPONSE)))
    raw[508:510] = b"\x00\x02"
    assert parse_frame(bytes(raw)).result_code is ResultCode.AUTH_FAILURE


def test_unknown_request_code_rejected():
    raw = bytes(510) + b"\x00\x09"
    with pytest.raises(UnknownRequestType):
        parse_frame(raw)
    assert parse_frame(raw, strict=False).req_resp == 9


def test_request_response_pairing():
    requests = [t for t in RequestType if t.is_request]
    assert len(requests) == 5
    assert sorted(r.response.value for r in requests) == [0x100, 0x200, 0x300, 0x400, 0x500]
    assert RequestType.AUTH_WRITE.response is RequestType.AUTH_WRITE_RESPONSE


@given(st.integers(0, 0x7F))
def test_result_code_round_trip(raw):
    code, expired = ResultCode.from_raw(raw)
    assert int(code) == raw and not expired
    assert code.is_known == (raw in (0, 1, 2, 3, 4, 7))


def test_unknown_result_code_distinct():
    code = ResultCode(0x05)
    assert not code.is_known and code.value == 5
    assert code != ResultCode.ADDRESS_FAILURE
    assert str(ResultCode.AUTH_FAILURE) == "AuthFailure (0x02)"
    code, expired = ResultCode.from_raw(0x83)
    assert code is ResultCode.COUNTER_FAILURE and expired


# RFC 4231 test cases 1 and 2
RFC4231 = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
]


@pytest.mark.parametrize("key,msg,expected", RFC4231)
def test_oracle_reproduces_published_vectors(key, msg, expected):
    assert hmac_sha256_oracle(key, msg).hex() == expected


@settings(max_examples=100)
@given(st.binary(min_size=32, max_size=32), st.lists(frames, min_size=1, max_size=4))
def test_compute_mac_matches_oracle(key, fs):
    covered = b"".join(serialize_frame(f)[228:] for f in fs)
    assert compute_mac(key, fs) == hmac_sha256_oracle(key, covered)


def test_two_block_mac_is_single_hmac():
    key = bytes(range(32))
    fs = build_auth_write(key, 5, 0, [b"\x01" * 256, b"\x02" * 256])
    covered = b"".join(serialize_frame(f)[228:] for f in fs)
    assert len(covered) == 568
    single = hmac_sha256_oracle(key, covered)
    per_frame = b"".join(hmac_sha256_oracle(key, serialize_frame(f)[228:]) for f in fs)
    mac_of_macs = hmac_sha256_oracle(key, per_frame)
    assert fs[-1].key_mac == single != mac_of_macs
    assert fs[0].key_mac == bytes(32)


def test_different_keys_different_macs():
    f = [RpmbFrame(data=b"x" * 256, req_resp=RequestType.AUTH_WRITE)]
    assert compute_mac(b"\x01" * 32, f) != compute_mac(b"\x02" * 32, f)
    assert compute_mac(b"\x01" * 32, f) == compute_mac(b"\x01" * 32, f)


def test_build_auth_write_single_block():
    key = b"k" * 32
    (f,) = build_auth_write(key, 7, 0, [b"\x55" * 256])
    assert f.block_count == 1 and f.address == 0 and f.write_counter == 7
    assert f.request_type is RequestType.AUTH_WRITE
    assert verify_frames(key, [f])
    tampered = f.replace(data=b"\x54" + b"\x55" * 255)
    assert not verify_frames(key, [tampered])
    (other,) = build_auth_write(b"w" * 32, 7, 0, [b"\x55" * 256])
    assert other.replace(key_mac=f.key_mac) == f and other.key_mac != f.key_mac


def test_bad_block_size():
    with pytest.raises(BadBlockSize):
        build_auth_write(b"k" * 32, 0, 0, [b"\x00" * 255])
    with pytest.raises(BadBlockSize):
        build_auth_write(b"k" * 32, 0, 0, [])
    with pytest.raises(BadBlockSize):
        split_blocks(b"\x00" * 300)


@settings(max_examples=200)
@given(st.integers(0, FRAME_SIZE * 8 - 1))
def test_mac_coverage(bit):
    key = b"\x42" * 32
    (f,) = build_auth_write(key, 1, 2, [bytes(range(256))])
    raw = bytearray(serialize_frame(f))
    raw[bit // 8] ^= 1 << (bit % 8)
    g = parse_frame(bytes(raw), strict=False)
    if bit // 8 < 196:
        assert verify_frames(key, [g])
    elif bit // 8 >= 228:
        assert not verify_frames(key, [g])


def test_hex_form_round_trip():
    fs = sign_frames(b"\x01" * 32, [RpmbFrame(write_counter=n, req_resp=RequestType.AUTH_WRITE)
                                    for n in range(3)])
    text = frames_to_hex(fs)
    assert text.count("\n") == 3 and all(len(line) == 1024 for line in text.splitlines())
    assert frames_from_hex("# comment\n" + text) == fs


def test_struct_layout_matches_kernel_definition():
    # struct rpmb_frame from the Linux mmc block driver, big-endian packed
    kernel = struct.Struct(">196s32s256s16sLHHHH")
    f = RpmbFrame(write_counter=9, address=3, req_resp=RequestType.READ_COUNTER)
    fields = kernel.unpack(serialize_frame(f))
    assert fields[4:] == (9, 3, 0, 0, 2)
