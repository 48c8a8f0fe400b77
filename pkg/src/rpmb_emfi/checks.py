"""HMAC comparison routines run by the emulated controller.

``rpmb_check_hmac`` mirrors the decompiled firmware routine: a word-wise
compare driven by a caller-supplied byte length that returns 0 at the
first mismatch and 1 otherwise.  The caller treats any non-zero return as
"valid", which is what makes the three fault scenarios work:

* length forced to 0: the word count is 0 and the loop never runs;
* return register corrupted to a non-zero value;
* call skipped: r0 still holds the pointer to the received MAC.

The hardened variants model the usual software countermeasures.

Faults passed to a routine act on the call as a whole, except
``SKIP_MICRO_OP`` whose operand names the word compare that is skipped.
A ``GENERIC`` register corruption inside the call hits the MAC pointer
argument, so the compare reads unrelated memory.
"""

from __future__ import annotations

import enum
from typing import Iterable

from .faults import FaultKind, FaultPrimitive, Register
from .timeline import WORDS_PER_MAC

M32 = 0xFFFFFFFF

SUCCESS_MAGIC = 0xA5C3B4D2
# SRAM address of the received MAC; what r0 holds at the call site
RECEIVED_MAC_PTR = 0x20003C44
MAC_LENGTH = 32


class CheckVariant(enum.Enum):
    NAIVE = "naive"
    HARDENED_CONSTANT = "hardened-constant"
    DOUBLE_CHECK = "double-check"
    CONSTANT_TIME = "constant-time"

    @classmethod
    def parse(cls, value: str | CheckVariant) -> CheckVariant:
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"naivelisting2": "naive", "naive-listing2": "naive", "listing2": "naive",
                   "hardened": "hardened-constant", "hardenedconstant": "hardened-constant",
                   "doublecheck": "double-check", "constanttime": "constant-time"}
        return cls(aliases.get(key, key))

    @property
    def checks(self) -> int:
        return 2 if self is CheckVariant.DOUBLE_CHECK else 1

    def accepts(self, r0: int) -> bool:
        """Caller-side decision on the routine's return register."""
        if self is CheckVariant.HARDENED_CONSTANT:
            return r0 == SUCCESS_MAGIC
        return r0 != 0


def _word(buf: bytes, i: int) -> int | None:
    chunk = buf[4 * i:4 * i + 4]
    if len(chunk) != 4:
        return None
    return int.from_bytes(chunk, "little")


def _split(faults: Iterable[FaultPrimitive]):
    skip_call = False
    skipped = set()
    length_faults, return_faults, index_faults, acc_faults = [], [], [], []
    pointer_hit = False
    for f in faults:
        if f.kind is FaultKind.SKIP_CALL:
            skip_call = True
        elif f.kind is FaultKind.SKIP_MICRO_OP:
            skipped.add(f.operand)
        elif f.kind is FaultKind.CORRUPT_REGISTER:
            if f.register is Register.LENGTH:
                length_faults.append(f)
            elif f.register is Register.RETURN:
                return_faults.append(f)
            elif f.register is Register.LOOP_INDEX:
                index_faults.append(f)
            elif f.register is Register.ACCUMULATOR:
                acc_faults.append(f)
            else:
                pointer_hit = True
    return skip_call, skipped, length_faults, return_faults, index_faults, acc_faults, pointer_hit


def rpmb_check_hmac(received_mac: bytes, length: int, expected_mac: bytes,
                    faults: Iterable[FaultPrimitive] = (), trace: list | None = None) -> int:
    """Naive word-wise compare; returns the value left in r0.

    ``received_mac`` may extend past the 32-byte MAC (the frame continues in
    memory); reads beyond either buffer never match.  Indices of the word
    compares actually executed are appended to ``trace``.
    """
    skip_call, skipped, length_f, return_f, index_f, _, pointer_hit = _split(faults)
    if skip_call:
        return RECEIVED_MAC_PTR
    length &= M32
    for f in length_f:
        length = f.corrupt(length)
    if pointer_hit:
        received_mac = b""
    words = ((length + 3) & M32) >> 2
    r0 = 1
    i = 0
    if words != 0:
        while True:
            if trace is not None:
                trace.append(i)
            while index_f:
                i = index_f.pop().corrupt(i)
            if i not in skipped:
                a, b = _word(received_mac, i), _word(expected_mac, i)
                if a is None or b is None or a != b:
                    r0 = 0
                    break
            i += 1
            if i >= words:
                break
    for f in return_f:
        r0 = f.corrupt(r0)
    return r0


def check_constant_time(received_mac: bytes, length: int, expected_mac: bytes,
                        faults: Iterable[FaultPrimitive] = (), trace: list | None = None) -> int:
    """Full-length accumulate-difference compare; the length argument is ignored."""
    skip_call, skipped, _, return_f, _, acc_f, pointer_hit = _split(faults)
    if skip_call:
        return RECEIVED_MAC_PTR
    if pointer_hit:
        received_mac = b""
    diff = 0
    for i in range(WORDS_PER_MAC):
        if trace is not None:
            trace.append(i)
        if i in skipped:
            continue
        a, b = _word(received_mac, i), _word(expected_mac, i)
        diff |= M32 if a is None or b is None else a ^ b
    for f in acc_f:
        diff = f.corrupt(diff)
    r0 = 1 if diff == 0 else 0
    for f in return_f:
        r0 = f.corrupt(r0)
    return r0


def check_hardened(received_mac: bytes, length: int, expected_mac: bytes,
                   faults: Iterable[FaultPrimitive] = (), trace: list | None = None) -> int:
    """Constant-time compare returning ``SUCCESS_MAGIC`` on success.

    A length other than the full MAC length fails closed, so zeroing the
    length argument cannot shorten the compare.
    """
    skip_call, skipped, length_f, return_f, _, acc_f, pointer_hit = _split(faults)
    if skip_call:
        return RECEIVED_MAC_PTR
    length &= M32
    for f in length_f:
        length = f.corrupt(length)
    if pointer_hit:
        received_mac = b""
    diff = 0 if length == MAC_LENGTH else M32
    for i in range(WORDS_PER_MAC):
        if trace is not None:
            trace.append(i)
        if i in skipped:
            continue
        a, b = _word(received_mac, i), _word(expected_mac, i)
        diff |= M32 if a is None or b is None else a ^ b
    for f in acc_f:
        diff = f.corrupt(diff)
    r0 = SUCCESS_MAGIC if diff == 0 else 0
    for f in return_f:
        r0 = f.corrupt(r0)
    return r0


_ROUTINES = {
    CheckVariant.NAIVE: rpmb_check_hmac,
    CheckVariant.DOUBLE_CHECK: rpmb_check_hmac,
    CheckVariant.CONSTANT_TIME: check_constant_time,
    CheckVariant.HARDENED_CONSTANT: check_hardened,
}


def routine_for(variant: CheckVariant):
    return _ROUTINES[variant]


def verify_mac(variant: CheckVariant, received_mac: bytes, expected_mac: bytes,
               faults_per_check: Iterable[Iterable[FaultPrimitive]] | None = None,
               traces: list[list] | None = None) -> bool:
    """Run the variant's full decision (one or two calls) and return validity."""
    routine = _ROUTINES[variant]
    faults_per_check = list(faults_per_check or [])
    ok = True
    for check in range(variant.checks):
        faults = faults_per_check[check] if check < len(faults_per_check) else ()
        trace = traces[check] if traces is not None else None
        r0 = routine(received_mac, MAC_LENGTH, expected_mac, faults, trace)
        ok = variant.accepts(r0) and ok
    return ok
