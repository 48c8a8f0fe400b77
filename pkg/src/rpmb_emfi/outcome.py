"""Classification of observer and RPMB responses into attempt outcomes."""

from __future__ import annotations

import dataclasses
import enum
import struct

from .controller import OBSERVER_EXPECTED, CommandResponse, ResponseKind
from .protocol import FRAME_SIZE, RESULT_OFFSET, ResultCode


class OutcomeKind(enum.Enum):
    NORMAL = "Normal"
    GLITCH = "Glitch"
    CRASH = "Crash"
    SUCCESS = "Success"
    ERROR = "Error"


@dataclasses.dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    code: ResultCode | None = None

    def __str__(self) -> str:
        if self.kind is OutcomeKind.ERROR:
            return f"Error({self.code.label})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> Outcome:
        if text.startswith("Error(") and text.endswith(")"):
            label = text[6:-1]
            for code in ResultCode:
                if code.label == label:
                    return cls(OutcomeKind.ERROR, code)
            if label.startswith("Unknown("):
                return cls(OutcomeKind.ERROR, ResultCode(int(label[8:-1], 16)))
            raise ValueError(f"unknown result label {label!r}")
        return cls(OutcomeKind(text))


NORMAL = Outcome(OutcomeKind.NORMAL)
GLITCH = Outcome(OutcomeKind.GLITCH)
CRASH = Outcome(OutcomeKind.CRASH)
SUCCESS = Outcome(OutcomeKind.SUCCESS)


def error(code: int) -> Outcome:
    return Outcome(OutcomeKind.ERROR, ResultCode(code))


def _payload(response: CommandResponse | bytes) -> bytes:
    if isinstance(response, CommandResponse):
        return response.payload()
    return bytes(response)


def _filled(buf: bytes) -> bool:
    return bool(buf) and (buf.count(0) == len(buf) or buf.count(0xFF) == len(buf))


def classify_observer(response: CommandResponse | bytes) -> Outcome:
    """Expected (250000, 1750000) is Normal, a 0x00/0xFF image is Crash, anything else Glitch."""
    buf = _payload(response)
    if _filled(buf) or len(buf) < 8:
        return CRASH
    if struct.unpack_from("<II", buf) == OBSERVER_EXPECTED:
        return NORMAL
    return GLITCH


def classify_rpmb(response: CommandResponse | bytes) -> Outcome:
    """Classify the frame returned by a result read after a wrong-MAC write."""
    if isinstance(response, CommandResponse) and response.kind == ResponseKind.UNRESPONSIVE:
        return CRASH
    buf = _payload(response)
    if _filled(buf) or len(buf) < FRAME_SIZE:
        return CRASH
    code, _ = ResultCode.from_raw(struct.unpack_from(">H", buf, RESULT_OFFSET)[0])
    if code == ResultCode.AUTH_FAILURE:
        return NORMAL
    if code == ResultCode.OPERATION_OK:
        return SUCCESS
    return error(code)
