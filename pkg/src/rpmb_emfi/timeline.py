"""Timestamped micro-operation schedule of the controller's busy window.

Time zero is the trigger: the last bit of the host's data packet.  Every
delay an injector is configured with is resolved against one of these
timelines.
"""

from __future__ import annotations

import bisect
import dataclasses
import enum
from typing import Iterator, Sequence

TIME_RESOLUTION_NS = 10
WORDS_PER_MAC = 8

# fault observer loop bounds (outer x inner iterations)
OBSERVER_OUTER = 4
OBSERVER_INNER = 62500


class MicroOpKind(enum.Enum):
    RECEIVE_DATA = "ReceiveData"
    CRC_STATUS = "CrcStatus"
    BUSY_ASSERT = "BusyAssert"
    HMAC_COMPUTE = "HmacCompute"
    HMAC_COMPARE_WORD = "HmacCompareWord"
    CHECK_DELAY = "CheckDelay"
    COUNTER_CHECK = "CounterCheck"
    ADDRESS_CHECK = "AddressCheck"
    FLASH_WRITE = "FlashWrite"
    COUNTER_INCREMENT = "CounterIncrement"
    RESULT_STORE = "ResultStore"
    BUSY_RELEASE = "BusyRelease"
    OBSERVER_LOOP = "ObserverLoop"


@dataclasses.dataclass(frozen=True)
class MicroOp:
    kind: MicroOpKind
    start_ns: int
    end_ns: int
    word: int | None = None
    check: int = 0

    def __contains__(self, t: float) -> bool:
        return self.start_ns <= t < self.end_ns

    @property
    def phase(self) -> str:
        """Fault-generator phase this op belongs to."""
        if self.kind is MicroOpKind.HMAC_COMPARE_WORD:
            return "compare"
        if self.kind is MicroOpKind.OBSERVER_LOOP:
            return "observer"
        return "busy"

    def __str__(self) -> str:
        name = self.kind.value
        if self.word is not None:
            name += f"({self.word})" if not self.check else f"({self.word}, check {self.check})"
        return f"{name}[{self.start_ns}, {self.end_ns})"


class _PastEnd:
    __slots__ = ()

    def __repr__(self) -> str:
        return "PAST_END"

    def __bool__(self) -> bool:
        return False


PAST_END = _PastEnd()


@dataclasses.dataclass(frozen=True)
class MicroOpTimeline:
    ops: tuple[MicroOp, ...]

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if not ops:
            raise ValueError("timeline must not be empty")
        prev_end = None
        for op in ops:
            if op.end_ns <= op.start_ns:
                raise ValueError(f"empty or reversed interval {op}")
            if prev_end is not None and op.start_ns < prev_end:
                raise ValueError(f"overlapping interval {op}")
            prev_end = op.end_ns
        object.__setattr__(self, "_starts", [op.start_ns for op in ops])

    def __iter__(self) -> Iterator[MicroOp]:
        return iter(self.ops)

    def __len__(self) -> int:
        return len(self.ops)

    @property
    def end_ns(self) -> int:
        return self.ops[-1].end_ns

    def op_at(self, delay_ns: float) -> MicroOp | _PastEnd:
        """Micro-op whose [start, end) interval contains ``delay_ns``."""
        if delay_ns < 0:
            raise ValueError("delay_ns must be >= 0")
        if delay_ns >= self.end_ns:
            return PAST_END
        i = bisect.bisect_right(self._starts, delay_ns) - 1
        if i >= 0 and delay_ns in self.ops[i]:
            return self.ops[i]
        return _IDLE

    def find(self, kind: MicroOpKind) -> list[MicroOp]:
        return [op for op in self.ops if op.kind is kind]

    def compare_ops(self, check: int = 0) -> list[MicroOp]:
        return [op for op in self.ops
                if op.kind is MicroOpKind.HMAC_COMPARE_WORD and op.check == check]

    def compare_window(self, check: int = 0) -> tuple[int, int]:
        ops = self.compare_ops(check)
        return ops[0].start_ns, ops[-1].end_ns


class _Idle(_PastEnd):
    __slots__ = ()

    def __repr__(self) -> str:
        return "IDLE"


_IDLE = _Idle()


def map_delay_to_microop(timeline: MicroOpTimeline, delay_ns: float) -> MicroOp | _PastEnd:
    return timeline.op_at(delay_ns)


@dataclasses.dataclass(frozen=True)
class TimingProfile:
    """Busy-window layout of one target.

    All values are ns after the trigger.  The post-compare tail is packed
    against ``busy_end_ns``; FlashWrite absorbs whatever slack remains.
    """

    receive_end_ns: int = 200
    crc_end_ns: int = 800
    busy_assert_end_ns: int = 1000
    compare_start_ns: int = 117720
    compare_end_ns: int = 118300
    busy_end_ns: int = 119000
    counter_check_ns: int = 20
    address_check_ns: int = 20
    counter_increment_ns: int = 20
    result_store_ns: int = 20
    busy_release_ns: int = 50
    second_check_word_ns: int = 20
    double_check_max_jitter_ns: int = 150
    observer_iteration_ns: int = 8

    def __post_init__(self):
        if not (0 < self.receive_end_ns < self.crc_end_ns < self.busy_assert_end_ns
                < self.compare_start_ns < self.compare_end_ns < self.busy_end_ns):
            raise ValueError("timing profile timestamps must be strictly increasing")
        if self.compare_end_ns - self.compare_start_ns < WORDS_PER_MAC:
            raise ValueError("compare window too short for 8 word compares")
        if self.compare_end_ns + self._tail_ns() + 1 > self.busy_end_ns:
            raise ValueError("post-compare tail does not fit before busy release")

    def _tail_ns(self) -> int:
        return (self.counter_check_ns + self.address_check_ns + self.counter_increment_ns
                + self.result_store_ns + self.busy_release_ns)

    @property
    def observer_duration_ns(self) -> int:
        return OBSERVER_OUTER * OBSERVER_INNER * self.observer_iteration_ns

    def max_jitter_ns(self) -> int:
        room = (self.busy_end_ns - self.compare_end_ns - self._tail_ns()
                - WORDS_PER_MAC * self.second_check_word_ns - TIME_RESOLUTION_NS)
        return max(0, min(self.double_check_max_jitter_ns, room))


def _word_slots(start: int, end: int, check: int = 0) -> list[MicroOp]:
    width = end - start
    edges = [start + (i * width) // WORDS_PER_MAC for i in range(WORDS_PER_MAC + 1)]
    return [MicroOp(MicroOpKind.HMAC_COMPARE_WORD, edges[i], edges[i + 1], word=i, check=check)
            for i in range(WORDS_PER_MAC)]


def build_write_timeline(timing: TimingProfile, double_check_jitter_ns: int | None = None
                         ) -> MicroOpTimeline:
    """Nominal timeline of an authenticated write.

    ``double_check_jitter_ns`` adds a second full compare after a random
    delay (the DoubleCheck variant); ``None`` builds the single-check
    layout.
    """
    t = timing
    ops = [
        MicroOp(MicroOpKind.RECEIVE_DATA, 0, t.receive_end_ns),
        MicroOp(MicroOpKind.CRC_STATUS, t.receive_end_ns, t.crc_end_ns),
        MicroOp(MicroOpKind.BUSY_ASSERT, t.crc_end_ns, t.busy_assert_end_ns),
        MicroOp(MicroOpKind.HMAC_COMPUTE, t.busy_assert_end_ns, t.compare_start_ns),
    ]
    ops += _word_slots(t.compare_start_ns, t.compare_end_ns)
    cursor = t.compare_end_ns
    if double_check_jitter_ns is not None:
        jitter = int(double_check_jitter_ns)
        if not 0 <= jitter <= t.max_jitter_ns():
            raise ValueError(f"double-check jitter {jitter} ns outside [0, {t.max_jitter_ns()}]")
        if jitter:
            ops.append(MicroOp(MicroOpKind.CHECK_DELAY, cursor, cursor + jitter))
            cursor += jitter
        second_end = cursor + WORDS_PER_MAC * t.second_check_word_ns
        ops += _word_slots(cursor, second_end, check=1)
        cursor = second_end

    tail = [(MicroOpKind.COUNTER_CHECK, t.counter_check_ns),
            (MicroOpKind.ADDRESS_CHECK, t.address_check_ns),
            (MicroOpKind.FLASH_WRITE, None),
            (MicroOpKind.COUNTER_INCREMENT, t.counter_increment_ns),
            (MicroOpKind.RESULT_STORE, t.result_store_ns),
            (MicroOpKind.BUSY_RELEASE, t.busy_release_ns)]
    flash_ns = t.busy_end_ns - cursor - t._tail_ns()
    if flash_ns <= 0:
        raise ValueError("timeline does not fit in the busy window")
    for kind, duration in tail:
        duration = flash_ns if duration is None else duration
        ops.append(MicroOp(kind, cursor, cursor + duration))
        cursor += duration
    assert cursor == t.busy_end_ns
    return MicroOpTimeline(tuple(ops))


def build_short_timeline(timing: TimingProfile) -> MicroOpTimeline:
    """Busy window of a non-write data command (key programming, requests)."""
    t = timing
    return MicroOpTimeline((
        MicroOp(MicroOpKind.RECEIVE_DATA, 0, t.receive_end_ns),
        MicroOp(MicroOpKind.CRC_STATUS, t.receive_end_ns, t.crc_end_ns),
        MicroOp(MicroOpKind.BUSY_ASSERT, t.crc_end_ns, t.busy_assert_end_ns),
        MicroOp(MicroOpKind.BUSY_RELEASE, t.busy_assert_end_ns,
                t.busy_assert_end_ns + t.busy_release_ns),
    ))


def build_observer_timeline(timing: TimingProfile) -> MicroOpTimeline:
    return MicroOpTimeline((MicroOp(MicroOpKind.OBSERVER_LOOP, 0, timing.observer_duration_ns),))


def executed_compare_count(trace: Sequence[MicroOp], check: int = 0) -> int:
    return sum(1 for op in trace
               if op.kind is MicroOpKind.HMAC_COMPARE_WORD and op.check == check)
